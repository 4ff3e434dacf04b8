#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metaseg/taskset.hpp"

namespace metaseg {

/// On-disk layout: Frames/<seq>/%05d.png (8-bit RGB), Annotations/<seq>/
/// %05d.png (8-bit gray, pixel value = object id), meta.json (fps and frame
/// count per sequence).
void write_davis_layout(const std::filesystem::path& root, const std::vector<Sequence>& seqs);

/// Loads every sequence under root; an absent or empty root yields {}.
/// Annotation files may be missing for frames > 0 (empty gt); a missing
/// frame-0 annotation is a SequenceError.
std::vector<Sequence> load_davis_sequences(const std::filesystem::path& root);

TaskSet load_davis_layout(const std::filesystem::path& root, std::string split = "val");

}  // namespace metaseg
