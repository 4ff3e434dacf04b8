#pragma once

#include <string>
#include <vector>

namespace metaseg {

/// Fixed-format numeric printing so CSV output is byte-stable across runs.
std::string fmt_fixed(double v, int decimals);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string serialize() const;
};

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace metaseg
