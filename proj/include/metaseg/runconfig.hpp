#pragma once

#include <string>
#include <vector>

#include "metaseg/inference.hpp"
#include "metaseg/metaopt.hpp"
#include "metaseg/taskset.hpp"

namespace metaseg {

struct RunPaths {
  std::string train_data;  // dataset root for meta-training / pre-training
  std::string val_data;    // held-out dataset root (ablation); empty = generate
  std::string out = "run";
};

struct AblateSettings {
  std::vector<std::string> rows;  // row names in output order; empty = full matrix
  double grid_lo = 1e-5, grid_hi = 1e-1;
  int grid_points = 9;
  int val_sequences = 4;  // generated benchmark only
  int parent_steps = 400;
  int parent_batch = 4;
  double parent_lr = 1e-3;
};

/// Everything a run needs, JSON-backed. Unknown keys are rejected; every
/// field has the default written here; the resolved form is persisted into
/// each run's output directory.
struct RunConfig {
  TrainerConfig trainer;  // holds arch/aug/loss/priors/radam sub-sections
  InferenceConfig inference;
  SynthConfig synth;
  AblateSettings ablate;
  RunPaths paths;
  uint64_t seed = 0;
  int workers = 1;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& rc);

}  // namespace metaseg
