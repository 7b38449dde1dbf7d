#pragma once

#include <string>
#include <vector>

#include "fdmix/train.hpp"

namespace fdmix {

struct ExperimentConfig {
  TrainConfig train;
  DataConfig data;
  std::string out_dir = "out";
  std::string report_formats = "csv,json,markdown";  // comma-separated subset
  std::string study_kind = "baselines";
  int seed_replicates = 1;
};

// Flat-key JSON config plus key=value overrides (overrides win). Every key has
// a default; an unknown key is rejected with the nearest valid key suggested;
// a type mismatch is rejected.
ExperimentConfig parse_config(const std::string& json_path,
                              const std::vector<std::string>& overrides = {});
ExperimentConfig parse_overrides(const std::vector<std::string>& overrides);

std::vector<std::string> config_keys();

// Full config echo as JSON (parses back losslessly through parse_config).
std::string config_to_json(const ExperimentConfig& cfg);

StudyKind parse_study_kind(const std::string& name);

}  // namespace fdmix
