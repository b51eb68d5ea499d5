#pragma once

// One JSON document drives every command; CLI flags override its fields.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdt/encoder.hpp"
#include "tdt/objective.hpp"
#include "tdt/synth_data.hpp"
#include "tdt/trainer.hpp"

namespace tdt::cli {

inline const std::vector<std::string> kAnalysisNames = {"drop-curve", "perturb", "histogram", "export-reprs",
                                                        "domain-eval"};
inline const std::vector<std::string> kSplitNames = {"train", "dev", "test_iid", "test_antispurious"};

struct AnalysisConfig {
  std::vector<std::string> selections;
  std::string split = "test_iid";
  std::vector<double> drop_rates = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  std::vector<double> perturb_rates = {0.1, 0.2, 0.3, 0.4, 0.5};
  std::size_t n_datasets = 10;
  std::uint64_t perturb_seed = 0;
  std::size_t bins = 20;
  bool softmax_normalize = false;
  std::string ood_split = "test_antispurious";
  // Empty means identity over the model's classes.
  std::vector<int> mapping;

  void validate() const;
};

struct GradcheckConfig {
  std::string variant = "soft";
  double h = 1e-5;
  double tol = 1e-4;
  std::size_t coords_per_param = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RunConfig {
  std::string command;
  // generate
  data::TaskSpec task;
  data::CorpusSizes sizes;
  std::uint64_t seed = 0;
  // train / eval / analyze
  std::string data_dir;
  std::string checkpoint;
  std::string eval_split = "test_iid";
  model::ModelConfig model;
  objective::TDTConfig tdt;
  train::TrainConfig train;
  AnalysisConfig analysis;
  GradcheckConfig gradcheck;
  std::string output_dir;

  void validate() const;
};

// Accepts "task" inline or "task_path" pointing at a TaskSpec document
// (resolved relative to the config file). Unknown keys throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, const std::string& base_dir = ".");
// Resolved form written as the replay snapshot; output_dir is omitted.
nlohmann::json snapshot_json(const RunConfig& rc);

nlohmann::json read_json_file(const std::string& path);
// Writes with a trailing newline; throws IoError on failure.
void write_text_file(const std::string& path, const std::string& text);
void write_json_file(const std::string& path, const nlohmann::json& j);

// Default output root: $TDT_OUTPUT_ROOT, else "runs".
std::string default_output_root();

// "0.1,0.2" or "0.1..0.5" (step 0.1).
std::vector<double> parse_rate_list(const std::string& s);

}  // namespace tdt::cli
