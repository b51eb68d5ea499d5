#pragma once

// Deterministic mini-batch training: Adam with linear warmup / linear decay,
// global-norm clipping, periodic dev evaluation and best-dev selection.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdt/encoder.hpp"
#include "tdt/objective.hpp"
#include "tdt/synth_data.hpp"

namespace tdt::train {

struct TrainConfig {
  double lr = 3e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 3000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  // Dev evaluation cadence in steps; 0 evaluates only after the last step.
  std::size_t eval_interval = 250;
  // Optional path for the best-dev checkpoint.
  std::string checkpoint_path;
  // Run the full three-pass objective even when alpha = beta = 0.
  bool force_full_objective = false;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear ramp 0 -> lr over warmup, then linear decay to 0 at total_steps.
double lr_at_step(std::size_t step, const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

// One bias-corrected Adam update over `params` using their accumulated grads.
// Throws NumericError naming the first parameter with a non-finite gradient.
void adam_step(std::span<ad::NamedTensor> params, AdamState& state, double lr, const TrainConfig& cfg);

// Scales every gradient so the global L2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_gradients(std::span<ad::NamedTensor> params, double max_norm);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double l_cla = 0.0, l_c = 0.0, l_r = 0.0, total = 0.0;
};

struct EvalPoint {
  std::size_t step = 0;
  double dev_accuracy = 0.0;
};

struct RunRecord {
  std::string label;  // vanilla | tdt | tdt-hard
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
  std::vector<EvalPoint> evals;
  std::size_t best_step = 0;
  double best_dev_accuracy = -1.0;
  double wall_clock_seconds = 0.0;
  nlohmann::json config;  // model / tdt / train snapshot
};

// Deterministic serialization; wall-clock time is deliberately excluded.
nlohmann::json to_json(const RunRecord& r);
// step,l_cla,l_c,l_r,total,dev_acc (dev_acc empty between evaluations)
std::string metrics_csv(const RunRecord& r);

struct TrainResult {
  model::ModelParams params;
  RunRecord record;
};

// Throws std::invalid_argument on an empty train split and NumericError
// (with the step index) if the loss diverges.
TrainResult train(const data::Split& train_split, const data::Split& dev_split, const model::ModelConfig& model_cfg,
                  const objective::TDTConfig& tdt_cfg, const TrainConfig& train_cfg);

// Batches of a split's examples (ordinary tokens) with labels.
model::EncodedBatch make_batch(const data::Split& split, std::span<const std::size_t> indices,
                               const model::ModelConfig& cfg);

struct ExampleResult {
  int label = 0;
  int predicted = 0;
  std::vector<double> probs;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<ExampleResult> examples;
};

// No tape, no randomness. Throws on an empty split.
EvalResult evaluate(const model::ModelParams& params, const data::Split& split, std::size_t batch_size = 64);

}  // namespace tdt::train
