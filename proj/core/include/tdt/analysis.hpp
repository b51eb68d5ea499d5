#pragma once

// Read-only diagnostics over trained parameters, each producing plot-ready CSV.

#include <cstdint>
#include <string>
#include <vector>

#include "tdt/encoder.hpp"
#include "tdt/objective.hpp"
#include "tdt/synth_data.hpp"

namespace tdt::analysis {

enum class DropOrder { descending, ascending };
std::string to_string(DropOrder o);
DropOrder parse_drop_order(const std::string& s);

struct Curve {
  std::vector<double> x;  // drop rates
  std::vector<double> y;  // accuracy
  DropOrder order = DropOrder::descending;
  std::vector<std::uint64_t> seeds;
  // Set when the checkpoint has no trained confidence head.
  bool uniform_scores = false;
};

struct PerturbationReport {
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> accuracies;  // one per dataset, in dataset order
  double mean = 0.0, sd = 0.0, min = 0.0, max = 0.0;
};

struct Histogram {
  std::vector<double> edges;  // n_bins + 1
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  // Mean score per provenance flag (keyword, spurious, noise); NaN when absent.
  double mean_keyword = 0.0, mean_spurious = 0.0, mean_noise = 0.0;
  std::size_t n_keyword = 0, n_spurious = 0, n_noise = 0;
};

// Per-token confidence in [0,1] for each example's ordinary tokens: the sigmoid
// score of a soft head or the noiseless keep probability of a hard head.
std::vector<std::vector<double>> token_confidences(const model::ModelParams& params, const data::Split& split,
                                                   std::size_t batch_size = 64);

struct DropOptions {
  // Normalize with a softmax instead of c_i / sum(c).
  bool softmax_normalize = false;
  std::size_t batch_size = 64;
};

// Accuracy after replacing the top (descending) or bottom (ascending)
// ceil(r * n) ordinary tokens of every example with MASK. Scores come from the
// unmasked input; ties go to the lower position.
Curve drop_curve(const model::ModelParams& params, const data::Split& split, DropOrder order,
                 const std::vector<double>& rates, const DropOptions& opts = {});

// Masks one split by confidence order at one rate.
data::Split drop_tokens(const data::Split& split, const std::vector<std::vector<double>>& scores, DropOrder order,
                        double rate, int mask_id);

// n_datasets perturbed copies of split; each ordinary position is replaced
// with probability rate by MASK or (fair coin) a token drawn from the same input.
PerturbationReport perturb_eval(const model::ModelParams& params, const data::Split& split, double rate,
                                std::size_t n_datasets, std::uint64_t seed);

data::Split perturb_split(const data::Split& split, double rate, std::uint64_t seed, std::size_t dataset_index,
                          int mask_id);

Histogram confidence_histogram(const model::ModelParams& params, const data::Split& split, std::size_t n_bins);

// CSV: example,variant,label,h0..h{d-1}; three rows per example.
void export_representations(const model::ModelParams& params, const data::Split& split,
                            const objective::TDTConfig& tdt, const std::string& path);

// Accuracy of label_map(predictions) against the split's labels.
double domain_eval(const model::ModelParams& params, const data::Split& ood_split, const data::LabelMapping& mapping);

void write_curves_csv(const std::vector<Curve>& curves, const std::string& path);
void write_reports_csv(const std::vector<PerturbationReport>& reports, const std::string& path);
void write_histogram_csv(const Histogram& h, const std::string& path);

}  // namespace tdt::analysis
