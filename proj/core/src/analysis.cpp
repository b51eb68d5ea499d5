#include "tdt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>

#include "tdt/errors.hpp"
#include "tdt/ops.hpp"
#include "tdt/trainer.hpp"

namespace tdt::analysis {

using ad::Tensor;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

template <class Fn>
void for_batches(const data::Split& split, std::size_t batch_size, const model::ModelConfig& cfg, Fn&& fn) {
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, split.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    fn(start, train::make_batch(split, idx, cfg));
  }
}

}  // namespace

std::string to_string(DropOrder o) { return o == DropOrder::descending ? "descending" : "ascending"; }

DropOrder parse_drop_order(const std::string& s) {
  if (s == "descending") return DropOrder::descending;
  if (s == "ascending") return DropOrder::ascending;
  throw ConfigError("unknown drop order '" + s + "' (expected descending or ascending)");
}

std::vector<std::vector<double>> token_confidences(const model::ModelParams& params, const data::Split& split,
                                                   std::size_t batch_size) {
  std::vector<std::vector<double>> out(split.size());
  const auto& cfg = params.config;
  for_batches(split, batch_size, cfg, [&](std::size_t start, const model::EncodedBatch& b) {
    Tensor logits = model::confidence_logits(model::embed(b, params), params);
    auto z = logits.data();
    for (std::size_t r = 0; r < b.batch; ++r) {
      auto& row = out[start + r];
      for (std::size_t t = 0; t < b.seq; ++t) {
        const std::size_t i = r * b.seq + t;
        if (b.ordinary_mask[i] == 0.0) continue;
        double score;
        if (cfg.confidence_outputs == 1) {
          score = 1.0 / (1.0 + std::exp(-z[i]));
        } else {
          // softmax over (drop, keep) evaluated at the keep component
          score = 1.0 / (1.0 + std::exp(z[2 * i] - z[2 * i + 1]));
        }
        row.push_back(score);
      }
    }
  });
  return out;
}

data::Split drop_tokens(const data::Split& split, const std::vector<std::vector<double>>& scores, DropOrder order,
                        double rate, int mask_id) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("drop rate must lie in [0, 1]");
  if (scores.size() != split.size()) throw DimensionError("drop_tokens: score rows do not match split");
  data::Split out = split;
  for (std::size_t e = 0; e < out.size(); ++e) {
    auto& tokens = out.examples[e].tokens;
    const auto& s = scores[e];
    if (s.size() != tokens.size()) throw DimensionError("drop_tokens: score length mismatch");
    const std::size_t n = tokens.size();
    const auto k = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
      return order == DropOrder::descending ? s[a] > s[b] : s[a] < s[b];
    });
    for (std::size_t i = 0; i < std::min(k, n); ++i) tokens[pos[i]] = mask_id;
  }
  return out;
}

Curve drop_curve(const model::ModelParams& params, const data::Split& split, DropOrder order,
                 const std::vector<double>& rates, const DropOptions& opts) {
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (!(rates[i] >= 0.0 && rates[i] <= 1.0)) throw std::invalid_argument("drop rates must lie in [0, 1]");
    if (i > 0 && !(rates[i] > rates[i - 1])) throw std::invalid_argument("drop rates must be strictly increasing");
  }
  Curve c;
  c.order = order;
  std::vector<std::vector<double>> scores;
  if (params.confidence_trained) {
    scores = token_confidences(params, split, opts.batch_size);
    for (auto& row : scores) {
      if (row.empty()) continue;
      if (opts.softmax_normalize) {
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (auto& v : row) z += (v = std::exp(v - mx));
        for (auto& v : row) v /= z;
      } else {
        const double z = std::accumulate(row.begin(), row.end(), 0.0);
        if (z > 0.0)
          for (auto& v : row) v /= z;
      }
    }
  } else {
    std::cerr << "warning: checkpoint has no trained confidence head; using uniform scores\n";
    c.uniform_scores = true;
    scores.resize(split.size());
    for (std::size_t e = 0; e < split.size(); ++e)
      scores[e].assign(split.examples[e].tokens.size(), 1.0 / static_cast<double>(split.examples[e].tokens.size()));
  }
  for (double r : rates) {
    c.x.push_back(r);
    c.y.push_back(train::evaluate(params, drop_tokens(split, scores, order, r, params.config.special.mask),
                                  opts.batch_size)
                      .accuracy);
  }
  return c;
}

data::Split perturb_split(const data::Split& split, double rate, std::uint64_t seed, std::size_t dataset_index,
                          int mask_id) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("perturbation rate must lie in [0, 1]");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(dataset_index), 0x9e37u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  data::Split out = split;
  for (std::size_t e = 0; e < out.size(); ++e) {
    const auto& src = split.examples[e].tokens;
    auto& tokens = out.examples[e].tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!(u(rng) < rate)) continue;
      if (u(rng) < 0.5) {
        tokens[i] = mask_id;
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, src.size() - 1);
        tokens[i] = src[pick(rng)];
      }
    }
  }
  return out;
}

PerturbationReport perturb_eval(const model::ModelParams& params, const data::Split& split, double rate,
                                std::size_t n_datasets, std::uint64_t seed) {
  if (n_datasets == 0) throw std::invalid_argument("perturb_eval: n_datasets must be >= 1");
  PerturbationReport r;
  r.rate = rate;
  r.seed = seed;
  for (std::size_t k = 0; k < n_datasets; ++k)
    r.accuracies.push_back(
        train::evaluate(params, perturb_split(split, rate, seed, k, params.config.special.mask)).accuracy);
  const double n = static_cast<double>(n_datasets);
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
  r.sd = n_datasets > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  auto [mn, mx] = std::minmax_element(r.accuracies.begin(), r.accuracies.end());
  r.min = *mn;
  r.max = *mx;
  return r;
}

Histogram confidence_histogram(const model::ModelParams& params, const data::Split& split, std::size_t n_bins) {
  if (n_bins == 0) throw std::invalid_argument("confidence_histogram: n_bins must be >= 1");
  Histogram h;
  h.counts.assign(n_bins, 0);
  for (std::size_t i = 0; i <= n_bins; ++i) h.edges.push_back(static_cast<double>(i) / static_cast<double>(n_bins));
  double sum_kw = 0.0, sum_sp = 0.0, sum_no = 0.0;
  auto scores = token_confidences(params, split);
  for (std::size_t e = 0; e < split.size(); ++e) {
    const auto& flags = split.examples[e].flags;
    for (std::size_t i = 0; i < scores[e].size(); ++i) {
      const double s = scores[e][i];
      auto bin = static_cast<std::size_t>(s * static_cast<double>(n_bins));
      ++h.counts[std::min(bin, n_bins - 1)];
      ++h.total;
      if (i >= flags.size()) continue;
      switch (flags[i]) {
        case data::TokenFlag::keyword: sum_kw += s; ++h.n_keyword; break;
        case data::TokenFlag::spurious: sum_sp += s; ++h.n_spurious; break;
        case data::TokenFlag::noise: sum_no += s; ++h.n_noise; break;
      }
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  h.mean_keyword = h.n_keyword ? sum_kw / static_cast<double>(h.n_keyword) : nan;
  h.mean_spurious = h.n_spurious ? sum_sp / static_cast<double>(h.n_spurious) : nan;
  h.mean_noise = h.n_noise ? sum_no / static_cast<double>(h.n_noise) : nan;
  return h;
}

void export_representations(const model::ModelParams& params, const data::Split& split,
                            const objective::TDTConfig& tdt, const std::string& path) {
  if (params.config.confidence_outputs != tdt.confidence_outputs())
    throw ConfigError("confidence head arity does not match variant mode " + objective::to_string(tdt.variant));
  auto out = open_out(path);
  const std::size_t d = params.config.d_model;
  out << "example,variant,label";
  for (std::size_t j = 0; j < d; ++j) out << ",h" << j;
  out << '\n';
  objective::Rng rng(0);
  for_batches(split, 64, params.config, [&](std::size_t start, const model::EncodedBatch& b) {
    Tensor e = model::embed(b, params);
    Tensor c, anchor;
    if (tdt.variant == objective::VariantMode::soft) {
      c = model::confidence_scores(e, params, b);
      anchor = tdt.perturbation == objective::PerturbationMode::sequence_mean
                   ? objective::anchor_rows(objective::sequence_mean_anchor(e, b), b.batch, b.seq)
                   : objective::anchor_rows(
                         objective::perturbation_anchor(params.token_emb, tdt.perturbation, rng, tdt.gaussian_sigma),
                         b.batch, b.seq);
    } else {
      objective::GumbelOptions g{tdt.tau, false, false};
      c = objective::gumbel_confidence(e, params, b, g, rng).c;
      anchor = objective::mask_embedding_rows(b, params);
    }
    const Tensor variants[3] = {e, objective::positive_variant(e, c, anchor), objective::negative_variant(e, c, b)};
    const char* names[3] = {"original", "positive", "negative"};
    Tensor cls[3];
    for (int v = 0; v < 3; ++v) cls[v] = model::forward(variants[v], b, params).cls;
    for (std::size_t r = 0; r < b.batch; ++r) {
      for (int v = 0; v < 3; ++v) {
        out << start + r << ',' << names[v] << ',' << b.labels[r];
        auto h = cls[v].data();
        for (std::size_t j = 0; j < d; ++j) out << ',' << num(h[r * d + j]);
        out << '\n';
      }
    }
  });
  finish(out, path);
}

double domain_eval(const model::ModelParams& params, const data::Split& ood_split, const data::LabelMapping& mapping) {
  if (mapping.size() < params.config.n_classes)
    throw IndexError("mapping covers " + std::to_string(mapping.size()) + " of " +
                     std::to_string(params.config.n_classes) + " classes");
  auto res = train::evaluate(params, ood_split);
  std::vector<int> pred;
  pred.reserve(res.examples.size());
  for (const auto& ex : res.examples) pred.push_back(ex.predicted);
  auto mapped = data::label_map(pred, mapping);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < mapped.size(); ++i) correct += mapped[i] == ood_split.examples[i].label;
  return static_cast<double>(correct) / static_cast<double>(mapped.size());
}

void write_curves_csv(const std::vector<Curve>& curves, const std::string& path) {
  auto out = open_out(path);
  out << "rate,accuracy,order\n";
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.x.size(); ++i) out << num(c.x[i]) << ',' << num(c.y[i]) << ',' << to_string(c.order) << '\n';
  finish(out, path);
}

void write_reports_csv(const std::vector<PerturbationReport>& reports, const std::string& path) {
  auto out = open_out(path);
  out << "rate,seed,accuracy\n";
  for (const auto& r : reports)
    for (std::size_t k = 0; k < r.accuracies.size(); ++k) out << num(r.rate) << ',' << k << ',' << num(r.accuracies[k]) << '\n';
  finish(out, path);
}

void write_histogram_csv(const Histogram& h, const std::string& path) {
  auto out = open_out(path);
  out << "bin_low,bin_high,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    out << num(h.edges[i]) << ',' << num(h.edges[i + 1]) << ',' << h.counts[i] << '\n';
  finish(out, path);
}

}  // namespace tdt::analysis
