#include "tdt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "tdt/errors.hpp"
#include "tdt/json_util.hpp"

namespace tdt::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (warmup_steps > total_steps) throw ConfigError("train: warmup_steps must not exceed total_steps");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be a finite value >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("train: clip_norm must be >= 0");
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"warmup_steps", c.warmup_steps},
              {"total_steps", c.total_steps},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"clip_norm", c.clip_norm},
              {"eval_interval", c.eval_interval},
              {"checkpoint_path", c.checkpoint_path},
              {"force_full_objective", c.force_full_objective}};
}

TrainConfig train_config_from_json(const json& j) {
  using json_util::read_opt;
  constexpr auto ctx = "train";
  json_util::reject_unknown_keys(j,
                                 {"lr", "warmup_steps", "total_steps", "batch_size", "seed", "adam_beta1", "adam_beta2",
                                  "adam_eps", "clip_norm", "eval_interval", "checkpoint_path", "force_full_objective"},
                                 ctx);
  TrainConfig c;
  read_opt(j, "lr", c.lr, ctx);
  read_opt(j, "warmup_steps", c.warmup_steps, ctx);
  read_opt(j, "total_steps", c.total_steps, ctx);
  read_opt(j, "batch_size", c.batch_size, ctx);
  read_opt(j, "seed", c.seed, ctx);
  read_opt(j, "adam_beta1", c.adam_beta1, ctx);
  read_opt(j, "adam_beta2", c.adam_beta2, ctx);
  read_opt(j, "adam_eps", c.adam_eps, ctx);
  read_opt(j, "clip_norm", c.clip_norm, ctx);
  read_opt(j, "eval_interval", c.eval_interval, ctx);
  read_opt(j, "checkpoint_path", c.checkpoint_path, ctx);
  read_opt(j, "force_full_objective", c.force_full_objective, ctx);
  c.validate();
  return c;
}

double lr_at_step(std::size_t step, const TrainConfig& cfg) {
  if (step >= cfg.total_steps) return 0.0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double decay_span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr * static_cast<double>(cfg.total_steps - step) / decay_span;
}

void adam_step(std::span<ad::NamedTensor> params, AdamState& state, double lr, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam: state does not match parameter list");
  for (const auto& p : params)
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
      v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

double clip_gradients(std::span<ad::NamedTensor> params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto& node = *p.tensor.node();
      for (auto& g : node.grad) g *= s;
    }
  }
  return norm;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t which) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), which, 0x7a11u};
  return std::mt19937_64(seq);
}

}  // namespace

json to_json(const RunRecord& r) {
  json steps = json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"step", s.step}, {"lr", s.lr}, {"l_cla", s.l_cla}, {"l_c", s.l_c}, {"l_r", s.l_r}, {"total", s.total}});
  json evals = json::array();
  for (const auto& e : r.evals) evals.push_back({{"step", e.step}, {"dev_accuracy", e.dev_accuracy}});
  return json{{"label", r.label},     {"seed", r.seed},           {"config", r.config},
              {"steps", steps},       {"evals", evals},           {"best_step", r.best_step},
              {"best_dev_accuracy", r.best_dev_accuracy}};
}

std::string metrics_csv(const RunRecord& r) {
  std::ostringstream os;
  os << "step,l_cla,l_c,l_r,total,dev_acc\n";
  std::size_t e = 0;
  for (const auto& s : r.steps) {
    os << s.step << ',' << fmt_double(s.l_cla) << ',' << fmt_double(s.l_c) << ',' << fmt_double(s.l_r) << ','
       << fmt_double(s.total) << ',';
    while (e < r.evals.size() && r.evals[e].step < s.step) ++e;
    if (e < r.evals.size() && r.evals[e].step == s.step) os << fmt_double(r.evals[e].dev_accuracy);
    os << '\n';
  }
  return os.str();
}

model::EncodedBatch make_batch(const data::Split& split, std::span<const std::size_t> indices,
                               const model::ModelConfig& cfg) {
  std::vector<std::vector<int>> seqs;
  std::vector<int> labels;
  seqs.reserve(indices.size());
  for (auto i : indices) {
    seqs.push_back(split.examples.at(i).tokens);
    labels.push_back(split.examples[i].label);
  }
  return model::encode(seqs, labels, cfg);
}

EvalResult evaluate(const model::ModelParams& params, const data::Split& split, std::size_t batch_size) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalResult out;
  std::size_t correct = 0;
  const std::size_t n_classes = params.config.n_classes;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, split.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto batch = make_batch(split, idx, params.config);
    auto probs = model::forward(model::embed(batch, params), batch, params).probs;
    auto pred = model::argmax_rows(probs);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      ExampleResult er;
      er.label = batch.labels[r];
      er.predicted = pred[r];
      er.probs.assign(probs.data().begin() + static_cast<std::ptrdiff_t>(r * n_classes),
                      probs.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n_classes));
      correct += er.label == er.predicted;
      out.examples.push_back(std::move(er));
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  return out;
}

TrainResult train(const data::Split& train_split, const data::Split& dev_split, const model::ModelConfig& model_cfg,
                  const objective::TDTConfig& tdt_cfg, const TrainConfig& cfg) {
  cfg.validate();
  tdt_cfg.validate();
  if (train_split.empty()) throw std::invalid_argument("train: empty train split");
  const auto started = std::chrono::steady_clock::now();

  model::ModelConfig mc = model_cfg;
  mc.confidence_outputs = tdt_cfg.confidence_outputs();
  mc.validate();
  auto init_rng = stream(cfg.seed, 0);
  model::ModelParams params = model::ModelParams::init(mc, init_rng());
  auto shuffle_rng = stream(cfg.seed, 1);
  auto loss_rng = stream(cfg.seed, 2);
  const bool vanilla_path = tdt_cfg.is_vanilla() && !cfg.force_full_objective;

  RunRecord rec;
  rec.label = tdt_cfg.run_label();
  rec.seed = cfg.seed;
  rec.config = json{{"model", model::to_json(mc)}, {"tdt", objective::to_json(tdt_cfg)}, {"train", to_json(cfg)}};

  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  const std::size_t bs = std::min(cfg.batch_size, order.size());

  auto named = params.named_parameters();
  AdamState adam;
  model::ModelParams best;
  bool have_best = false;

  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    if (cursor + bs > order.size()) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      cursor = 0;
    }
    auto batch = make_batch(train_split, std::span<const std::size_t>(order.data() + cursor, bs), mc);
    cursor += bs;

    StepRecord sr;
    sr.step = step;
    sr.lr = lr_at_step(step, cfg);
    {
      ad::Tape tape;
      ad::TapeScope scope(tape);
      ad::Tensor loss;
      if (vanilla_path) {
        loss = objective::vanilla_loss(batch, params);
        sr.l_cla = sr.total = loss.item();
      } else {
        auto lb = objective::total_loss(batch, params, tdt_cfg, loss_rng);
        loss = lb.total;
        sr.l_cla = lb.l_cla.item();
        sr.l_c = lb.l_c.item();
        sr.l_r = lb.l_r.item();
        sr.total = lb.total.item();
      }
      if (!std::isfinite(sr.total)) throw NumericError("training diverged at step " + std::to_string(step));
      tape.backward(loss);
      tape.clear();
    }
    if (cfg.clip_norm > 0.0) clip_gradients(named, cfg.clip_norm);
    adam_step(named, adam, sr.lr, cfg);
    params.zero_grad();
    rec.steps.push_back(sr);

    const bool eval_now = (cfg.eval_interval > 0 && step % cfg.eval_interval == 0) || step == cfg.total_steps;
    if (eval_now && !dev_split.empty()) {
      double acc = evaluate(params, dev_split).accuracy;
      rec.evals.push_back({step, acc});
      if (acc > rec.best_dev_accuracy) {
        rec.best_dev_accuracy = acc;
        rec.best_step = step;
        best = params.clone();
        have_best = true;
      }
    }
  }

  params.confidence_trained = !tdt_cfg.is_vanilla();
  if (have_best) {
    best.confidence_trained = params.confidence_trained;
    params = std::move(best);
  } else {
    rec.best_step = cfg.total_steps;
  }
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (!cfg.checkpoint_path.empty())
    model::save_checkpoint(cfg.checkpoint_path, params, json{{"run_label", rec.label}, {"best_step", rec.best_step}});
  return {std::move(params), std::move(rec)};
}

}  // namespace tdt::train
