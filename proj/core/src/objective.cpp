#include "tdt/objective.hpp"

#include <cmath>

#include "tdt/errors.hpp"
#include "tdt/json_util.hpp"
#include "tdt/ops.hpp"

namespace tdt::objective {

using nlohmann::json;

std::string to_string(PerturbationMode m) {
  switch (m) {
    case PerturbationMode::zero: return "zero";
    case PerturbationMode::gaussian: return "gaussian";
    case PerturbationMode::embedding_mean: return "embedding_mean";
    case PerturbationMode::sequence_mean: return "sequence_mean";
  }
  return "?";
}

std::string to_string(VariantMode m) { return m == VariantMode::hard ? "hard" : "soft"; }

PerturbationMode parse_perturbation(const std::string& s) {
  if (s == "zero") return PerturbationMode::zero;
  if (s == "gaussian") return PerturbationMode::gaussian;
  if (s == "embedding_mean") return PerturbationMode::embedding_mean;
  if (s == "sequence_mean") return PerturbationMode::sequence_mean;
  throw ConfigError("unknown perturbation mode \"" + s + "\" (zero|gaussian|embedding_mean|sequence_mean)");
}

VariantMode parse_variant(const std::string& s) {
  if (s == "soft") return VariantMode::soft;
  if (s == "hard") return VariantMode::hard;
  throw ConfigError("unknown variant mode \"" + s + "\" (soft|hard)");
}

void TDTConfig::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string("tdt: ") + name + " must be a finite value >= 0");
  };
  nonneg(margin, "margin");
  nonneg(alpha, "alpha");
  nonneg(beta, "beta");
  nonneg(gamma, "gamma");
  nonneg(gaussian_sigma, "gaussian_sigma");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tdt: tau must be > 0");
}

std::string TDTConfig::run_label() const {
  if (is_vanilla()) return "vanilla";
  return variant == VariantMode::hard ? "tdt-hard" : "tdt";
}

json to_json(const TDTConfig& c) {
  return json{{"margin", c.margin},
              {"alpha", c.alpha},
              {"beta", c.beta},
              {"gamma", c.gamma},
              {"perturbation", to_string(c.perturbation)},
              {"variant", to_string(c.variant)},
              {"tau", c.tau},
              {"gaussian_sigma", c.gaussian_sigma},
              {"length_normalize", c.length_normalize},
              {"symmetric_kl", c.symmetric_kl}};
}

TDTConfig tdt_config_from_json(const json& j) {
  using json_util::read_opt;
  constexpr auto ctx = "tdt";
  json_util::reject_unknown_keys(j,
                                 {"margin", "alpha", "beta", "gamma", "perturbation", "variant", "tau",
                                  "gaussian_sigma", "length_normalize", "symmetric_kl"},
                                 ctx);
  TDTConfig c;
  read_opt(j, "margin", c.margin, ctx);
  read_opt(j, "alpha", c.alpha, ctx);
  read_opt(j, "beta", c.beta, ctx);
  read_opt(j, "gamma", c.gamma, ctx);
  std::string mode = to_string(c.perturbation);
  read_opt(j, "perturbation", mode, ctx);
  c.perturbation = parse_perturbation(mode);
  std::string variant = to_string(c.variant);
  read_opt(j, "variant", variant, ctx);
  c.variant = parse_variant(variant);
  read_opt(j, "tau", c.tau, ctx);
  read_opt(j, "gaussian_sigma", c.gaussian_sigma, ctx);
  read_opt(j, "length_normalize", c.length_normalize, ctx);
  read_opt(j, "symmetric_kl", c.symmetric_kl, ctx);
  c.validate();
  return c;
}

Tensor perturbation_anchor(const Tensor& token_table, PerturbationMode mode, Rng& rng, double gaussian_sigma) {
  const std::size_t d = token_table.dim(1);
  switch (mode) {
    case PerturbationMode::zero:
      return Tensor::zeros({d});
    case PerturbationMode::gaussian: {
      double sigma = gaussian_sigma;
      if (sigma <= 0.0) {
        auto v = token_table.data();
        double mu = 0.0;
        for (double x : v) mu += x;
        mu /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mu) * (x - mu);
        sigma = std::sqrt(var / static_cast<double>(v.size()));
      }
      std::normal_distribution<double> dist(0.0, sigma);
      std::vector<double> draw(d);
      for (auto& x : draw) x = dist(rng);
      return Tensor::from({d}, std::move(draw));
    }
    case PerturbationMode::embedding_mean:
      return ad::mean(token_table, 0);
    case PerturbationMode::sequence_mean:
      throw ConfigError("sequence_mean anchors are per example; use sequence_mean_anchor");
  }
  throw ConfigError("unknown perturbation mode");
}

Tensor sequence_mean_anchor(const Tensor& e, const model::EncodedBatch& batch) {
  const std::size_t d = e.dim(2);
  Tensor weights = batch.ordinary_tensor();
  std::vector<double> inv(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    auto n = batch.ordinary_count(b);
    inv[b] = n ? 1.0 / static_cast<double>(n) : 0.0;
  }
  Tensor summed = ad::sum(ad::mul(e, ad::expand_last(weights, d)), 1);  // [B, d]
  return ad::mul(summed, ad::expand_last(Tensor::from({batch.batch}, inv), d));
}

Tensor anchor_rows(const Tensor& anchor, std::size_t batch, std::size_t seq) {
  if (anchor.rank() == 1) return ad::broadcast_rows(anchor, {batch, seq});
  if (anchor.rank() == 2 && anchor.dim(0) == batch) {
    std::vector<int> rows(batch * seq);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < seq; ++t) rows[b * seq + t] = static_cast<int>(b);
    return ad::embedding(anchor, rows, {batch, seq});
  }
  throw DimensionError("anchor must be [d] or [B, d], got " + ad::shape_str(anchor.shape()));
}

Tensor positive_variant(const Tensor& e, const Tensor& c, const Tensor& anchor) {
  if (anchor.shape() != e.shape()) throw DimensionError("positive_variant: anchor rows must match E");
  Tensor ce = ad::expand_last(c, e.dim(2));
  return ad::add(ad::mul(ce, e), ad::mul(ad::one_minus(ce), anchor));
}

Tensor negative_variant(const Tensor& e, const Tensor& c, const model::EncodedBatch& batch) {
  Tensor drop = ad::mul(c, ad::one_minus(batch.special_tensor()));
  return ad::mul(ad::expand_last(ad::one_minus(drop), e.dim(2)), e);
}

Tensor classification_loss(const Tensor& probs, std::span<const int> labels) {
  return ad::cross_entropy_from_probs(probs, labels);
}

Tensor confidence_penalty(const Tensor& c, const model::EncodedBatch& batch, bool length_normalize) {
  Tensor norms = ad::row_l2_norm(ad::mul(c, batch.ordinary_tensor()));
  if (length_normalize) {
    std::vector<double> inv(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) {
      auto n = batch.ordinary_count(b);
      inv[b] = n ? 1.0 / std::sqrt(static_cast<double>(n)) : 0.0;
    }
    norms = ad::mul(norms, Tensor::from({batch.batch}, std::move(inv)));
  }
  return ad::mean_all(norms);
}

Tensor confidence_loss(const Tensor& probs_pos, std::span<const int> labels, const Tensor& c,
                       const model::EncodedBatch& batch, double gamma, bool length_normalize) {
  return ad::add(classification_loss(probs_pos, labels), ad::scale(confidence_penalty(c, batch, length_normalize), gamma));
}

namespace {

Tensor distance(const Tensor& a, const Tensor& b, bool symmetric) {
  if (!symmetric) return ad::kl_divergence(a, b);
  return ad::scale(ad::add(ad::kl_divergence(a, b), ad::kl_divergence(b, a)), 0.5);
}

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return t.numel() ? s / static_cast<double>(t.numel()) : 0.0;
}

}  // namespace

TripletTerms triplet_terms(const Tensor& p, const Tensor& p_pos, const Tensor& p_neg, double margin, bool symmetric_kl) {
  TripletTerms t;
  t.d_pos_orig = distance(p_pos, p, symmetric_kl);
  t.d_neg_orig = distance(p_neg, p, symmetric_kl);
  t.d_neg_pos = distance(p_neg, p_pos, symmetric_kl);
  Tensor arg = ad::add_scalar(ad::sub(ad::sub(t.d_pos_orig, t.d_neg_orig), t.d_neg_pos), margin);
  t.hinge_args.assign(arg.data().begin(), arg.data().end());
  t.loss = ad::mean_all(ad::hinge(arg));
  return t;
}

Tensor triplet_loss(const Tensor& p, const Tensor& p_pos, const Tensor& p_neg, double margin, bool symmetric_kl) {
  return triplet_terms(p, p_pos, p_neg, margin, symmetric_kl).loss;
}

Tensor tempered_softmax(const Tensor& logits, std::span<const double> noise, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  Tensor z = logits;
  if (!noise.empty()) z = ad::add(z, Tensor::from(logits.shape(), std::vector<double>(noise.begin(), noise.end())));
  return ad::softmax(ad::scale(z, 1.0 / tau), logits.rank() - 1);
}

std::vector<double> gumbel_noise(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> g(n);
  for (auto& x : g) {
    double s = u(rng);
    while (s <= 0.0) s = u(rng);
    x = -std::log(-std::log(s));
  }
  return g;
}

GumbelConfidence gumbel_confidence(const Tensor& e, const model::ModelParams& params, const model::EncodedBatch& batch,
                                   const GumbelOptions& opts, Rng& rng) {
  if (params.config.confidence_outputs != 2) throw ConfigError("hard variant needs the two-logit confidence head");
  if (!(opts.tau > 0.0)) throw ConfigError("tau must be > 0");
  Tensor logits = confidence_logits(e, params);  // [B, T, 2]
  std::vector<double> noise;
  if (opts.add_noise) noise = gumbel_noise(logits.numel(), rng);
  Tensor probs = tempered_softmax(logits, noise, opts.tau);
  Tensor keep = ad::select_index(probs, 2, 1);  // [B, T]
  Tensor c_ord;
  if (opts.relaxed) {
    c_ord = keep;
  } else {
    auto kp = keep.data();
    std::vector<double> hard(kp.size());
    // keep_prob >= 0.5 <=> category 1 is the argmax (ties keep)
    for (std::size_t i = 0; i < kp.size(); ++i) hard[i] = kp[i] >= 0.5 ? 1.0 : 0.0;
    c_ord = ad::straight_through(Tensor::from(keep.shape(), std::move(hard)), keep);
  }
  GumbelConfidence out;
  out.c = ad::add(ad::mul(c_ord, batch.ordinary_tensor()), batch.special_tensor());
  out.keep_prob = keep;
  return out;
}

Tensor mask_embedding_rows(const model::EncodedBatch& batch, const model::ModelParams& params) {
  model::EncodedBatch masked = batch;
  for (std::size_t i = 0; i < masked.ids.size(); ++i)
    if (masked.ordinary_mask[i] != 0.0) masked.ids[i] = params.config.special.mask;
  return model::embed(masked, params);
}

LossBundle total_loss(const model::EncodedBatch& batch, const model::ModelParams& params, const TDTConfig& cfg, Rng& rng,
                      const LossOptions& opts) {
  cfg.validate();
  if (params.config.confidence_outputs != cfg.confidence_outputs())
    throw ConfigError("confidence head arity does not match variant mode " + to_string(cfg.variant));
  LossBundle out;
  Tensor e = model::embed(batch, params);
  Tensor p = model::forward(e, batch, params).probs;
  out.l_cla = classification_loss(p, batch.labels);

  Tensor c, anchor;
  if (cfg.variant == VariantMode::soft) {
    c = model::confidence_scores(e, params, batch);
    anchor = cfg.perturbation == PerturbationMode::sequence_mean
                 ? anchor_rows(sequence_mean_anchor(e, batch), batch.batch, batch.seq)
                 : anchor_rows(perturbation_anchor(params.token_emb, cfg.perturbation, rng, cfg.gaussian_sigma),
                               batch.batch, batch.seq);
  } else {
    GumbelOptions g{cfg.tau, opts.gumbel_noise, opts.relaxed_hard};
    c = gumbel_confidence(e, params, batch, g, rng).c;
    anchor = mask_embedding_rows(batch, params);
  }
  Tensor e_pos = positive_variant(e, c, anchor);
  Tensor e_neg = negative_variant(e, c, batch);
  Tensor p_pos = model::forward(e_pos, batch, params).probs;
  Tensor p_neg = model::forward(e_neg, batch, params).probs;

  Tensor penalty = confidence_penalty(c, batch, cfg.length_normalize);
  out.l_c = ad::add(classification_loss(p_pos, batch.labels), ad::scale(penalty, cfg.gamma));
  TripletTerms tri = triplet_terms(p, p_pos, p_neg, cfg.margin, cfg.symmetric_kl);
  out.l_r = tri.loss;
  out.total = ad::add(out.l_cla, ad::add(ad::scale(out.l_c, cfg.alpha), ad::scale(out.l_r, cfg.beta)));

  out.kl_pos_orig = mean_of(tri.d_pos_orig);
  out.kl_neg_orig = mean_of(tri.d_neg_orig);
  out.kl_neg_pos = mean_of(tri.d_neg_pos);
  out.confidence_norm = penalty.item();
  out.hinge_args = std::move(tri.hinge_args);
  return out;
}

Tensor vanilla_loss(const model::EncodedBatch& batch, const model::ModelParams& params) {
  Tensor e = model::embed(batch, params);
  return classification_loss(model::forward(e, batch, params).probs, batch.labels);
}

}  // namespace tdt::objective
