#pragma once

// Task-guided disentangled tuning objective: the classification loss, the
// confidence (deletion-game) loss on the distilled sample, and the triplet
// KL ranking loss over original / positive / negative predictions.

#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdt/encoder.hpp"

namespace tdt::objective {

using ad::Tensor;
using Rng = std::mt19937_64;

enum class PerturbationMode { zero, gaussian, embedding_mean, sequence_mean };
enum class VariantMode { soft, hard };

std::string to_string(PerturbationMode m);
std::string to_string(VariantMode m);
// Throw ConfigError on unknown names.
PerturbationMode parse_perturbation(const std::string& s);
VariantMode parse_variant(const std::string& s);

struct TDTConfig {
  double margin = 2.0;  // m
  double alpha = 2.0;   // weight of the confidence loss
  double beta = 1.0;    // weight of the ranking loss
  double gamma = 0.1;   // confidence-norm penalty
  PerturbationMode perturbation = PerturbationMode::embedding_mean;
  VariantMode variant = VariantMode::soft;
  double tau = 1.0;
  // Gaussian anchor scale; 0 uses the empirical std of the embedding table.
  double gaussian_sigma = 0.0;
  // Divide each example's confidence norm by sqrt(ordinary tokens).
  bool length_normalize = false;
  // d(A, B) = (KL(A||B) + KL(B||A)) / 2 instead of KL(A||B).
  bool symmetric_kl = false;

  void validate() const;
  bool is_vanilla() const { return alpha == 0.0 && beta == 0.0; }
  std::size_t confidence_outputs() const { return variant == VariantMode::hard ? 2 : 1; }
  // "vanilla", "tdt" or "tdt-hard".
  std::string run_label() const;
};

nlohmann::json to_json(const TDTConfig& c);
TDTConfig tdt_config_from_json(const nlohmann::json& j);

struct LossBundle {
  Tensor l_cla, l_c, l_r, total;
  // Batch means of d(P+,P), d(P-,P), d(P-,P+) and of the per-example ||C||.
  double kl_pos_orig = 0.0;
  double kl_neg_orig = 0.0;
  double kl_neg_pos = 0.0;
  double confidence_norm = 0.0;
  // Per-example triplet hinge arguments (for kink-aware gradient checks).
  std::vector<double> hinge_args;
};

// Perturbation anchor mu0 of shape [d]: zeros, a seeded N(0, sigma^2) draw, or
// the differentiable mean over all rows of the token embedding table.
// sequence_mean is per example and is produced by sequence_mean_anchor.
Tensor perturbation_anchor(const Tensor& token_table, PerturbationMode mode, Rng& rng, double gaussian_sigma = 0.0);
// Per-example mean of E over ordinary positions: [B, d].
Tensor sequence_mean_anchor(const Tensor& e, const model::EncodedBatch& batch);
// Broadcasts a [d] or [B, d] anchor to [B, T, d].
Tensor anchor_rows(const Tensor& anchor, std::size_t batch, std::size_t seq);

// e+_i = c_i e_i + (1 - c_i) mu0_i. anchor: [B, T, d].
Tensor positive_variant(const Tensor& e, const Tensor& c, const Tensor& anchor);
// e-_i = (1 - c_i) e_i on ordinary positions; CLS/SEP rows unchanged.
Tensor negative_variant(const Tensor& e, const Tensor& c, const model::EncodedBatch& batch);

Tensor classification_loss(const Tensor& probs, std::span<const int> labels);
// CE on the distilled prediction plus gamma times the batch mean of each
// example's confidence norm over ordinary tokens.
Tensor confidence_penalty(const Tensor& c, const model::EncodedBatch& batch, bool length_normalize);
Tensor confidence_loss(const Tensor& probs_pos, std::span<const int> labels, const Tensor& c,
                       const model::EncodedBatch& batch, double gamma, bool length_normalize = false);

struct TripletTerms {
  Tensor loss;
  Tensor d_pos_orig, d_neg_orig, d_neg_pos;  // [B]
  std::vector<double> hinge_args;
};
// Batch mean of max(m + d(P+,P) - d(P-,P) - d(P-,P+), 0).
TripletTerms triplet_terms(const Tensor& p, const Tensor& p_pos, const Tensor& p_neg, double margin,
                           bool symmetric_kl = false);
Tensor triplet_loss(const Tensor& p, const Tensor& p_pos, const Tensor& p_neg, double margin, bool symmetric_kl = false);

// softmax((z + g) / tau) over the last axis; `noise` may be empty (g = 0).
Tensor tempered_softmax(const Tensor& logits, std::span<const double> noise, double tau);
// Standard Gumbel(0, 1) samples.
std::vector<double> gumbel_noise(std::size_t n, Rng& rng);

struct GumbelOptions {
  double tau = 1.0;
  bool add_noise = true;
  // Use the tempered probabilities as c (no argmax). Used to finite-difference
  // check the relaxation the straight-through estimator differentiates.
  bool relaxed = false;
};

struct GumbelConfidence {
  Tensor c;          // [B, T]: hard {0,1} forward on ordinary tokens, 1 on CLS/SEP, 0 on PAD
  Tensor keep_prob;  // [B, T]: tempered probability of category 1 (keep)
};
// c_i = argmax of the tempered softmax over the two head logits; ties keep.
// Backward is straight-through via keep_prob.
GumbelConfidence gumbel_confidence(const Tensor& e, const model::ModelParams& params, const model::EncodedBatch& batch,
                                   const GumbelOptions& opts, Rng& rng);
// Embedding-layer output of the MASK token at every position: [B, T, d].
Tensor mask_embedding_rows(const model::EncodedBatch& batch, const model::ModelParams& params);

struct LossOptions {
  // Hard mode only: see GumbelOptions::relaxed.
  bool relaxed_hard = false;
  bool gumbel_noise = true;
};

LossBundle total_loss(const model::EncodedBatch& batch, const model::ModelParams& params, const TDTConfig& cfg, Rng& rng,
                      const LossOptions& opts = {});

// Plain fine-tuning objective: L_cla only.
Tensor vanilla_loss(const model::EncodedBatch& batch, const model::ModelParams& params);

}  // namespace tdt::objective
