#pragma once

// Minimal post-LN transformer encoder classifier with a token-level
// confidence head sitting directly on the embedding layer output.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdt/grad_check.hpp"
#include "tdt/tensor.hpp"

namespace tdt::model {

using ad::Tensor;

struct SpecialTokens {
  int pad = 0;
  int cls = 1;
  int sep = 2;
  int mask = 3;
};

struct ModelConfig {
  std::size_t vocab_size = 2000;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_len = 32;
  std::size_t n_classes = 4;
  SpecialTokens special;
  // 1 for the sigmoid (soft) head, 2 for the Gumbel (hard) head.
  std::size_t confidence_outputs = 1;
  double init_std = 0.02;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor ln2_gain, ln2_bias;
};

struct ModelParams {
  ModelConfig config;
  Tensor token_emb;  // [vocab, d]
  Tensor pos_emb;    // [max_len, d]
  std::vector<LayerParams> layers;
  Tensor head_w1, head_b1, head_w2, head_b2;  // tanh MLP over h_cls
  Tensor conf_w, conf_b;                      // [d, outputs], [outputs]
  // False until an objective with a confidence term has trained the head.
  bool confidence_trained = false;

  // Seeded N(0, init_std^2) weights, zero biases, unit layer-norm gains.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  // Stable order; names are used by checkpoints and diagnostics.
  std::vector<ad::NamedTensor> named_parameters() const;
  ModelParams clone() const;
  void zero_grad();
  std::size_t parameter_count() const;
};

// A padded batch. Rows are [CLS] tokens... [SEP] [PAD]...
struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;                 // batch * seq
  std::vector<double> attention_mask;   // 1 real token, 0 pad
  std::vector<double> ordinary_mask;    // 1 real non-special token
  std::vector<double> special_mask;     // 1 for CLS / SEP
  std::vector<int> labels;              // may be empty for unlabeled input

  void validate(const ModelConfig& cfg) const;
  std::size_t ordinary_count(std::size_t row) const;
  Tensor ordinary_tensor() const;
  Tensor special_tensor() const;
};

// Wraps each ordinary-token sequence as [CLS] x... [SEP] and pads to the
// longest row. Throws IndexError if a row does not fit in max_len.
EncodedBatch encode(std::span<const std::vector<int>> sequences, std::span<const int> labels, const ModelConfig& cfg);

// token_emb[id] + pos_emb[position]: [B, T, d].
Tensor embed(const EncodedBatch& batch, const ModelParams& params);

// Raw head output on the embedding layer: [B, T, outputs].
Tensor confidence_logits(const Tensor& e, const ModelParams& params);

// Soft-mode scores c_i = sigmoid(W e_i + b) on ordinary tokens, 1 on CLS/SEP
// and 0 on PAD. Forced entries carry no gradient. [B, T].
Tensor confidence_scores(const Tensor& e, const ModelParams& params, const EncodedBatch& batch);

struct ForwardResult {
  Tensor hidden;  // [B, T, d]
  Tensor cls;     // [B, d]
  Tensor probs;   // [B, n_classes]
};

// Runs the encoder on any embedding-shaped input (E, E+, or E-).
ForwardResult forward(const Tensor& e_like, const EncodedBatch& batch, const ModelParams& params);

// Row-wise argmax; ties go to the smaller class index.
std::vector<int> argmax_rows(const Tensor& probs);
std::vector<int> predict(const EncodedBatch& batch, const ModelParams& params);

// Single JSON document: config, metadata, and every parameter with its shape.
void save_checkpoint(const std::string& path, const ModelParams& params, const nlohmann::json& meta = nlohmann::json::object());
struct LoadedCheckpoint {
  ModelParams params;
  nlohmann::json meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// SHA-256 hex digest over every parameter's raw bytes, in named order.
std::string parameter_digest(const ModelParams& params);

}  // namespace tdt::model
