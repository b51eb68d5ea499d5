#include "tdt/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "tdt/errors.hpp"
#include "tdt/json_util.hpp"
#include "tdt/ops.hpp"

namespace tdt::model {

using nlohmann::json;

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_classes < 2)
    throw ConfigError("model: vocab_size, d_model, n_heads must be positive and n_classes >= 2");
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (n_layers > 0 && d_ff == 0) throw ConfigError("model: d_ff must be positive");
  if (max_len < 2) throw ConfigError("model: max_len must leave room for CLS and SEP");
  if (confidence_outputs != 1 && confidence_outputs != 2)
    throw ConfigError("model: confidence_outputs must be 1 (soft) or 2 (hard)");
  if (!(init_std > 0.0)) throw ConfigError("model: init_std must be positive");
  std::set<int> ids{special.pad, special.cls, special.sep, special.mask};
  if (ids.size() != 4) throw ConfigError("model: special token ids must be pairwise distinct");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
      throw ConfigError("model: special token id " + std::to_string(id) + " outside vocabulary");
}

json to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},
              {"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"max_len", c.max_len},
              {"n_classes", c.n_classes},
              {"pad_id", c.special.pad},
              {"cls_id", c.special.cls},
              {"sep_id", c.special.sep},
              {"mask_id", c.special.mask},
              {"confidence_outputs", c.confidence_outputs},
              {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const json& j) {
  using json_util::read_opt;
  constexpr auto ctx = "model";
  json_util::reject_unknown_keys(j,
                                 {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len", "n_classes",
                                  "pad_id", "cls_id", "sep_id", "mask_id", "confidence_outputs", "init_std"},
                                 ctx);
  ModelConfig c;
  read_opt(j, "vocab_size", c.vocab_size, ctx);
  read_opt(j, "d_model", c.d_model, ctx);
  read_opt(j, "n_layers", c.n_layers, ctx);
  read_opt(j, "n_heads", c.n_heads, ctx);
  read_opt(j, "d_ff", c.d_ff, ctx);
  read_opt(j, "max_len", c.max_len, ctx);
  read_opt(j, "n_classes", c.n_classes, ctx);
  read_opt(j, "pad_id", c.special.pad, ctx);
  read_opt(j, "cls_id", c.special.cls, ctx);
  read_opt(j, "sep_id", c.special.sep, ctx);
  read_opt(j, "mask_id", c.special.mask, ctx);
  read_opt(j, "confidence_outputs", c.confidence_outputs, ctx);
  read_opt(j, "init_std", c.init_std, ctx);
  c.validate();
  return c;
}

namespace {

Tensor normal_tensor(ad::Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = ad::matmul(x, w);
  ad::Shape leading(y.shape().begin(), y.shape().end() - 1);
  return ad::add(y, ad::broadcast_rows(b, leading));
}

void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError("non-finite activations in " + where);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double s = cfg.init_std;
  const std::size_t d = cfg.d_model;
  ModelParams p;
  p.config = cfg;
  p.token_emb = normal_tensor({cfg.vocab_size, d}, s, rng);
  p.pos_emb = normal_tensor({cfg.max_len, d}, s, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.wq = normal_tensor({d, d}, s, rng);
    lp.bq = Tensor::zeros({d}, true);
    lp.wk = normal_tensor({d, d}, s, rng);
    lp.bk = Tensor::zeros({d}, true);
    lp.wv = normal_tensor({d, d}, s, rng);
    lp.bv = Tensor::zeros({d}, true);
    lp.wo = normal_tensor({d, d}, s, rng);
    lp.bo = Tensor::zeros({d}, true);
    lp.ln1_gain = Tensor::full({d}, 1.0, true);
    lp.ln1_bias = Tensor::zeros({d}, true);
    lp.ff_w1 = normal_tensor({d, cfg.d_ff}, s, rng);
    lp.ff_b1 = Tensor::zeros({cfg.d_ff}, true);
    lp.ff_w2 = normal_tensor({cfg.d_ff, d}, s, rng);
    lp.ff_b2 = Tensor::zeros({d}, true);
    lp.ln2_gain = Tensor::full({d}, 1.0, true);
    lp.ln2_bias = Tensor::zeros({d}, true);
    p.layers.push_back(std::move(lp));
  }
  p.head_w1 = normal_tensor({d, d}, s, rng);
  p.head_b1 = Tensor::zeros({d}, true);
  p.head_w2 = normal_tensor({d, cfg.n_classes}, s, rng);
  p.head_b2 = Tensor::zeros({cfg.n_classes}, true);
  p.conf_w = normal_tensor({d, cfg.confidence_outputs}, s, rng);
  p.conf_b = Tensor::zeros({cfg.confidence_outputs}, true);
  return p;
}

std::vector<ad::NamedTensor> ModelParams::named_parameters() const {
  std::vector<ad::NamedTensor> out{{"token_emb", token_emb}, {"pos_emb", pos_emb}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lp = layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (auto& [n, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"wq", &lp.wq},         {"bq", &lp.bq},         {"wk", &lp.wk},       {"bk", &lp.bk},
             {"wv", &lp.wv},         {"bv", &lp.bv},         {"wo", &lp.wo},       {"bo", &lp.bo},
             {"ln1_gain", &lp.ln1_gain}, {"ln1_bias", &lp.ln1_bias}, {"ff_w1", &lp.ff_w1}, {"ff_b1", &lp.ff_b1},
             {"ff_w2", &lp.ff_w2},   {"ff_b2", &lp.ff_b2},   {"ln2_gain", &lp.ln2_gain}, {"ln2_bias", &lp.ln2_bias}})
      out.push_back({pre + n, *t});
  }
  out.push_back({"head_w1", head_w1});
  out.push_back({"head_b1", head_b1});
  out.push_back({"head_w2", head_w2});
  out.push_back({"head_b2", head_b2});
  out.push_back({"conf_w", conf_w});
  out.push_back({"conf_b", conf_b});
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams p = *this;
  auto copy = [](Tensor& t) { t = t.clone(true); };
  copy(p.token_emb);
  copy(p.pos_emb);
  for (auto& lp : p.layers)
    for (Tensor* t : {&lp.wq, &lp.bq, &lp.wk, &lp.bk, &lp.wv, &lp.bv, &lp.wo, &lp.bo, &lp.ln1_gain, &lp.ln1_bias,
                      &lp.ff_w1, &lp.ff_b1, &lp.ff_w2, &lp.ff_b2, &lp.ln2_gain, &lp.ln2_bias})
      copy(*t);
  for (Tensor* t : {&p.head_w1, &p.head_b1, &p.head_w2, &p.head_b2, &p.conf_w, &p.conf_b}) copy(*t);
  return p;
}

void ModelParams::zero_grad() {
  for (auto& np : named_parameters()) np.tensor.zero_grad();
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& np : named_parameters()) n += np.tensor.numel();
  return n;
}

void EncodedBatch::validate(const ModelConfig& cfg) const {
  if (ids.size() != batch * seq || attention_mask.size() != batch * seq) throw DimensionError("batch buffers");
  if (seq > cfg.max_len) throw IndexError("sequence length " + std::to_string(seq) + " exceeds max_len");
  if (!labels.empty() && labels.size() != batch) throw DimensionError("label count does not match batch");
  for (std::size_t b = 0; b < batch; ++b) {
    if (ids[b * seq] != cfg.special.cls) throw DimensionError("row " + std::to_string(b) + " does not start with CLS");
    bool in_pad = false;
    for (std::size_t t = 0; t < seq; ++t) {
      bool pad = attention_mask[b * seq + t] == 0.0;
      if (in_pad && !pad) throw DimensionError("row " + std::to_string(b) + " has padding before a real token");
      in_pad = in_pad || pad;
    }
  }
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.n_classes) throw IndexError("label " + std::to_string(y) + " out of range");
}

std::size_t EncodedBatch::ordinary_count(std::size_t row) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq; ++t) n += ordinary_mask[row * seq + t] != 0.0;
  return n;
}

Tensor EncodedBatch::ordinary_tensor() const { return Tensor::from({batch, seq}, ordinary_mask); }

Tensor EncodedBatch::special_tensor() const { return Tensor::from({batch, seq}, special_mask); }

EncodedBatch encode(std::span<const std::vector<int>> sequences, std::span<const int> labels, const ModelConfig& cfg) {
  if (!labels.empty() && labels.size() != sequences.size()) throw DimensionError("label count does not match sequences");
  EncodedBatch out;
  out.batch = sequences.size();
  std::size_t longest = 0;
  for (const auto& s : sequences) longest = std::max(longest, s.size());
  out.seq = longest + 2;
  if (out.seq > cfg.max_len)
    throw IndexError("sequence of " + std::to_string(longest) + " tokens does not fit max_len " + std::to_string(cfg.max_len));
  const std::size_t n = out.batch * out.seq;
  out.ids.assign(n, cfg.special.pad);
  out.attention_mask.assign(n, 0.0);
  out.ordinary_mask.assign(n, 0.0);
  out.special_mask.assign(n, 0.0);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const auto& s = sequences[b];
    const std::size_t base = b * out.seq;
    out.ids[base] = cfg.special.cls;
    out.attention_mask[base] = 1.0;
    out.special_mask[base] = 1.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      out.ids[base + 1 + i] = s[i];
      out.attention_mask[base + 1 + i] = 1.0;
      out.ordinary_mask[base + 1 + i] = 1.0;
    }
    out.ids[base + 1 + s.size()] = cfg.special.sep;
    out.attention_mask[base + 1 + s.size()] = 1.0;
    out.special_mask[base + 1 + s.size()] = 1.0;
  }
  out.labels.assign(labels.begin(), labels.end());
  return out;
}

Tensor embed(const EncodedBatch& batch, const ModelParams& params) {
  if (batch.seq > params.config.max_len) throw IndexError("sequence longer than max_len");
  Tensor tok = ad::embedding(params.token_emb, batch.ids, {batch.batch, batch.seq});
  std::vector<int> positions(batch.batch * batch.seq);
  for (std::size_t b = 0; b < batch.batch; ++b)
    for (std::size_t t = 0; t < batch.seq; ++t) positions[b * batch.seq + t] = static_cast<int>(t);
  Tensor pos = ad::embedding(params.pos_emb, positions, {batch.batch, batch.seq});
  return ad::add(tok, pos);
}

Tensor confidence_logits(const Tensor& e, const ModelParams& params) { return linear(e, params.conf_w, params.conf_b); }

Tensor confidence_scores(const Tensor& e, const ModelParams& params, const EncodedBatch& batch) {
  if (params.config.confidence_outputs != 1) throw ConfigError("confidence_scores needs the single-output (soft) head");
  Tensor raw = ad::sigmoid(ad::reshape(confidence_logits(e, params), {batch.batch, batch.seq}));
  return ad::add(ad::mul(raw, batch.ordinary_tensor()), batch.special_tensor());
}

ForwardResult forward(const Tensor& e_like, const EncodedBatch& batch, const ModelParams& params) {
  const auto& cfg = params.config;
  if (e_like.shape() != ad::Shape{batch.batch, batch.seq, cfg.d_model})
    throw DimensionError("forward: input " + ad::shape_str(e_like.shape()) + " does not match batch");
  Tensor x = e_like;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& lp = params.layers[l];
    Tensor q = linear(x, lp.wq, lp.bq);
    Tensor k = linear(x, lp.wk, lp.bk);
    Tensor v = linear(x, lp.wv, lp.bv);
    Tensor att = ad::multi_head_attention(q, k, v, batch.attention_mask, cfg.n_heads);
    x = ad::layer_norm(ad::add(x, linear(att, lp.wo, lp.bo)), lp.ln1_gain, lp.ln1_bias);
    Tensor ff = linear(ad::gelu(linear(x, lp.ff_w1, lp.ff_b1)), lp.ff_w2, lp.ff_b2);
    x = ad::layer_norm(ad::add(x, ff), lp.ln2_gain, lp.ln2_bias);
    check_finite(x, "encoder layer " + std::to_string(l));
  }
  ForwardResult r;
  r.hidden = x;
  r.cls = ad::select_index(x, 1, 0);
  Tensor logits = linear(ad::tanh(linear(r.cls, params.head_w1, params.head_b1)), params.head_w2, params.head_b2);
  check_finite(logits, "classifier head");
  r.probs = ad::softmax(logits, 1);
  return r;
}

std::vector<int> argmax_rows(const Tensor& probs) {
  if (probs.rank() != 2) throw DimensionError("argmax_rows expects [B, C]");
  const std::size_t b = probs.dim(0), c = probs.dim(1);
  std::vector<int> out(b);
  auto p = probs.data();
  for (std::size_t r = 0; r < b; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (p[r * c + j] > p[r * c + best]) best = j;
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const EncodedBatch& batch, const ModelParams& params) {
  return argmax_rows(forward(embed(batch, params), batch, params).probs);
}

}  // namespace tdt::model
