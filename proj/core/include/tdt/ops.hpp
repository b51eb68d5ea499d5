#pragma once

// Differentiable primitives over tdt::ad::Tensor. Every op has a hand-written
// backward; elementwise binary ops require identical shapes (broadcasting is
// explicit through broadcast_rows / expand_last).

#include <cstddef>
#include <span>

#include "tdt/tensor.hpp"

namespace tdt::ad {

// Floor applied before taking logs of probabilities.
inline constexpr double kProbFloor = 1e-12;

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
// 1 - x
Tensor one_minus(const Tensor& x);

Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
// Numerically stable two-branch logistic function.
Tensor sigmoid(const Tensor& x);
// tanh approximation of GELU.
Tensor gelu(const Tensor& x);
// max(x, 0). Subgradient at exactly 0 is 0.
Tensor hinge(const Tensor& x);

Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// [n] -> [leading..., n]
Tensor broadcast_rows(const Tensor& row, const Shape& leading);
// [...] -> [..., n], each scalar repeated along a new trailing axis.
Tensor expand_last(const Tensor& x, std::size_t n);
// Drops `axis`, keeping slice `index`.
Tensor select_index(const Tensor& x, std::size_t axis, std::size_t index);

// [..., k] x [k, n] -> [..., n]
Tensor matmul(const Tensor& x, const Tensor& w);
// Rows of `table` ([V, d]) gathered by id into [leading..., d]; backward scatters.
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& leading);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
// Normalizes over the last axis, then applies per-feature gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Euclidean norm over every entry; zero vector has subgradient 0.
Tensor l2_norm(const Tensor& v);
// Euclidean norm over the last axis: [..., n] -> [...].
Tensor row_l2_norm(const Tensor& x);

// Mean over rows of -log max(P[row, label], floor). probs: [B, C].
Tensor cross_entropy_from_probs(const Tensor& probs, std::span<const int> labels, double floor = kProbFloor);
// KL(p || q) over the last axis: [..., n] -> [...] (a 1-D input gives a
// scalar). 0 * log(0 / q) = 0; q and positive p are floored at `floor`.
Tensor kl_divergence(const Tensor& p, const Tensor& q, double floor = kProbFloor);

// Scaled dot-product attention with `n_heads` heads over [B, T, D] inputs.
// key_mask is [B * T] with 1 for real tokens. Masked keys receive no weight;
// masked query rows produce zeros.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const double> key_mask,
                            std::size_t n_heads);

// Forward value of `hard`, gradient routed to `soft` unchanged.
Tensor straight_through(const Tensor& hard, const Tensor& soft);

}  // namespace tdt::ad
