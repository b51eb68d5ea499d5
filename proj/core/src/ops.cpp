#include "tdt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "tdt/errors.hpp"

namespace tdt::ad {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Splits `shape` around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Elementwise unary op; `deriv(x, y)` gives dy/dx.
template <class F, class D>
Tensor unary(const Tensor& x, F f, D deriv) {
  auto xs = x.data();
  Buffer out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, deriv](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(xn->value[i], self.value[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto as = a.data(), bs = b.data();
  Buffer out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      auto g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto as = a.data(), bs = b.data();
  Buffer out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto as = a.data(), bs = b.data();
  Buffer out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor one_minus(const Tensor& x) {
  return unary(x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor hinge(const Tensor& x) { return relu(x); }

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  const double c = kGeluC, a = kGeluA;
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Eigen::ArrayXd> v(x.data().data(), n);
  // tanh(u) = 1 - 2 / (exp(2u) + 1), evaluated with a vectorized exp
  Eigen::ArrayXd t = 1.0 - 2.0 / ((2.0 * c * (v + a * v.cube())).exp() + 1.0);
  Buffer out(static_cast<std::size_t>(n));
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = 0.5 * v * (1.0 + t);
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, t = std::move(t), n, c, a](Node& self) {
    if (!xn->requires_grad) return;
    Eigen::Map<const Eigen::ArrayXd> v(xn->value.data(), n), gy(self.grad.data(), n);
    Eigen::Map<Eigen::ArrayXd>(xn->ensure_grad().data(), n) +=
        gy * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t.square()) * c * (1.0 + 3.0 * a * v.square()));
  });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto xs = x.data();
  Buffer out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.extent; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xs[(o * sp.extent + j) * sp.inner + i];
  auto xn = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [xn, sp](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.extent; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.extent + j) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  auto n = x.dim(axis);
  if (n == 0) throw DimensionError("mean over an empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return make_result({}, {s}, {x}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Buffer out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return make_result(std::move(shape), std::move(out), {x}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    auto s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != out_shape[d]) throw DimensionError("concat shape mismatch");
    total += s[axis];
  }
  out_shape[axis] = total;
  auto sp = split_at(out_shape, axis);
  Buffer out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::size_t ext = p.dim(axis);
    auto ps = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(ps.begin() + static_cast<std::ptrdiff_t>(o * ext * sp.inner), ext * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + off) * sp.inner));
    off += ext;
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result(std::move(out_shape), std::move(out), parts, [nodes, offsets, sp, axis](Node& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      auto& n = *nodes[k];
      if (!n.requires_grad) continue;
      std::size_t ext = n.shape[axis];
      auto g = n.ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t t = 0; t < ext * sp.inner; ++t)
          g[o * ext * sp.inner + t] += self.grad[(o * sp.extent + offsets[k]) * sp.inner + t];
    }
  });
}

Tensor broadcast_rows(const Tensor& row, const Shape& leading) {
  if (row.rank() != 1) throw DimensionError("broadcast_rows expects a vector, got " + shape_str(row.shape()));
  std::size_t n = row.dim(0);
  std::size_t reps = numel_of(leading);
  Shape out_shape = leading;
  out_shape.push_back(n);
  Buffer out(reps * n);
  auto rs = row.data();
  for (std::size_t r = 0; r < reps; ++r) std::copy(rs.begin(), rs.end(), out.begin() + static_cast<std::ptrdiff_t>(r * n));
  auto rn = row.node();
  return make_result(std::move(out_shape), std::move(out), {row}, [rn, reps, n](Node& self) {
    if (!rn->requires_grad) return;
    auto g = rn->ensure_grad();
    for (std::size_t r = 0; r < reps; ++r)
      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
  });
}

Tensor expand_last(const Tensor& x, std::size_t n) {
  Shape out_shape = x.shape();
  out_shape.push_back(n);
  auto xs = x.data();
  Buffer out(xs.size() * n);
  for (std::size_t r = 0; r < xs.size(); ++r) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * n), n, xs[r]);
  auto xn = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [xn, n](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t r = 0; r < g.size(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += self.grad[r * n + j];
      g[r] += s;
    }
  });
}

Tensor select_index(const Tensor& x, std::size_t axis, std::size_t index) {
  auto sp = split_at(x.shape(), axis);
  if (index >= sp.extent) throw IndexError("select_index " + std::to_string(index) + " out of range");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto xs = x.data();
  Buffer out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] = xs[(o * sp.extent + index) * sp.inner + i];
  auto xn = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [xn, sp, index](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.extent + index) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Tensor matmul(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0))
    throw DimensionError("matmul " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const auto k = static_cast<Eigen::Index>(w.dim(0)), n = static_cast<Eigen::Index>(w.dim(1));
  const auto rows = static_cast<Eigen::Index>(x.numel() / std::max<std::size_t>(w.dim(0), 1));
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Buffer out(static_cast<std::size_t>(rows * n), 0.0);
  MutMap(out.data(), rows, n).noalias() = ConstMap(x.data().data(), rows, k) * ConstMap(w.data().data(), k, n);
  auto xn = x.node(), wn = w.node();
  return make_result(std::move(out_shape), std::move(out), {x, w}, [xn, wn, rows, k, n](Node& self) {
    ConstMap gy(self.grad.data(), rows, n);
    if (xn->requires_grad)
      MutMap(xn->ensure_grad().data(), rows, k).noalias() += gy * ConstMap(wn->value.data(), k, n).transpose();
    if (wn->requires_grad)
      MutMap(wn->ensure_grad().data(), k, n).noalias() += ConstMap(xn->value.data(), rows, k).transpose() * gy;
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& leading) {
  if (table.rank() != 2) throw DimensionError("embedding table must be 2-D");
  if (numel_of(leading) != ids.size()) throw DimensionError("embedding ids do not match leading shape");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " + std::to_string(vocab));
  Shape out_shape = leading;
  out_shape.push_back(d);
  auto ts = table.data();
  Buffer out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(ts.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[r]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result(std::move(out_shape), std::move(out), {table}, [tn, idv = std::move(idv), d](Node& self) {
    if (!tn->requires_grad) return;
    auto g = tn->ensure_grad();
    for (std::size_t r = 0; r < idv.size(); ++r) {
      double* gr = g.data() + static_cast<std::size_t>(idv[r]) * d;
      for (std::size_t j = 0; j < d; ++j) gr[j] += self.grad[r * d + j];
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  auto sp = split_at(x.shape(), axis);
  if (sp.extent == 0) throw DimensionError("softmax over an empty axis");
  auto xs = x.data();
  Buffer out(xs.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto idx = [&](std::size_t j) { return (o * sp.extent + j) * sp.inner + i; };
      double mx = xs[idx(0)];
      for (std::size_t j = 1; j < sp.extent; ++j) mx = std::max(mx, xs[idx(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.extent; ++j) z += (out[idx(j)] = std::exp(xs[idx(j)] - mx));
      for (std::size_t j = 0; j < sp.extent; ++j) out[idx(j)] /= z;
    }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, sp](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto idx = [&](std::size_t j) { return (o * sp.extent + j) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.extent; ++j) dot += self.grad[idx(j)] * self.value[idx(j)];
        for (std::size_t j = 0; j < sp.extent; ++j) g[idx(j)] += self.value[idx(j)] * (self.grad[idx(j)] - dot);
      }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  auto sp = split_at(x.shape(), axis);
  if (sp.extent == 0) throw DimensionError("log_softmax over an empty axis");
  auto xs = x.data();
  Buffer out(xs.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto idx = [&](std::size_t j) { return (o * sp.extent + j) * sp.inner + i; };
      double mx = xs[idx(0)];
      for (std::size_t j = 1; j < sp.extent; ++j) mx = std::max(mx, xs[idx(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.extent; ++j) z += std::exp(xs[idx(j)] - mx);
      double lse = mx + std::log(z);
      for (std::size_t j = 0; j < sp.extent; ++j) out[idx(j)] = xs[idx(j)] - lse;
    }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, sp](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto idx = [&](std::size_t j) { return (o * sp.extent + j) * sp.inner + i; };
        double gs = 0.0;
        for (std::size_t j = 0; j < sp.extent; ++j) gs += self.grad[idx(j)];
        for (std::size_t j = 0; j < sp.extent; ++j) g[idx(j)] += self.grad[idx(j)] - std::exp(self.value[idx(j)]) * gs;
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm on a scalar");
  const std::size_t n = x.shape().back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) throw DimensionError("layer_norm gain/bias shape");
  const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
  auto xs = x.data(), gs = gain.data(), bs = bias.data();
  Buffer out(xs.size());
  Buffer xhat(xs.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xs.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * rstd[r];
      out[r * n + j] = gs[j] * xhat[r * n + j] + bs[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), rows, n](Node& self) {
                       const double* dy = self.grad.data();
                       if (gn->requires_grad) {
                         auto g = gn->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) g[j] += dy[r * n + j] * xhat[r * n + j];
                       }
                       if (bn->requires_grad) {
                         auto g = bn->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) g[j] += dy[r * n + j];
                       }
                       if (xn->requires_grad) {
                         auto g = xn->ensure_grad();
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             double dxh = dy[r * n + j] * gn->value[j];
                             m1 += dxh;
                             m2 += dxh * xhat[r * n + j];
                           }
                           m1 *= inv_n;
                           m2 *= inv_n;
                           for (std::size_t j = 0; j < n; ++j) {
                             double dxh = dy[r * n + j] * gn->value[j];
                             g[r * n + j] += rstd[r] * (dxh - m1 - xhat[r * n + j] * m2);
                           }
                         }
                       }
                     });
}

Tensor l2_norm(const Tensor& v) {
  double ss = 0.0;
  for (double x : v.data()) ss += x * x;
  double norm = std::sqrt(ss);
  auto vn = v.node();
  return make_result({}, {norm}, {v}, [vn](Node& self) {
    if (!vn->requires_grad) return;
    double nrm = self.value[0];
    if (nrm == 0.0) return;
    auto g = vn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * vn->value[i] / nrm;
  });
}

Tensor row_l2_norm(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("row_l2_norm on a scalar");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n ? x.numel() / n : numel_of(Shape(x.shape().begin(), x.shape().end() - 1));
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  auto xs = x.data();
  Buffer out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xs[r * n + j] * xs[r * n + j];
    out[r] = std::sqrt(ss);
  }
  auto xn = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [xn, rows, n](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double nrm = self.value[r];
      if (nrm == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r] * xn->value[r * n + j] / nrm;
    }
  });
}

Tensor cross_entropy_from_probs(const Tensor& probs, std::span<const int> labels, double floor) {
  if (probs.rank() != 2) throw DimensionError("cross_entropy expects [batch, classes], got " + shape_str(probs.shape()));
  const std::size_t b = probs.dim(0), c = probs.dim(1);
  if (labels.size() != b) throw DimensionError("cross_entropy: label count does not match batch");
  if (b == 0) throw DimensionError("cross_entropy on an empty batch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw IndexError("label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
  auto ps = probs.data();
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) total -= std::log(std::max(ps[r * c + static_cast<std::size_t>(labels[r])], floor));
  auto pn = probs.node();
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result({}, {total / static_cast<double>(b)}, {probs}, [pn, ys = std::move(ys), b, c, floor](Node& self) {
    if (!pn->requires_grad) return;
    auto g = pn->ensure_grad();
    for (std::size_t r = 0; r < b; ++r) {
      std::size_t i = r * c + static_cast<std::size_t>(ys[r]);
      double p = pn->value[i];
      if (p >= floor) g[i] -= self.grad[0] / (static_cast<double>(b) * p);
    }
  });
}

Tensor kl_divergence(const Tensor& p, const Tensor& q, double floor) {
  require_same_shape(p, q, "kl_divergence");
  if (p.rank() < 1) throw DimensionError("kl_divergence on a scalar");
  const std::size_t n = p.shape().back();
  const std::size_t rows = n ? p.numel() / n : 0;
  Shape out_shape(p.shape().begin(), p.shape().end() - 1);
  auto ps = p.data(), qs = q.data();
  Buffer out(numel_of(out_shape), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double pj = ps[r * n + j];
      if (pj > 0.0) s += pj * (std::log(std::max(pj, floor)) - std::log(std::max(qs[r * n + j], floor)));
    }
    out[r] = s;
  }
  auto pn = p.node(), qn = q.node();
  return make_result(std::move(out_shape), std::move(out), {p, q}, [pn, qn, rows, n, floor](Node& self) {
    if (pn->requires_grad) {
      auto g = pn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          double pj = pn->value[r * n + j], qj = qn->value[r * n + j];
          double d = std::log(std::max(pj, floor)) - std::log(std::max(qj, floor)) + (pj >= floor ? 1.0 : 0.0);
          g[r * n + j] += self.grad[r] * d;
        }
    }
    if (qn->requires_grad) {
      auto g = qn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          double pj = pn->value[r * n + j], qj = qn->value[r * n + j];
          if (qj >= floor && pj > 0.0) g[r * n + j] -= self.grad[r] * pj / qj;
        }
    }
  });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const double> key_mask,
                            std::size_t n_heads) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  if (q.rank() != 3) throw DimensionError("attention expects [B, T, D], got " + shape_str(q.shape()));
  const std::size_t B = q.dim(0), T = q.dim(1), D = q.dim(2);
  if (n_heads == 0 || D % n_heads != 0) throw DimensionError("attention: D not divisible by heads");
  if (key_mask.size() != B * T) throw DimensionError("attention: mask size");
  const std::size_t dh = D / n_heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Ti = static_cast<Eigen::Index>(T), dhi = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(D));
  using HeadMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using MutHeadMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

  Buffer out(B * T * D, 0.0);
  Buffer probs(B * n_heads * T * T, 0.0);
  RowMat scores(Ti, Ti);
  for (std::size_t b = 0; b < B; ++b) {
    const double* mb = key_mask.data() + b * T;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = b * T * D + h * dh;
      HeadMap qh(q.data().data() + off, Ti, dhi, stride), kh(k.data().data() + off, Ti, dhi, stride),
          vh(v.data().data() + off, Ti, dhi, stride);
      scores.noalias() = (qh * kh.transpose()) * scale_f;
      MutMap p(probs.data() + (b * n_heads + h) * T * T, Ti, Ti);
      for (std::size_t i = 0; i < T; ++i) {
        if (mb[i] == 0.0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j)
          if (mb[j] != 0.0) mx = std::max(mx, scores(i, j));
        auto row = p.row(static_cast<Eigen::Index>(i)).array();
        row = (scores.row(static_cast<Eigen::Index>(i)).array() - mx).exp();
        for (std::size_t j = 0; j < T; ++j)
          if (mb[j] == 0.0) row(static_cast<Eigen::Index>(j)) = 0.0;
        row /= row.sum();
      }
      MutHeadMap(out.data() + off, Ti, dhi, stride).noalias() = p * vh;
    }
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return make_result(q.shape(), std::move(out), {q, k, v},
                     [qn, kn, vn, probs = std::move(probs), B, T, D, dh, n_heads, scale_f](Node& self) {
                       const auto Ti = static_cast<Eigen::Index>(T), dhi = static_cast<Eigen::Index>(dh);
                       const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(D));
                       double* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
                       double* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
                       double* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
                       RowMat dp(Ti, Ti), ds(Ti, Ti);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t h = 0; h < n_heads; ++h) {
                           const std::size_t off = b * T * D + h * dh;
                           ConstMap p(probs.data() + (b * n_heads + h) * T * T, Ti, Ti);
                           HeadMap go(self.grad.data() + off, Ti, dhi, stride);
                           HeadMap qh(qn->value.data() + off, Ti, dhi, stride), kh(kn->value.data() + off, Ti, dhi, stride),
                               vh(vn->value.data() + off, Ti, dhi, stride);
                           if (gv) MutHeadMap(gv + off, Ti, dhi, stride).noalias() += p.transpose() * go;
                           if (!gq && !gk) continue;
                           dp.noalias() = go * vh.transpose();
                           Eigen::VectorXd dot = (dp.array() * p.array()).rowwise().sum();
                           ds = (p.array() * (dp.array().colwise() - dot.array())) * scale_f;
                           if (gq) MutHeadMap(gq + off, Ti, dhi, stride).noalias() += ds * kh;
                           if (gk) MutHeadMap(gk + off, Ti, dhi, stride).noalias() += ds.transpose() * qh;
                         }
                     });
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  require_same_shape(hard, soft, "straight_through");
  Buffer out(hard.data().begin(), hard.data().end());
  auto sn = soft.node();
  return make_result(hard.shape(), std::move(out), {soft}, [sn](Node& self) {
    if (!sn->requires_grad) return;
    auto g = sn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

}  // namespace tdt::ad
