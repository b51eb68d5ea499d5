#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tdt/errors.hpp"
#include "tdt/grad_check.hpp"
#include "tdt/ops.hpp"

using namespace tdt;
using namespace tdt::ad;

namespace {

Tensor vec(std::vector<double> v, bool rg = false) {
  const std::size_t n = v.size();
  return Tensor::from({n}, std::move(v), rg);
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), rg);
}

double grad_of(const std::function<Tensor(const Tensor&)>& f, double x0) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = Tensor::scalar(x0, true);
  tape.backward(f(x));
  return x.grad()[0];
}

// Checks a primitive at 20 random points.
void check_primitive(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Shape>& shapes,
                     double lo = -1.0, double hi = 1.0, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> inputs;
    std::vector<NamedTensor> named;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      inputs.push_back(random_tensor(shapes[i], rng, lo, hi));
      named.push_back({"x" + std::to_string(i), inputs.back()});
    }
    // a random linear readout makes every output coordinate matter
    Tensor probe_w;
    auto rep = grad_check(
        [&] {
          Tensor y = f(inputs);
          if (!probe_w.defined()) {
            std::mt19937_64 prng(99);
            probe_w = random_tensor(y.shape(), prng, -1.0, 1.0, false);
          }
          return CheckedLoss{sum_all(mul(y, probe_w)), {}};
        },
        named);
    ASSERT_TRUE(rep.passed) << "trial " << trial << " max rel error " << rep.max_rel_error;
  }
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at({1, 2}), 6.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, GradExistsOnlyForParticipatingRequiresGrad) {
  Tape tape;
  TapeScope scope(tape);
  auto a = vec({1, 2}, true), b = vec({3, 4}, true), c = vec({5, 6}, false), unused = vec({1, 1}, true);
  auto loss = sum_all(mul(a, c));
  tape.backward(loss);
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
  EXPECT_FALSE(c.has_grad());
  EXPECT_FALSE(unused.has_grad());
  EXPECT_EQ(a.grad_vector(), (std::vector<double>{5, 6}));
}

TEST(Tensor, GradAccumulatesForReusedTensor) {
  for (double x0 : {-3.0, 0.0, 2.5}) EXPECT_EQ(grad_of([](const Tensor& x) { return add(x, x); }, x0), 2.0);
}

TEST(Tensor, TapeClearDropsRecords) {
  Tape tape;
  TapeScope scope(tape);
  auto a = vec({1, 2}, true);
  auto loss = sum_all(mul(a, a));
  EXPECT_GT(tape.size(), 0u);
  tape.backward(loss);
  tape.clear();
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_EQ(a.grad_vector(), (std::vector<double>{2, 4}));
}

TEST(Tensor, NoTapeMeansNoGraph) {
  auto a = vec({1, 2}, true);
  auto y = mul(a, a);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, IdenticalInputsGiveBitIdenticalOutputs) {
  std::mt19937_64 r1(5), r2(5);
  auto x1 = random_tensor({4, 6}, r1), x2 = random_tensor({4, 6}, r2);
  auto w1 = random_tensor({6, 3}, r1), w2 = random_tensor({6, 3}, r2);
  auto y1 = softmax(matmul(x1, w1), 1), y2 = softmax(matmul(x2, w2), 1);
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(Sigmoid, Examples) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_NEAR(sigmoid(Tensor::scalar(100.0)).item(), 1.0, 1e-12);
  EXPECT_NEAR(sigmoid(Tensor::scalar(std::log(3.0))).item(), 0.75, 1e-15);
  EXPECT_GT(sigmoid(Tensor::scalar(-800.0)).item(), -1e-300);
  EXPECT_TRUE(std::isfinite(sigmoid(Tensor::scalar(-800.0)).item()));
}

TEST(Sigmoid, GradientAtZeroIsQuarter) {
  EXPECT_NEAR(grad_of([](const Tensor& x) { return sigmoid(x); }, 0.0), 0.25, 1e-15);
}

TEST(Softmax, Examples) {
  auto u = softmax(vec({0, 0}), 0);
  EXPECT_EQ(u[0], 0.5);
  EXPECT_EQ(u[1], 0.5);
  auto a = softmax(vec({1, 2}), 0), b = softmax(vec({101, 102}), 0);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  auto c = softmax(vec({std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
  EXPECT_NEAR(c[0], 1.0 / 6, 1e-15);
  EXPECT_NEAR(c[1], 2.0 / 6, 1e-15);
  EXPECT_NEAR(c[2], 3.0 / 6, 1e-15);
}

TEST(Softmax, RowsSumToOneForExtremeInputs) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({50, 7}, rng, -500.0, 500.0, false);
  auto p = softmax(x, 1);
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += p.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(KlDivergence, Examples) {
  EXPECT_EQ(kl_divergence(vec({0.5, 0.5}), vec({0.5, 0.5})).item(), 0.0);
  EXPECT_NEAR(kl_divergence(vec({1, 0}), vec({0.5, 0.5})).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(kl_divergence(vec({0.75, 0.25}), vec({0.5, 0.5})).item(), 0.130812, 1e-6);
  EXPECT_NEAR(kl_divergence(vec({0.75, 0.25}), vec({0.5, 0.5})).item(),
              0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-15);
}

TEST(KlDivergence, LengthMismatchThrows) {
  EXPECT_THROW(kl_divergence(vec({0.5, 0.5}), vec({0.2, 0.3, 0.5})), DimensionError);
}

TEST(KlDivergence, ZeroQIsClampedNotAnError) {
  double v = kl_divergence(vec({0.5, 0.5}), vec({1.0, 0.0})).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12), 1e-9);
}

TEST(KlDivergence, SelfIsZeroAndNonNegative) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 100; ++t) {
    auto p = softmax(random_tensor({5}, rng, -4, 4, false), 0);
    auto q = softmax(random_tensor({5}, rng, -4, 4, false), 0);
    EXPECT_EQ(kl_divergence(p, p).item(), 0.0);
    EXPECT_GE(kl_divergence(p, q).item(), -1e-12);
  }
}

TEST(KlDivergence, BatchedOverLastAxis) {
  auto p = Tensor::from({2, 2}, {0.5, 0.5, 1, 0});
  auto q = Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5});
  auto d = kl_divergence(p, q);
  ASSERT_EQ(d.shape(), Shape{2});
  EXPECT_EQ(d[0], 0.0);
  EXPECT_NEAR(d[1], std::log(2.0), 1e-12);
}

TEST(L2Norm, Examples) {
  EXPECT_EQ(l2_norm(vec({0, 0, 0})).item(), 0.0);
  EXPECT_EQ(l2_norm(vec({3, 4})).item(), 5.0);
  EXPECT_NEAR(l2_norm(Tensor::full({7}, 1.0)).item(), std::sqrt(7.0), 1e-15);
}

TEST(L2Norm, ZeroVectorSubgradientIsZero) {
  Tape tape;
  TapeScope scope(tape);
  auto v = vec({0, 0, 0}, true);
  tape.backward(l2_norm(v));
  for (double g : v.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Hinge, KinkSubgradientIsZero) {
  EXPECT_EQ(grad_of([](const Tensor& x) { return hinge(x); }, 0.0), 0.0);
  EXPECT_EQ(grad_of([](const Tensor& x) { return hinge(x); }, 0.5), 1.0);
  EXPECT_EQ(grad_of([](const Tensor& x) { return hinge(x); }, -0.5), 0.0);
}

TEST(CrossEntropy, ClampsAndRejectsBadLabels) {
  auto p = Tensor::from({2, 2}, {1.0, 0.0, 0.5, 0.5});
  std::vector<int> y = {1, 0};
  EXPECT_NEAR(cross_entropy_from_probs(p, y).item(), 0.5 * (-std::log(1e-12) + std::log(2.0)), 1e-9);
  std::vector<int> bad = {2, 0};
  EXPECT_THROW(cross_entropy_from_probs(p, bad), IndexError);
}

TEST(GradCheck, SquareAtThree) {
  auto x = Tensor::scalar(3.0, true);
  auto rep = grad_check([&] { return CheckedLoss{mul(x, x), {}}; }, {{"x", x}});
  EXPECT_TRUE(rep.passed);
  Tape tape;
  TapeScope scope(tape);
  auto x2 = Tensor::scalar(3.0, true);
  tape.backward(mul(x2, x2));
  EXPECT_NEAR(x2.grad()[0], 6.0, 1e-12);
  const double h = 1e-5;
  EXPECT_NEAR(((3 + h) * (3 + h) - (3 - h) * (3 - h)) / (2 * h), 6.0, 1e-6);
}

TEST(GradCheck, SigmoidAtZero) {
  auto x = Tensor::scalar(0.0, true);
  auto rep = grad_check([&] { return CheckedLoss{sigmoid(x), {}}; }, {{"x", x}});
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(GradCheck, NonFiniteLossNamesParameter) {
  auto x = Tensor::scalar(1e-6, true);
  try {
    grad_check([&] { return CheckedLoss{log(x), {}}; }, {{"theta", x}});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  // a hand-built op whose backward is deliberately off by 2x
  auto x = Tensor::scalar(1.5, true);
  auto bad = [&] {
    auto xn = x.node();
    Tensor y = make_result({1}, {x.item() * x.item()}, {x}, [xn](detail::Node& self) {
      xn->ensure_grad()[0] += self.grad[0] * 4.0 * xn->value[0];
    });
    return CheckedLoss{y, {}};
  };
  EXPECT_FALSE(grad_check(bad, {{"x", x}}).passed);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  auto x = Tensor::scalar(1.0, true);
  GradCheckOptions o;
  o.h = 0.0;
  EXPECT_THROW(grad_check([&] { return CheckedLoss{mul(x, x), {}}; }, {{"x", x}}, o), ConfigError);
}

TEST(GradCheck, SkipsCoordinatesAtHingeKink) {
  auto x = Tensor::scalar(0.0, true);
  auto rep = grad_check([&] { return CheckedLoss{hinge(x), {x.item()}}; }, {{"x", x}});
  EXPECT_EQ(rep.params[0].skipped, 1u);
  EXPECT_EQ(rep.params[0].checked, 0u);
}

TEST(Primitives, ElementwiseGradCheck) {
  check_primitive([](auto& x) { return add(x[0], x[1]); }, {{3, 4}, {3, 4}});
  check_primitive([](auto& x) { return sub(x[0], x[1]); }, {{3, 4}, {3, 4}});
  check_primitive([](auto& x) { return mul(x[0], x[1]); }, {{3, 4}, {3, 4}});
  check_primitive([](auto& x) { return scale(x[0], -1.7); }, {{5}});
  check_primitive([](auto& x) { return one_minus(x[0]); }, {{5}});
  check_primitive([](auto& x) { return log(x[0]); }, {{6}}, 0.2, 3.0);
  check_primitive([](auto& x) { return exp(x[0]); }, {{6}});
  check_primitive([](auto& x) { return tanh(x[0]); }, {{6}}, -2, 2);
  check_primitive([](auto& x) { return sigmoid(x[0]); }, {{6}}, -5, 5);
  check_primitive([](auto& x) { return gelu(x[0]); }, {{6}}, -3, 3);
  check_primitive([](auto& x) { return relu(x[0]); }, {{6}}, 0.1, 2);
  check_primitive([](auto& x) { return hinge(x[0]); }, {{6}}, -2, -0.1);
}

TEST(Primitives, ReductionAndShapeGradCheck) {
  check_primitive([](auto& x) { return sum(x[0], 1); }, {{3, 4, 2}});
  check_primitive([](auto& x) { return mean(x[0], 0); }, {{3, 4}});
  check_primitive([](auto& x) { return mean_all(x[0]); }, {{3, 4}});
  check_primitive([](auto& x) { return reshape(x[0], {4, 3}); }, {{3, 4}});
  check_primitive(
      [](auto& x) {
        std::vector<Tensor> parts = {x[0], x[1]};
        return concat(parts, 1);
      },
      {{2, 3}, {2, 2}});
  check_primitive([](auto& x) { return broadcast_rows(x[0], {2, 3}); }, {{4}});
  check_primitive([](auto& x) { return expand_last(x[0], 3); }, {{2, 3}});
  check_primitive([](auto& x) { return select_index(x[0], 1, 2); }, {{2, 4, 3}});
}

TEST(Primitives, DenseGradCheck) {
  check_primitive([](auto& x) { return matmul(x[0], x[1]); }, {{2, 3, 4}, {4, 5}});
  check_primitive([](auto& x) { return softmax(x[0], 1); }, {{3, 4}}, -3, 3);
  check_primitive([](auto& x) { return log_softmax(x[0], 0); }, {{4, 3}}, -3, 3);
  check_primitive([](auto& x) { return layer_norm(x[0], x[1], x[2]); }, {{3, 5}, {5}, {5}});
  check_primitive([](auto& x) { return l2_norm(x[0]); }, {{6}});
  check_primitive([](auto& x) { return row_l2_norm(x[0]); }, {{3, 6}});
  check_primitive(
      [](auto& x) {
        std::vector<int> ids = {0, 2, 2, 1};
        return embedding(x[0], ids, {2, 2});
      },
      {{3, 4}});
}

TEST(Primitives, ProbabilityGradCheck) {
  check_primitive([](auto& x) { return kl_divergence(softmax(x[0], 1), softmax(x[1], 1)); }, {{3, 4}, {3, 4}}, -2, 2);
  check_primitive(
      [](auto& x) {
        std::vector<int> y = {1, 0, 3};
        return cross_entropy_from_probs(softmax(x[0], 1), y);
      },
      {{3, 4}}, -2, 2);
}

TEST(Primitives, AttentionGradCheck) {
  std::vector<double> mask = {1, 1, 1, 0, 1, 1, 1, 1};
  check_primitive([&](auto& x) { return multi_head_attention(x[0], x[1], x[2], mask, 2); },
                  {{2, 4, 6}, {2, 4, 6}, {2, 4, 6}});
}

TEST(Primitives, EmbeddingRejectsOutOfRangeIds) {
  auto table = Tensor::zeros({3, 2});
  std::vector<int> ids = {0, 3};
  EXPECT_THROW(embedding(table, ids, {2}), IndexError);
}

TEST(Primitives, ShapeMismatchesThrow) {
  EXPECT_THROW(add(vec({1, 2}), vec({1, 2, 3})), DimensionError);
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Attention, MaskedKeysReceiveNoWeight) {
  std::mt19937_64 rng(4);
  auto q = random_tensor({1, 3, 4}, rng, -1, 1, false);
  auto v = random_tensor({1, 3, 4}, rng, -1, 1, false);
  std::vector<double> mask = {1, 1, 0};
  auto out = multi_head_attention(q, q, v, mask, 1);
  // changing the masked value row leaves real outputs untouched
  auto v2 = v.clone(false);
  for (std::size_t j = 0; j < 4; ++j) v2.mutable_data()[8 + j] = 42.0;
  auto out2 = multi_head_attention(q, q, v2, mask, 1);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out[i], out2[i]);
  for (std::size_t i = 8; i < 12; ++i) EXPECT_EQ(out[i], 0.0);
}
