#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "bandmoe/rng.hpp"
#include "bandmoe/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace bandmoe;
using bandmoe::testing::gradient_check;

namespace {

Tensor param(CounterRng& rng, const Shape& shape, double sd = 1.0) { return rng.normal_tensor(shape, sd, true); }

void expect_values(const Tensor& t, const std::vector<double>& want, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(Elementwise, AddComponentwise) {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {3, 4});
  expect_values(elementwise(ElementwiseOp::kAdd, a, b), {4, 6});
}

TEST(Elementwise, ExpOfZeroIsOne) { expect_values(elementwise(ElementwiseOp::kExp, Tensor::zeros({3})), {1, 1, 1}); }

TEST(Elementwise, DispatcherCoversScaleAndRelu) {
  auto a = Tensor::from({3}, {-1, 0.5, 2});
  expect_values(elementwise(ElementwiseOp::kScale, a, {}, 3.0), {-3, 1.5, 6});
  expect_values(elementwise(ElementwiseOp::kRelu, a), {0, 0.5, 2});
  expect_values(elementwise(ElementwiseOp::kDiv, a, Tensor::scalar(2)), {-0.5, 0.25, 1});
}

TEST(Elementwise, MulGradientMatchesFiniteDifferences) {
  CounterRng rng(11);
  auto a = param(rng, {4, 4});
  auto b = param(rng, {4, 4});
  auto w = rng.normal_tensor({4, 4}, 1.0);
  auto f = [&] { return sum(mul(a, b) * w); };
  EXPECT_LT(gradient_check(f, {a, b}), 1e-6);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.lhs(), (Shape{2, 3}));
    EXPECT_EQ(e.rhs(), (Shape{4}));
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4]"), std::string::npos);
  }
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  EXPECT_THROW(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::from({1}, {-2.0})), DomainError);
  EXPECT_THROW(div(Tensor::full({1}, 1.0), Tensor::zeros({1})), DomainError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  CounterRng rng(3);
  auto x = rng.normal_tensor({3, 3}, 1.0);
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  expect_values(matmul(eye, x), x.to_vector());
}

TEST(Matmul, HandSum) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from({2, 1}, {1, 1});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  expect_values(c, {3, 7});
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  CounterRng rng(5);
  auto a = param(rng, {5, 4});
  auto b = param(rng, {4, 3});
  auto w = rng.normal_tensor({5, 3}, 1.0);
  auto f = [&] { return sum(matmul(a, b) * w); };
  EXPECT_LT(gradient_check(f, {a, b}), 1e-6);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  CounterRng rng(9);
  auto x = rng.normal_tensor({2, 5, 6}, 1.0);
  std::vector<double> k(2 * 2 * 9, 0.0);
  k[(0 * 2 + 0) * 9 + 4] = 1.0;
  k[(1 * 2 + 1) * 9 + 4] = 1.0;
  auto y = conv2d(x, Tensor::from({2, 2, 3, 3}, k), Tensor::zeros({2}));
  expect_values(y, x.to_vector());
}

TEST(Conv2d, OnesKernelSumsNeighbourhood) {
  const double v = 0.37;
  auto x = Tensor::full({1, 5, 5}, v);
  auto y = conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}));
  for (std::size_t r = 1; r < 4; ++r) {
    for (std::size_t c = 1; c < 4; ++c) EXPECT_NEAR(y[r * 5 + c], 9 * v, 1e-12);
  }
  EXPECT_NEAR(y[0], 4 * v, 1e-12);  // zero padding at the corner
}

TEST(Conv2d, CrossCorrelationConvention) {
  // A kernel with a single tap right of centre reads the right neighbour.
  auto x = Tensor::from({1, 1, 3}, {1, 2, 3});
  std::vector<double> k(9, 0.0);
  k[5] = 1.0;
  expect_values(conv2d(x, Tensor::from({1, 1, 3, 3}, k), Tensor()), {2, 3, 0});
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  CounterRng rng(21);
  auto x = param(rng, {2, 5, 4});
  auto k = param(rng, {3, 2, 3, 3});
  auto b = param(rng, {3});
  auto w = rng.normal_tensor({3, 5, 4}, 1.0);
  auto f = [&] { return sum(conv2d(x, k, b) * w); };
  EXPECT_LT(gradient_check(f, {x, k, b}), 1e-5);
}

TEST(Conv2d, EvenKernelIsConfigError) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), Tensor()), ConfigError);
}

TEST(Softmax, UniformRow) { expect_values(softmax_lastdim(Tensor::zeros({4})), {0.25, 0.25, 0.25, 0.25}); }

TEST(Softmax, LargeLogitsStayFinite) {
  auto y = softmax_lastdim(Tensor::from({2}, {1000, 0}));
  EXPECT_TRUE(std::isfinite(y[0]) && std::isfinite(y[1]));
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  CounterRng rng(2);
  auto y = softmax_lastdim(rng.normal_tensor({7, 9}, 5.0));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) s += y[r * 9 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  CounterRng rng(8);
  auto x = param(rng, {6});
  for (std::size_t i = 0; i < 6; ++i) {
    auto f = [&] { return select(softmax_lastdim(x), i); };
    EXPECT_LT(gradient_check(f, {x}), 1e-6) << "row " << i;
  }
}

TEST(GlobalAvgPool, ConstantAndMean) {
  expect_values(global_avg_pool(Tensor::full({2, 3, 3}, 0.4)), {0.4, 0.4});
  expect_values(global_avg_pool(Tensor::from({1, 2, 2}, {0, 2, 4, 6})), {3});
}

TEST(GlobalAvgPool, GradientIsUniform) {
  auto x = Tensor::zeros({2, 3, 4}, true);
  auto g = backward(sum(global_avg_pool(x))).of(x);
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 12.0);
}

TEST(Backward, QuadraticGradientIsTwiceInput) {
  CounterRng rng(4);
  auto x = param(rng, {5});
  auto g = backward(sum(square(x))).of(x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(g[i], 2.0 * x[i]);
}

TEST(Backward, StopGradientBlocksFlow) {
  CounterRng rng(4);
  auto x = param(rng, {3});
  auto y = param(rng, {3});
  auto grads = backward(sum(stop_gradient(x) * y));
  const Tensor gx = grads.of(x);
  for (double v : gx.data()) EXPECT_EQ(v, 0.0);
  expect_values(grads.of(y), x.to_vector());
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  CounterRng rng(31);
  auto a = param(rng, {3, 4});
  auto b = param(rng, {4, 2});
  auto f = [&] { return sum(exp(scale(matmul(a, b), 0.3))); };
  EXPECT_LT(gradient_check(f, {a, b}), 1e-5);
}

TEST(Backward, MultipleUsesAccumulate) {
  auto x = Tensor::from({2}, {1.5, -2.0}, true);
  auto g = backward(sum(x * x + x)).of(x);
  expect_values(g, {4.0, -3.0});
}

TEST(Backward, NonScalarLossIsUsageError) { EXPECT_THROW(backward(Tensor::zeros({2}, true)), UsageError); }

TEST(Backward, CountsPasses) {
  auto x = Tensor::from({1}, {2.0}, true);
  const auto before = backward_pass_count();
  backward(square(x));
  backward(square(x));
  EXPECT_EQ(backward_pass_count() - before, 2u);
}

TEST(Backward, ReplayIsBitIdentical) {
  auto run = [] {
    CounterRng rng(77);
    auto a = param(rng, {4, 6});
    auto k = param(rng, {2, 1, 3, 3});
    auto img = reshape(a, {1, 4, 6});
    auto y = softmax_lastdim(reshape(conv2d(img, k, Tensor()), {2, 24}));
    auto loss = sum(log(add_scalar(y, 1.0)) * y);
    auto g = backward(loss);
    auto out = g.of(a).to_vector();
    auto gk = g.of(k).to_vector();
    out.insert(out.end(), gk.begin(), gk.end());
    return out;
  };
  auto g1 = run();
  auto g2 = run();
  ASSERT_EQ(g1.size(), g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(g1[i]), std::bit_cast<std::uint64_t>(g2[i]));
}

// Every differentiable op, checked at 10 random points.
TEST(GradientProperty, AllDifferentiableOpsAtRandomPoints) {
  using Fn = std::function<Tensor(const Tensor&, const Tensor&)>;
  struct Case {
    const char* name;
    Shape a, b;
    Fn fn;
    bool positive_a = false;
  };
  const std::vector<Case> cases = {
      {"add_broadcast", {3, 4}, {4}, [](auto& a, auto& b) { return add(a, b); }},
      {"sub_broadcast", {2, 3, 4}, {3, 1}, [](auto& a, auto& b) { return sub(a, b); }},
      {"mul_broadcast", {3, 4}, {3, 1}, [](auto& a, auto& b) { return mul(a, b); }},
      {"div", {3, 4}, {3, 4}, [](auto& a, auto& b) { return div(a, add_scalar(square(b), 0.5)); }},
      {"exp", {5}, {1}, [](auto& a, auto&) { return exp(a); }},
      {"log", {5}, {1}, [](auto& a, auto&) { return log(a); }, true},
      {"relu", {6}, {1}, [](auto& a, auto&) { return relu(a); }},
      {"sigmoid", {6}, {1}, [](auto& a, auto&) { return sigmoid(a); }},
      {"abs", {6}, {1}, [](auto& a, auto&) { return abs(a); }},
      {"sqrt", {6}, {1}, [](auto& a, auto&) { return sqrt(a); }, true},
      {"scale", {6}, {1}, [](auto& a, auto&) { return scale(a, -1.7); }},
      {"clamp_min", {6}, {1}, [](auto& a, auto&) { return clamp_min(a, 0.1); }},
      {"mean_lastdim", {3, 5}, {1}, [](auto& a, auto&) { return mean_lastdim(a); }},
      {"max_lastdim", {3, 5}, {1}, [](auto& a, auto&) { return max_lastdim(a); }},
      {"min_lastdim", {3, 5}, {1}, [](auto& a, auto&) { return min_lastdim(a); }},
      {"logsumexp", {3, 5}, {1}, [](auto& a, auto&) { return logsumexp_lastdim(a); }},
      {"softmax", {3, 5}, {1}, [](auto& a, auto&) { return softmax_lastdim(a); }},
      {"log_softmax", {3, 5}, {1}, [](auto& a, auto&) { return log_softmax_lastdim(a); }},
      {"transpose", {3, 5}, {1}, [](auto& a, auto&) { return transpose(a); }},
      {"narrow", {3, 5, 2}, {1}, [](auto& a, auto&) { return narrow(a, 1, 1, 3); }},
      {"concat", {2, 3}, {2, 2}, [](auto& a, auto& b) { return concat({a, b}, 1); }},
      {"matmul", {3, 4}, {4, 2}, [](auto& a, auto& b) { return matmul(a, b); }},
      {"conv2d", {2, 4, 4}, {3, 2, 3, 3}, [](auto& a, auto& b) { return conv2d(a, b, Tensor()); }},
      {"global_avg_pool", {2, 3, 4}, {1}, [](auto& a, auto&) { return global_avg_pool(a); }},
      {"avg_pool2", {2, 4, 4}, {1}, [](auto& a, auto&) { return avg_pool2(a); }},
      {"upsample2", {2, 2, 3}, {1}, [](auto& a, auto&) { return upsample2(a); }},
      {"gather", {6}, {1}, [](auto& a, auto&) {
         const std::size_t idx[] = {4, 1, 4};
         return gather(a, idx);
       }},
  };
  CounterRng rng(1234);
  for (const auto& c : cases) {
    for (int point = 0; point < 10; ++point) {
      auto a = param(rng, c.a);
      auto b = param(rng, c.b);
      if (c.positive_a) {
        for (auto& v : a.mutable_data()) v = 0.2 + std::fabs(v);
      }
      auto probe = c.fn(a, b);
      auto w = rng.normal_tensor(probe.shape(), 1.0);
      auto f = [&] { return sum(mul(c.fn(a, b), w)); };
      EXPECT_LT(gradient_check(f, {a, b}), 1e-4) << c.name << " point " << point;
    }
  }
}

// Broadcast add/mul against explicit tiling, ranks up to 4 and sizes up to 5.
TEST(BroadcastProperty, AgreesWithExplicitTiling) {
  CounterRng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rank = 1 + rng.below(4);
    Shape out(rank), a(rank), b(rank);
    for (std::size_t k = 0; k < rank; ++k) {
      out[k] = 1 + rng.below(5);
      a[k] = rng.bernoulli(0.3) ? 1 : out[k];
      b[k] = rng.bernoulli(0.3) ? 1 : out[k];
    }
    // Drop leading axes of b sometimes: implied size 1.
    const std::size_t drop = rng.below(rank);
    Shape b_short(b.begin() + static_cast<long>(drop), b.end());
    auto ta = rng.normal_tensor(a, 1.0);
    auto tb = rng.normal_tensor(b_short, 1.0);
    for (std::size_t k = 0; k < drop; ++k) b[k] = 1;

    auto tiled = [&](const Tensor& t, const Shape& s) {
      std::vector<double> v(numel(out));
      std::vector<std::size_t> idx(rank, 0);
      for (std::size_t i = 0; i < v.size(); ++i) {
        std::size_t src = 0;
        for (std::size_t k = 0; k < rank; ++k) src = src * s[k] + (s[k] == 1 ? 0 : idx[k]);
        v[i] = t[src];
        for (std::size_t k = rank; k-- > 0;) {
          if (++idx[k] < out[k]) break;
          idx[k] = 0;
        }
      }
      return v;
    };
    Shape bigger = out;
    for (std::size_t k = 0; k < rank; ++k) bigger[k] = std::max(a[k], b[k]);
    out = bigger;
    const auto va = tiled(ta, a), vb = tiled(tb, b);
    auto sum_t = add(ta, tb);
    auto prod_t = mul(ta, tb);
    ASSERT_EQ(sum_t.shape(), out);
    for (std::size_t i = 0; i < va.size(); ++i) {
      EXPECT_EQ(sum_t[i], va[i] + vb[i]);
      EXPECT_EQ(prod_t[i], va[i] * vb[i]);
    }
  }
}
