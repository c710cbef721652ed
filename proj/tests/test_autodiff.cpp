#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fpdlab/gradcheck.hpp"
#include "fpdlab/nn.hpp"
#include "fpdlab/tensor.hpp"

using namespace fpdlab;

namespace {

Tensor leaf(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v), true); }

// Plain central differences over a scalar function of a flat vector.
std::vector<double> numeric_grad(const std::function<double(std::vector<double>&)>& f, std::vector<double> x,
                                 double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(Autodiff, ProductRuleByHand) {
  // f = sum(x * x * y), df/dx = 2xy, df/dy = x^2
  Tensor x = leaf({3}, {1.0, -2.0, 0.5});
  Tensor y = leaf({3}, {3.0, 4.0, -1.0});
  backward(sum(x * x * y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -16.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], -1.0);
  EXPECT_DOUBLE_EQ(y.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(y.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(y.grad()[2], 0.25);
}

TEST(Autodiff, BroadcastGradientSumsOverExpandedAxes) {
  Tensor a = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = leaf({3}, {10, 20, 30});
  const Tensor c = a + b;
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_DOUBLE_EQ(c[5], 36.0);
  backward(sum(c));
  for (double g : b.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
  for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Autodiff, SoftmaxJacobianClosedForm) {
  // d/dx_j sum_i w_i s_i = s_j (w_j - sum_i w_i s_i)
  Tensor x = leaf({4}, {0.3, -1.2, 2.0, 0.1});
  const std::vector<double> w = {1.0, -2.0, 0.5, 3.0};
  const Tensor s = softmax(x, 0);
  backward(sum(s * Tensor({4}, w)));
  double ws = 0.0;
  for (int i = 0; i < 4; ++i) ws += w[i] * s[i];
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(x.grad()[j], s[j] * (w[j] - ws), 1e-15);
}

TEST(Autodiff, SmallMlpMatchesIndependentDifferences) {
  CounterRng rng(5, 0);
  std::vector<double> w1(12), w2(4), xin(6);
  for (auto* v : {&w1, &w2, &xin})
    for (double& e : *v) e = rng.normal();
  auto forward = [&](const std::vector<double>& p) {
    const Tensor W1({3, 4}, std::vector<double>(p.begin(), p.begin() + 12), true);
    const Tensor W2({4, 1}, std::vector<double>(p.begin() + 12, p.end()), true);
    const Tensor X({2, 3}, xin);
    return std::pair{sum(square(matmul(gelu(layer_norm(matmul(X, W1))), W2))), std::pair{W1, W2}};
  };
  std::vector<double> p = w1;
  p.insert(p.end(), w2.begin(), w2.end());
  auto [loss, ws] = forward(p);
  backward(loss);
  std::vector<double> analytic(ws.first.grad().begin(), ws.first.grad().end());
  analytic.insert(analytic.end(), ws.second.grad().begin(), ws.second.grad().end());
  const auto numeric = numeric_grad([&](std::vector<double>& q) { return forward(q).first.item(); }, p);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(analytic[i], numeric[i], 1e-6 + 1e-5 * std::abs(numeric[i]));
}

TEST(Autodiff, BackwardAccumulatesIntoLeaves) {
  Tensor x = leaf({2}, {1.0, 2.0});
  const Tensor y = sum(square(x));
  backward(y);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Autodiff, SharedSubexpressionVisitedOnce) {
  Tensor x = leaf({1}, {3.0});
  const Tensor u = exp(x);
  backward(sum(u * u));  // d/dx e^{2x} = 2 e^{2x}
  EXPECT_NEAR(x.grad()[0], 2.0 * std::exp(6.0), 1e-9);
}

TEST(Autodiff, StopGradientBlocksFlow) {
  Tensor x = leaf({3}, {1.0, 2.0, 3.0});
  const Tensor y = stop_gradient(x);
  EXPECT_FALSE(y.requires_grad());
  backward(sum(x * y));  // gradient is y, not 2x
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Autodiff, LossMustBeScalar) {
  Tensor x = leaf({2}, {1.0, 2.0});
  EXPECT_THROW(backward(x * x), ShapeError);
}

TEST(Autodiff, MatmulShapeErrorNamesBothOperands) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 5});
  try {
    (void)matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
}

TEST(Autodiff, IncompatibleBroadcastRejected) {
  EXPECT_THROW((void)(Tensor::zeros({2, 3}) + Tensor::zeros({4})), ShapeError);
}

TEST(Autodiff, LayerNormZeroMeanUnitVariance) {
  const Tensor y = layer_norm(Tensor({2, 5}, {1, 2, 3, 4, 5, -3, 0, 1, 7, 2}));
  for (int r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (int k = 0; k < 5; ++k) m += y[r * 5 + k] / 5;
    for (int k = 0; k < 5; ++k) v += (y[r * 5 + k] - m) * (y[r * 5 + k] - m) / 5;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Autodiff, LogSoftmaxStableForLargeLogits) {
  const Tensor y = log_softmax(Tensor({1, 3}, {1000.0, 1000.0, 0.0}));
  EXPECT_NEAR(y[0], -std::log(2.0), 1e-12);
  EXPECT_TRUE(std::isfinite(y[2]));
}

TEST(GradientSuite, EveryPrimitivePassesOnAtLeastThreeShapes) {
  const auto rows = run_primitive_suite(1);
  ASSERT_GE(rows.size(), 20u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.passed) << r.name << " max error " << r.max_error;
    EXPECT_GE(r.cases, 3u) << r.name;
  }
}

TEST(GradientSuite, HoldsForOtherSeeds) {
  for (std::uint64_t seed : {2, 3})
    for (const auto& r : run_primitive_suite(seed)) EXPECT_TRUE(r.passed) << r.name << " seed " << seed;
}

TEST(GradientSuite, CorruptedOperatorIsCaught) {
  for (const std::string op : {"matmul", "softmax", "gather_rows", "tanh"}) {
    detail::corrupted_op() = op;
    const auto rows = run_primitive_suite(1);
    detail::corrupted_op().clear();
    bool caught = false;
    for (const auto& r : rows)
      if (r.name == op) caught = !r.passed;
    EXPECT_TRUE(caught) << op;
  }
}

TEST(GradientSuite, ErrorMeasureHasAbsoluteFloor) {
  const GradTolerance tol;
  EXPECT_LE(grad_error(1e-9, 5e-7, tol), tol.rel);
  EXPECT_GT(grad_error(1.0, 1.001, tol), tol.rel);
  EXPECT_LE(grad_error(1.0, 1.00001, tol), tol.rel);
}

TEST(Optimizer, ZeroLearningRateLeavesParametersUntouched) {
  ParamStore ps;
  ps.add("w", leaf({3}, {1.0, -2.0, 3.0}));
  backward(sum(square(ps.get("w"))));
  const auto before = ps.checksum();
  RmsOptimizer opt(0.0);
  opt.step(ps);
  EXPECT_EQ(ps.checksum(), before);
}

TEST(Optimizer, FirstStepMovesByLearningRateAgainstGradientSign) {
  ParamStore ps;
  ps.add("w", leaf({2}, {1.0, -1.0}));
  backward(sum(ps.get("w") * Tensor({2}, {3.0, -0.5})));
  RmsOptimizer opt(0.1);
  opt.step(ps);
  // bias-corrected second moment equals g^2 after one step
  EXPECT_NEAR(ps.get("w")[0], 0.9, 1e-7);
  EXPECT_NEAR(ps.get("w")[1], -0.9, 1e-7);
}
