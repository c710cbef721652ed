#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fpdlab/drift.hpp"
#include "fpdlab/gradcheck.hpp"
#include "oracles.hpp"

using namespace fpdlab;
using namespace fpdlab::testing;

TEST(Affinities, EqualDistancesGiveUniform) {
  // Anchors at the origin, targets on the unit axes: all distances equal.
  const std::vector<double> t{1, 0, 0, 0, 1, 0, 0, 0, 1};
  const std::vector<double> anchors(9, 0.0);
  for (double v : affinities(anchors, t, 3, 3, 0.7)) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Affinities, HugeBandwidthFlattens) {
  CounterRng rng(1, 0);
  std::vector<double> a(12), t(12);
  for (double& v : a) v = rng.normal();
  for (double& v : t) v = rng.normal();
  for (double v : affinities(a, t, 4, 3, 1e6)) EXPECT_NEAR(v, 0.25, 1e-6);
}

TEST(Affinities, ThreeByThreeHandComputation) {
  // 1-D points; distances |a_i - t_j|.
  const std::vector<double> a{0.0, 1.0, 3.0}, t{0.5, 2.0, -1.0};
  const double h = 0.8;
  const Mat oracle = oracle_affinity({{0.0}, {1.0}, {3.0}}, {{0.5}, {2.0}, {-1.0}}, h);
  const auto got = affinities(a, t, 3, 1, h);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(got[i * 3 + j], oracle[i][j], 1e-12);
  // Rows sum to one after the final stage.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i * 3] + got[i * 3 + 1] + got[i * 3 + 2], 1.0, 1e-15);
}

TEST(Affinities, RejectsBadArguments) {
  const std::vector<double> a{0, 1}, t{0, 1};
  EXPECT_THROW(affinities(a, t, 2, 1, 0.0), std::invalid_argument);
  EXPECT_THROW(affinities(std::vector<double>{0}, std::vector<double>{0}, 1, 1, 1.0), std::invalid_argument);
}

TEST(DriftVector, IdenticalRowsGiveExactZero) {
  const Mat X(4, std::vector<double>{0.3, -1.0, 2.0});
  const DriftBatch b = DriftBatch::make(from_mat(X), from_mat(X));
  for (double v : drift_vector(b, 0.5)) EXPECT_EQ(v, 0.0);
}

TEST(DriftVector, TwoByOneHandScalars) {
  const Mat X{{0.2}, {-0.7}}, Y{{1.0}, {0.1}};
  const double h = 0.3;
  // Fully written out for B = 2, F = 1.
  auto norm3 = [](double k00, double k01, double k10, double k11) {
    double r0 = k00 + k01, r1 = k10 + k11;
    k00 /= r0, k01 /= r0, k10 /= r1, k11 /= r1;
    const double c0 = k00 + k10, c1 = k01 + k11;
    k00 /= c0, k10 /= c0, k01 /= c1, k11 /= c1;
    r0 = k00 + k01, r1 = k10 + k11;
    return std::vector<double>{k00 / r0, k01 / r0, k10 / r1, k11 / r1};
  };
  auto k = [&](double a, double b) { return std::exp(-std::abs(a - b) / h); };
  const double x0 = 0.2, x1 = -0.7, y0 = 1.0, y1 = 0.1;
  const auto ap = norm3(k(x0, y0), k(x0, y1), k(x1, y0), k(x1, y1));
  // Negatives: sigma(0) = 1, sigma(1) = 0.
  const auto an = norm3(k(x0, x1), k(x0, x0), k(x1, x1), k(x1, x0));
  const double v0 = ap[0] * (y0 - x0) + ap[1] * (y1 - x0) - an[0] * (x1 - x0) - an[1] * (x0 - x0);
  const double v1 = ap[2] * (y0 - x1) + ap[3] * (y1 - x1) - an[2] * (x1 - x1) - an[3] * (x0 - x1);
  const auto V = drift_vector(DriftBatch::make(from_mat(X), from_mat(Y)), h);
  EXPECT_NEAR(V[0], v0, 1e-12);
  EXPECT_NEAR(V[1], v1, 1e-12);
}

TEST(DriftVector, MatchesBruteForceAtSmallBatches) {
  CounterRng rng(2, 0);
  for (std::size_t B : {2, 3, 5})
    for (int trial = 0; trial < 10; ++trial) {
      const Mat X = random_mat(B, 4, rng), Y = random_mat(B, 4, rng);
      const double h = rng.uniform(0.1, 3.0);
      const Mat oracle = oracle_drift(X, Y, h);
      const auto V = drift_vector(DriftBatch::make(from_mat(X), from_mat(Y)), h);
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t f = 0; f < 4; ++f) EXPECT_NEAR(V[i * 4 + f], oracle[i][f], 1e-12);
    }
}

TEST(DriftVector, SitesAreIndependent) {
  // Two sites in one batch equal two separate single-site batches.
  CounterRng rng(3, 0);
  const Mat X0 = random_mat(3, 2, rng), X1 = random_mat(3, 2, rng), Y0 = random_mat(3, 2, rng),
            Y1 = random_mat(3, 2, rng);
  std::vector<double> xv, yv;
  for (std::size_t i = 0; i < 3; ++i) {
    xv.insert(xv.end(), X0[i].begin(), X0[i].end());
    xv.insert(xv.end(), X1[i].begin(), X1[i].end());
    yv.insert(yv.end(), Y0[i].begin(), Y0[i].end());
    yv.insert(yv.end(), Y1[i].begin(), Y1[i].end());
  }
  const auto V = drift_vector(DriftBatch::make(Tensor({3, 2, 2}, xv), Tensor({3, 2, 2}, yv)), 0.9);
  const Mat o0 = oracle_drift(X0, Y0, 0.9), o1 = oracle_drift(X1, Y1, 0.9);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t f = 0; f < 2; ++f) {
      EXPECT_NEAR(V[(i * 2 + 0) * 2 + f], o0[i][f], 1e-12);
      EXPECT_NEAR(V[(i * 2 + 1) * 2 + f], o1[i][f], 1e-12);
    }
}

TEST(DriftVector, ScalingHomogeneity) {
  CounterRng rng(4, 0);
  const Mat X = random_mat(4, 3, rng), Y = random_mat(4, 3, rng);
  const double alpha = 2.5, h = 0.6;
  Mat Xs = X, Ys = Y;
  for (auto* m : {&Xs, &Ys})
    for (auto& r : *m)
      for (double& v : r) v *= alpha;
  const auto V = drift_vector(DriftBatch::make(from_mat(X), from_mat(Y)), h);
  const auto Vs = drift_vector(DriftBatch::make(from_mat(Xs), from_mat(Ys)), alpha * h);
  for (std::size_t i = 0; i < V.size(); ++i) EXPECT_NEAR(Vs[i], alpha * V[i], 1e-12);
}

TEST(DriftBatch, ValidationRejectsBadBatches) {
  const Tensor X = Tensor::zeros({3, 2, 4});
  EXPECT_THROW(DriftBatch::make(X, Tensor::zeros({3, 2, 5})).validate(), ShapeError);
  EXPECT_THROW(DriftBatch::make(X, Tensor::zeros({3, 2, 4}, true)).validate(), std::invalid_argument);
  DriftBatch b = DriftBatch::make(X, Tensor::zeros({3, 2, 4}));
  b.sigma = {1, 1, 0};
  EXPECT_THROW(b.validate(), std::invalid_argument);
  EXPECT_EQ(DriftBatch::cyclic_shift(4), (std::vector<std::size_t>{1, 2, 3, 0}));
}

TEST(DriftLoss, ZeroDriftGivesZeroLossAndGradient) {
  Tensor X({3, 1, 2}, std::vector<double>{1, 2, 1, 2, 1, 2}, true);
  const DriftLoss dl = drift_loss(DriftBatch::make(X, stop_gradient(X)), DriftConfig{});
  EXPECT_EQ(dl.loss.item(), 0.0);
  backward(dl.loss);
  for (double g : X.grad()) EXPECT_EQ(g, 0.0);
}

TEST(DriftLoss, SingleBandwidthValueIsRmsOfDrift) {
  CounterRng rng(5, 0);
  const Mat X = random_mat(4, 3, rng), Y = random_mat(4, 3, rng);
  DriftConfig cfg;
  cfg.bandwidths = {0.7};
  const DriftLoss dl = drift_loss(DriftBatch::make(from_mat(X), from_mat(Y)), cfg);
  double ss = 0;
  for (double v : dl.drifts[0]) ss += v * v;
  EXPECT_NEAR(dl.loss.item(), std::sqrt(ss / 4), 1e-12);
  EXPECT_NEAR(dl.normalizers[0], std::sqrt(ss / 4), 1e-15);
}

TEST(DriftLoss, AnalyticGradientIdentity) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    EXPECT_LE(drift_gradient_identity(6, 4, 5, DriftConfig{}, seed), 1e-10);
    EXPECT_LE(drift_gradient_identity(2, 1, 3, DriftConfig{}, seed), 1e-10);
  }
}

TEST(DriftLoss, NormalizerFloorApplies) {
  const Tensor X({2, 1, 1}, std::vector<double>{0.0, 1e-12}, true);
  DriftConfig cfg;
  cfg.bandwidths = {1.0};
  cfg.eps_rms = 1e-3;
  const DriftLoss dl = drift_loss(DriftBatch::make(X, Tensor({2, 1, 1}, std::vector<double>{0.0, 1e-12})), cfg);
  EXPECT_EQ(dl.normalizers[0], 1e-3);
}

TEST(DriftConfig, ValidationKeys) {
  DriftConfig c;
  c.bandwidths = {0.1, 0.1};
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "drift.bandwidths");
  }
  c = DriftConfig{};
  c.taps = {0};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_drift_space("pixel"), DriftSpace::pixel);
  EXPECT_THROW(parse_drift_space("latent"), ConfigError);
}

TEST(FeatureResidual, MeanRowDistance) {
  const Tensor X({2, 1, 2}, std::vector<double>{0, 0, 1, 1});
  const Tensor Y({2, 1, 2}, std::vector<double>{3, 4, 1, 1});
  EXPECT_DOUBLE_EQ(feature_residual(X, Y), 2.5);
}
