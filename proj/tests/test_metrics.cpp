#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fpdlab/metrics.hpp"
#include "presets.hpp"

using namespace fpdlab;

namespace {

WorldConfig world_cfg(double rho) {
  WorldConfig c = fpdlab::testing::enum_world_config();
  c.rho = rho;
  c.modes = 1;
  return c;
}

// Independent Gaussian columns with given means and standard deviations.
std::vector<double> gaussian_cloud(const std::vector<double>& mu, const std::vector<double>& sd, std::size_t n,
                                   std::uint64_t seed) {
  CounterRng rng(seed, 0);
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < mu.size(); ++k) out.push_back(mu[k] + sd[k] * rng.normal());
  return out;
}

}  // namespace

TEST(TvExact, DataSamplerIsClose) {
  const World w(world_cfg(0.1));
  for (int c = 0; c < 4; ++c) {
    const double tv = tv_exact(
        w.data(), [&](int cc, std::size_t n, CounterRng& r) { return w.data().sample(cc, n, r); }, c, 50000, 3);
    EXPECT_LT(tv, 0.03);
    EXPECT_GE(tv, 0.0);
  }
}

TEST(TvExact, PointMassAgainstUniform) {
  const World w(world_cfg(1.0));
  const double tv = tv_exact(
      w.data(), [](int, std::size_t n, CounterRng&) { return std::vector<TokenSeq>(n, TokenSeq{0, 1, 2, 0}); }, 0,
      100, 1);
  EXPECT_NEAR(tv, 1.0 - 1.0 / 81.0, 1e-12);
}

TEST(TvDistance, ExactWeightsGiveZero) {
  const World w(world_cfg(0.1));
  const auto p = data_distribution(w.data(), 2);
  EXPECT_NEAR(tv_distance(p, p), 0.0, 1e-12);
  double total = 0;
  for (double v : p) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  const std::vector<double> a{1, 0}, b{0, 1};
  EXPECT_EQ(tv_distance(a, b), 1.0);
  EXPECT_THROW(tv_distance(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(TvExact, RejectsSpacesTooLargeToEnumerate) {
  EXPECT_NO_THROW(enumerable_space(10, 5));
  try {
    enumerable_space(16, 16);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("frechet_proxy"), std::string::npos);
  }
}

TEST(Frechet, IdenticalSetsGiveZero) {
  const auto x = gaussian_cloud({1, -2, 0.5}, {1, 0.3, 2}, 500, 4);
  const FrechetResult r = frechet_proxy(x, x, 3);
  EXPECT_NEAR(r.value, 0.0, 1e-8);
  EXPECT_FALSE(r.regularized);
}

TEST(Frechet, PointMassesGiveSquaredMeanGap) {
  std::vector<double> a, b;
  for (int i = 0; i < 10; ++i) {
    a.insert(a.end(), {0.0, 0.0, 0.0});
    b.insert(b.end(), {3.0, 0.0, 4.0});
  }
  const FrechetResult r = frechet_proxy(a, b, 3);
  EXPECT_NEAR(r.value, 25.0, 1e-9);
  EXPECT_TRUE(r.regularized);
}

TEST(Frechet, GaussianClosedForm) {
  // Diagonal covariances commute: d = |mu1 - mu2|^2 + sum (s1 - s2)^2.
  const std::vector<double> m1{0, 1, -1, 2}, s1{1.0, 0.5, 2.0, 1.5};
  const std::vector<double> m2{1, 1, 0, 0}, s2{2.0, 0.5, 1.0, 0.5};
  double expect = 0;
  for (int k = 0; k < 4; ++k) expect += std::pow(m1[k] - m2[k], 2) + std::pow(s1[k] - s2[k], 2);
  const FrechetResult r =
      frechet_proxy(gaussian_cloud(m1, s1, 5000, 5), gaussian_cloud(m2, s2, 5000, 6), 4);
  EXPECT_NEAR(r.value, expect, 0.05 * expect);
}

TEST(Frechet, RotatedCovarianceMatchesClosedForm) {
  // Rotating both clouds by the same orthogonal map leaves the distance unchanged.
  const std::vector<double> m1{0, 0}, s1{1.0, 3.0}, m2{1, 2}, s2{2.0, 1.0};
  auto rotate = [](std::vector<double> x) {
    const double c = std::cos(0.6), s = std::sin(0.6);
    for (std::size_t i = 0; i < x.size(); i += 2) {
      const double a = x[i], b = x[i + 1];
      x[i] = c * a - s * b;
      x[i + 1] = s * a + c * b;
    }
    return x;
  };
  const double expect = 1 + 4 + 1 + 4;
  const FrechetResult r =
      frechet_proxy(rotate(gaussian_cloud(m1, s1, 5000, 7)), rotate(gaussian_cloud(m2, s2, 5000, 8)), 2);
  EXPECT_NEAR(r.value, expect, 0.05 * expect);
}

TEST(Frechet, NeedsEnoughSamples) {
  const std::vector<double> few(9, 0.0);
  EXPECT_THROW(frechet_proxy(few, few, 3), std::invalid_argument);
  EXPECT_THROW(frechet_proxy(std::vector<double>(10, 0.0), few, 3), std::invalid_argument);
}

TEST(PooledFeatures, ShapeIsSamplesByF) {
  const World w(world_cfg(0.1));
  const auto z = w.data().sample(0, 10, 1);
  const auto f = pooled_features(w, z, std::vector<int>(10, 0), 4, 3);
  EXPECT_EQ(f.size(), 10u * 24u);
  const auto g = pooled_features(w, z, std::vector<int>(10, 0), 4, 1024);
  EXPECT_EQ(f, g);
}

TEST(FixedPointResidual, IdentityRefinementGivesZero) {
  const World w(world_cfg(0.1));
  const DenoiserNet student(w, {16, 32, 1}, 2);
  auto identity = [](std::span<const TokenSeq> drafts, std::span<const int>, CounterRng&) {
    return std::vector<TokenSeq>(drafts.begin(), drafts.end());
  };
  EXPECT_EQ(fixed_point_residual(w, student, identity, DistillConfig{}, NoiseSchedule{}, DriftConfig{}, 100, 1), 0.0);
}

TEST(FixedPointResidual, NonNegativeAndReproducible) {
  const World w(world_cfg(0.1));
  const DenoiserNet student(w, {16, 32, 1}, 2), teacher(w, {16, 32, 1}, 3);
  const RefineOptions ro;
  const double a = fixed_point_residual(w, student, teacher, DistillConfig{}, NoiseSchedule{}, DriftConfig{}, ro, 64, 4);
  const double b = fixed_point_residual(w, student, teacher, DistillConfig{}, NoiseSchedule{}, DriftConfig{}, ro, 64, 4);
  EXPECT_GT(a, 0.0);
  EXPECT_EQ(a, b);
}

TEST(EvalReport, TextListsEveryField) {
  EvalReport r;
  r.model = "teacher";
  r.steps = 8;
  r.tv_by_condition = {{0, 0.1}, {1, 0.3}};
  r.frechet = 1.5;
  r.fp_residual = 0.25;
  r.sample_count = 100;
  r.seed = 9;
  r.fingerprint = "abc";
  const std::string t = r.to_text();
  EXPECT_DOUBLE_EQ(r.tv_mean(), 0.2);
  for (const char* key : {"model=teacher", "steps=8", "tv.0=0.1", "tv.mean=0.2", "frechet=1.5",
                          "frechet.regularized=false", "fp_residual=0.25", "sample_count=100", "seed=9"})
    EXPECT_NE(t.find(key), std::string::npos) << key;
}
