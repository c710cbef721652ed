#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "fpdlab/gradcheck.hpp"
#include "fpdlab/metrics.hpp"
#include "fpdlab/toyworld.hpp"

using namespace fpdlab;

namespace {

WorldConfig enum_world(double rho = 0.1, int modes = 1) {
  WorldConfig c;
  c.K = 3;
  c.L = 4;
  c.C = 4;
  c.rho = rho;
  c.modes = modes;
  return c;
}

std::vector<TokenSeq> all_sequences(int K, int L) {
  std::vector<TokenSeq> out;
  std::size_t n = 1;
  for (int i = 0; i < L; ++i) n *= static_cast<std::size_t>(K);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sequence_at(i, K, L));
  return out;
}

}  // namespace

TEST(SequenceIndex, RoundTripsOverTheWholeSpace) {
  for (std::size_t i = 0; i < 81; ++i) EXPECT_EQ(sequence_index(sequence_at(i, 3, 4), 3), i);
  EXPECT_EQ(sequence_at(5, 3, 4), (TokenSeq{0, 0, 1, 2}));
}

TEST(WorldConfig, RejectsNonPositiveSizesWithKeyPath) {
  WorldConfig c = enum_world();
  c.K = 0;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "world.K");
  }
  c = enum_world();
  c.rho = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ExactProb, TemplateProbabilityByHand) {
  const World w(enum_world(0.1));
  for (int c = 0; c < 4; ++c)
    EXPECT_NEAR(w.data().exact_prob(w.data().templates(c)[0], c), std::pow(0.9 + 0.1 / 3, 4), 1e-15);
}

TEST(ExactProb, NormalizesOverAllSequences) {
  for (int modes : {1, 2, 3}) {
    const World w(enum_world(0.1, modes));
    for (int c = 0; c < 4; ++c) {
      double total = 0.0;
      for (const auto& z : all_sequences(3, 4)) total += w.data().exact_prob(z, c);
      EXPECT_NEAR(total, 1.0, 1e-12) << "modes " << modes;
    }
  }
}

TEST(ExactProb, FullNoiseIsUniform) {
  const World w(enum_world(1.0));
  for (const auto& z : all_sequences(3, 4)) EXPECT_NEAR(w.data().exact_prob(z, 2), 1.0 / 81.0, 1e-15);
}

TEST(ExactProb, MixtureIsWeightedSumOfComponents) {
  // Independent evaluation from the templates and weights.
  const World w(enum_world(0.1, 2));
  const auto& d = w.data();
  const TokenSeq z{0, 1, 2, 1};
  double expect = 0.0;
  for (std::size_t m = 0; m < 2; ++m) {
    double p = d.mode_weights()[m];
    for (int i = 0; i < 4; ++i) p *= (z[i] == d.templates(1)[m][i] ? 0.9 : 0.0) + 0.1 / 3;
    expect += p;
  }
  EXPECT_NEAR(d.exact_prob(z, 1), expect, 1e-15);
  EXPECT_DOUBLE_EQ(d.mode_weights()[0], 0.8);
}

TEST(SecondaryTemplates, DisagreeWithPrimaryEverywhere) {
  const World w(enum_world(0.1, 3));
  for (int c = 0; c < 4; ++c) {
    const auto& t = w.data().templates(c);
    for (std::size_t m = 1; m < t.size(); ++m)
      for (int i = 0; i < 4; ++i) EXPECT_NE(t[m][i], t[0][i]);
  }
}

TEST(SampleData, NoNoiseReturnsTemplate) {
  const World w(enum_world(0.0));
  for (const auto& z : w.data().sample(3, 200, 9)) EXPECT_EQ(z, w.data().templates(3)[0]);
}

TEST(SampleData, FullNoiseMarginalsUniform) {
  const World w(enum_world(1.0));
  std::vector<std::vector<double>> counts(4, std::vector<double>(3, 0.0));
  const std::size_t n = 10000;
  for (const auto& z : w.data().sample(0, n, 4))
    for (int i = 0; i < 4; ++i) counts[i][z[i]] += 1.0 / n;
  for (const auto& pos : counts)
    for (double f : pos) EXPECT_NEAR(f, 1.0 / 3.0, 0.02);
}

TEST(SampleData, EmpiricalMatchesClosedForm) {
  WorldConfig cfg = enum_world(0.1, 2);
  const World w(cfg);
  for (int c = 0; c < 4; ++c) {
    const auto samples = w.data().sample(c, 50000, 100 + c);
    EXPECT_LT(tv_distance(empirical_distribution(samples, 3, 4), data_distribution(w.data(), c)), 0.03);
  }
}

TEST(SampleData, SameSeedSameDraws) {
  const World w(enum_world());
  EXPECT_EQ(w.data().sample(1, 50, 3), w.data().sample(1, 50, 3));
  EXPECT_NE(w.data().sample(1, 50, 3), w.data().sample(1, 50, 4));
  EXPECT_THROW(w.data().sample(1, 0, 3), std::invalid_argument);
  EXPECT_THROW(w.data().sample(7, 1, 3), std::out_of_range);
}

TEST(Decoder, DeterministicAndShaped) {
  const World w(enum_world());
  const std::vector<TokenSeq> z{{0, 1, 2, 0}, {2, 2, 1, 0}};
  const std::vector<int> c{0, 3};
  const Tensor a = w.decode_tokens(z, c), b = w.decode_tokens(z, c);
  EXPECT_EQ(a.shape(), (Shape{2, 32}));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_THROW(w.decode_tokens(std::vector<TokenSeq>{{0, kMaskToken, 1, 1}}, std::vector<int>{0}),
               std::invalid_argument);
}

TEST(Decoder, InjectiveOnEnumerationPreset) {
  // Independent scan: minimum pairwise distance over all 81 sequences, per class.
  const World w(enum_world(0.02, 2));
  const auto all = all_sequences(3, 4);
  for (int c = 0; c < 4; ++c) {
    const Tensor x = w.decode_tokens(all, std::vector<int>(all.size(), c));
    double best = INFINITY;
    for (std::size_t a = 0; a < all.size(); ++a)
      for (std::size_t b = a + 1; b < all.size(); ++b) {
        double d2 = 0;
        for (std::size_t j = 0; j < 32; ++j) d2 += std::pow(x[a * 32 + j] - x[b * 32 + j], 2);
        best = std::min(best, std::sqrt(d2));
      }
    EXPECT_GE(best, 1e-6) << "class " << c;
  }
}

TEST(Decoder, GradientWrtEmbeddingsMatchesDifferences) {
  const World w(enum_world());
  const std::vector<int> cls{1, 2};
  CounterRng rng(8, 0);
  std::vector<double> e(2 * 4 * 8);
  for (double& v : e) v = rng.normal();
  Tensor leaf({8, 8}, e, true);
  backward(sum(w.decode(leaf, cls)));
  auto f = [&](const std::vector<double>& v) { return sum(w.decode(Tensor({8, 8}, v), cls)).item(); };
  for (std::size_t i = 0; i < e.size(); ++i) {
    auto up = e, down = e;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double num = (f(up) - f(down)) / 2e-5;
    EXPECT_LE(grad_error(leaf.grad()[i], num, GradTolerance{}), 1e-4) << i;
  }
}

TEST(Lift, SpatialShapeAndPoolingIsCellMean) {
  const World w(enum_world());
  const std::vector<TokenSeq> z{{0, 1, 2, 0}, {1, 1, 1, 1}, {2, 0, 0, 2}};
  const std::vector<int> c{0, 1, 2};
  const Tensor x = w.decode_tokens(z, c);
  const std::vector<int> taps{1, 2, 3, 4};
  const Tensor sp = w.lift(x, taps, true);
  EXPECT_EQ(sp.shape(), (Shape{3, 16, 24}));
  const Tensor pooled = w.lift(x, taps, false);
  EXPECT_EQ(pooled.shape(), (Shape{3, 4, 24}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t f = 0; f < 24; ++f) {
        double m = 0;
        for (std::size_t s = 0; s < 4; ++s) m += sp[(b * 16 + t * 4 + s) * 24 + f] / 4;
        EXPECT_NEAR(pooled[(b * 4 + t) * 24 + f], m, 1e-14);
      }
  const Tensor again = w.lift(x, taps, true);
  for (std::size_t i = 0; i < sp.numel(); ++i) EXPECT_EQ(sp[i], again[i]);
}

TEST(Lift, TapsAreUnitRms) {
  const World w(enum_world());
  const std::vector<TokenSeq> z{{0, 1, 2, 0}};
  const Tensor sp = w.lift(w.decode_tokens(z, std::vector<int>{0}), std::vector<int>{2}, true);
  double ms = 0;
  for (double v : sp.values()) ms += v * v / sp.numel();
  EXPECT_NEAR(ms, 1.0, 1e-9);
  EXPECT_THROW(w.lift(w.decode_tokens(z, std::vector<int>{0}), std::vector<int>{5}, true), std::invalid_argument);
}

TEST(World, FrozenParametersAndStoreRoundTrip) {
  const World w(enum_world(0.1, 2));
  for (const auto& [name, t] : w.params()) EXPECT_FALSE(t.requires_grad()) << name;
  const World back = World::from_store(w.config(), w.to_store());
  EXPECT_EQ(back.params().checksum(), w.params().checksum());
  const TokenSeq z{1, 0, 2, 2};
  for (int c = 0; c < 4; ++c) EXPECT_EQ(back.data().exact_prob(z, c), w.data().exact_prob(z, c));
}

TEST(World, SeedDeterminesEverything) {
  WorldConfig a = enum_world(), b = enum_world();
  b.seed = 2;
  EXPECT_EQ(World(a).params().checksum(), World(a).params().checksum());
  EXPECT_NE(World(a).params().checksum(), World(b).params().checksum());
}
