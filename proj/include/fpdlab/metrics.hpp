#pragma once

// Evaluation: exact total variation over the enumerated token space, a
// Fréchet distance between pooled feature clouds, and the fixed-point residual.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpdlab/distill.hpp"
#include "fpdlab/drift.hpp"
#include "fpdlab/masking.hpp"
#include "fpdlab/teacher.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

inline constexpr std::size_t kEnumerationLimit = 100000;

inline std::size_t enumerable_space(int K, int L) {
  std::size_t n = 1;
  for (int i = 0; i < L; ++i) {
    n *= static_cast<std::size_t>(K);
    if (n > kEnumerationLimit)
      throw std::invalid_argument("tv_exact: K^L exceeds " + std::to_string(kEnumerationLimit) +
                                  " sequences; use frechet_proxy at this scale");
  }
  return n;
}

inline std::vector<double> data_distribution(const SyntheticDataset& data, int c) {
  const std::size_t n = enumerable_space(data.vocab(), data.length());
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = data.exact_prob(sequence_at(i, data.vocab(), data.length()), c);
  return p;
}

inline std::vector<double> empirical_distribution(std::span<const TokenSeq> samples, int K, int L) {
  if (samples.empty()) throw std::invalid_argument("empirical_distribution: no samples");
  std::vector<double> p(enumerable_space(K, L), 0.0);
  const double w = 1.0 / static_cast<double>(samples.size());
  for (const auto& z : samples) {
    if (!is_complete(z) || z.size() != static_cast<std::size_t>(L))
      throw std::invalid_argument("empirical_distribution: incomplete or mis-sized sample");
    p[sequence_index(z, K)] += w;
  }
  return p;
}

inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: support sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

// sampler(c, n, rng) -> n complete sequences.
template <class Sampler>
double tv_exact(const SyntheticDataset& data, Sampler&& sampler, int c, std::size_t n, std::uint64_t seed) {
  const auto truth = data_distribution(data, c);
  CounterRng rng(seed, 0x7E57);
  const std::vector<TokenSeq> samples = sampler(c, n, rng);
  return tv_distance(empirical_distribution(samples, data.vocab(), data.length()), truth);
}

// ---------------------------------------------------------------------------
// Fréchet distance

struct FrechetResult {
  double value = 0.0;
  bool regularized = false;
};

// rows: n x F, row-major.
inline FrechetResult frechet_proxy(std::span<const double> fake, std::span<const double> real, std::size_t F) {
  using Mat = Eigen::MatrixXd;
  using Vec = Eigen::VectorXd;
  if (F == 0 || fake.size() % F || real.size() % F) throw std::invalid_argument("frechet_proxy: ragged feature rows");
  const std::size_t nf = fake.size() / F, nr = real.size() / F;
  if (nf < F + 1 || nr < F + 1)
    throw std::invalid_argument("frechet_proxy: need at least " + std::to_string(F + 1) + " samples per side");

  auto stats = [F](std::span<const double> x, std::size_t n) {
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(F));
    Vec mu = m.colwise().mean();
    const Mat centered = m.rowwise() - mu.transpose();
    Mat cov = centered.transpose() * centered / static_cast<double>(n - 1);
    return std::pair{mu, cov};
  };
  auto [mu_f, cov_f] = stats(fake, nf);
  auto [mu_r, cov_r] = stats(real, nr);

  FrechetResult out;
  auto degenerate = [](const Mat& c) {
    Eigen::SelfAdjointEigenSolver<Mat> es(c);
    const double top = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    return es.eigenvalues().minCoeff() <= 1e-12 * top;
  };
  if (degenerate(cov_f) || degenerate(cov_r)) {
    out.regularized = true;
    cov_f.diagonal().array() += 1e-6;
    cov_r.diagonal().array() += 1e-6;
  }

  Eigen::SelfAdjointEigenSolver<Mat> ef(cov_f);
  const Vec sf = ef.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Mat root_f = ef.eigenvectors() * sf.asDiagonal() * ef.eigenvectors().transpose();
  Mat middle = root_f * cov_r * root_f;
  middle = 0.5 * (middle + middle.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> em(middle, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  out.value = (mu_f - mu_r).squaredNorm() + cov_f.trace() + cov_r.trace() - 2.0 * tr_sqrt;
  out.value = std::max(out.value, 0.0);
  return out;
}

// Pooled F-vectors of one backbone tap for a batch of sequences: n x F.
inline std::vector<double> pooled_features(const World& world, std::span<const TokenSeq> batch,
                                           std::span<const int> classes, int tap, std::size_t chunk = 1024) {
  std::vector<double> out;
  const int taps[] = {tap};
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t m = std::min(chunk, batch.size() - start);
    const Tensor f = world.lift(world.decode_tokens(batch.subspan(start, m), classes.subspan(start, m)), taps, false);
    out.insert(out.end(), f.values().begin(), f.values().end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixed-point residual

// Mean over n drafts of mean_{tap,cell} |lift(decode(z)) - lift(decode(target(z)))|.
// target(drafts, classes, rng) -> complete sequences.
template <class Target>
double fixed_point_residual(const World& world, const DenoiserNet& student, Target&& target,
                            const DistillConfig& cfg, const NoiseSchedule& schedule, const DriftConfig& drift,
                            std::size_t n, std::uint64_t seed, std::size_t chunk = 256) {
  if (n == 0) throw std::invalid_argument("fixed_point_residual: n must be positive");
  CounterRng rng(seed, 0xF1C5);
  const int C = world.config().C;
  double acc = 0.0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<int> cls(m);
    for (std::size_t i = 0; i < m; ++i) cls[i] = static_cast<int>((start + i) % static_cast<std::size_t>(C));
    const Draft d = student_draft(student, cls, cfg, schedule, rng);
    const std::vector<TokenSeq> t = target(d.tokens, cls, rng);
    const Tensor X = world.lift(world.decode_tokens(d.tokens, cls), drift.taps, drift.spatial);
    const Tensor Y = world.lift(world.decode_tokens(t, cls), drift.taps, drift.spatial);
    acc += feature_residual(X, Y) * static_cast<double>(m);
  }
  return acc / static_cast<double>(n);
}

inline double fixed_point_residual(const World& world, const DenoiserNet& student, const DenoiserNet& teacher,
                                   const DistillConfig& cfg, const NoiseSchedule& schedule, const DriftConfig& drift,
                                   const RefineOptions& refine, std::size_t n, std::uint64_t seed) {
  auto target = [&](std::span<const TokenSeq> drafts, std::span<const int> cls, CounterRng& rng) {
    return make_target(teacher, drafts, cls, cfg, schedule, rng, refine);
  };
  return fixed_point_residual(world, student, target, cfg, schedule, drift, n, seed);
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::string model;
  std::optional<std::size_t> steps;  // sampler steps for a teacher
  std::map<int, double> tv_by_condition;
  std::optional<double> frechet;
  bool frechet_regularized = false;
  std::optional<double> fp_residual;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
  std::string fingerprint;

  double tv_mean() const {
    double s = 0.0;
    for (const auto& [_, v] : tv_by_condition) s += v;
    return tv_by_condition.empty() ? 0.0 : s / static_cast<double>(tv_by_condition.size());
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "model=" << model << "\n";
    if (steps) os << "steps=" << *steps << "\n";
    os << "sample_count=" << sample_count << "\n";
    os << "seed=" << seed << "\n";
    os << "fingerprint=" << fingerprint << "\n";
    for (const auto& [c, v] : tv_by_condition) os << "tv." << c << "=" << v << "\n";
    if (!tv_by_condition.empty()) os << "tv.mean=" << tv_mean() << "\n";
    if (frechet) {
      os << "frechet=" << *frechet << "\n";
      os << "frechet.regularized=" << (frechet_regularized ? "true" : "false") << "\n";
    }
    if (fp_residual) os << "fp_residual=" << *fp_residual << "\n";
    return os.str();
  }
};

}  // namespace fpdlab
