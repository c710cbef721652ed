#pragma once

// Lifted particle objective: Laplace-kernel affinities with one Sinkhorn-style
// normalization pass, attractive/repulsive drift vectors and the
// multi-bandwidth stop-gradient regression loss.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpdlab/tensor.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

enum class DriftSpace { feature, pixel };

inline DriftSpace parse_drift_space(const std::string& s) {
  if (s == "feature") return DriftSpace::feature;
  if (s == "pixel") return DriftSpace::pixel;
  throw ConfigError("drift.space", "expected feature|pixel, got '" + s + "'");
}

inline std::string to_string(DriftSpace s) { return s == DriftSpace::feature ? "feature" : "pixel"; }

struct DriftConfig {
  std::vector<double> bandwidths{0.02, 0.05, 0.2};
  double eps_rms = 1e-8;
  DriftSpace space = DriftSpace::feature;
  std::vector<int> taps{1, 2, 3, 4};
  bool spatial = true;

  void validate() const {
    if (bandwidths.empty()) throw ConfigError("drift.bandwidths", "at least one bandwidth required");
    for (std::size_t i = 0; i < bandwidths.size(); ++i) {
      if (!(bandwidths[i] > 0.0)) throw ConfigError("drift.bandwidths", "bandwidths must be positive");
      for (std::size_t j = 0; j < i; ++j)
        if (bandwidths[i] == bandwidths[j]) throw ConfigError("drift.bandwidths", "bandwidths must be distinct");
    }
    if (!(eps_rms > 0.0)) throw ConfigError("drift.eps", "must be positive");
    if (taps.empty()) throw ConfigError("drift.taps", "tap set must be nonempty");
    for (int t : taps)
      if (t < 1 || t > World::kTaps) throw ConfigError("drift.taps", "taps must lie in 1..4");
  }
};

// Affinities between anchors a_i and targets t_j (both B x F, row-major):
// S_ij = exp(-|a_i - t_j| / h), softmax over j, then each column divided by
// its sum, then each row renormalized to sum 1.
inline std::vector<double> affinities(std::span<const double> anchors, std::span<const double> targets,
                                      std::size_t B, std::size_t F, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("affinities: bandwidth must be positive");
  if (B < 2) throw std::invalid_argument("affinities: need at least 2 batch elements");
  std::vector<double> a(B * B);
  for (std::size_t i = 0; i < B; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < B; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < F; ++k) {
        const double diff = anchors[i * F + k] - targets[j * F + k];
        d2 += diff * diff;
      }
      a[i * B + j] = -std::sqrt(d2) / h;
      mx = std::max(mx, a[i * B + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < B; ++j) z += (a[i * B + j] = std::exp(a[i * B + j] - mx));
    for (std::size_t j = 0; j < B; ++j) a[i * B + j] /= z;
  }
  for (std::size_t j = 0; j < B; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < B; ++i) col += a[i * B + j];
    for (std::size_t i = 0; i < B; ++i) a[i * B + j] /= col;
  }
  for (std::size_t i = 0; i < B; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < B; ++j) row += a[i * B + j];
    for (std::size_t j = 0; j < B; ++j) a[i * B + j] /= row;
  }
  return a;
}

// Student features X and teacher-target features Y, both [B, sites, F].
// Negatives for row j come from X at sigma(j).
struct DriftBatch {
  Tensor X;
  Tensor Y;
  std::vector<std::size_t> sigma;

  static std::vector<std::size_t> cyclic_shift(std::size_t B) {
    std::vector<std::size_t> s(B);
    for (std::size_t j = 0; j < B; ++j) s[j] = (j + 1) % B;
    return s;
  }

  static DriftBatch make(Tensor X, Tensor Y) {
    const std::size_t B = X.ndim() ? X.shape()[0] : 0;
    return DriftBatch{std::move(X), std::move(Y), cyclic_shift(B)};
  }

  std::size_t batch() const { return X.shape()[0]; }
  std::size_t sites() const { return X.shape()[1]; }
  std::size_t width() const { return X.shape()[2]; }

  void validate() const {
    if (X.ndim() != 3) detail::shape_fail("drift", "features must be [B, sites, F], got " + shape_str(X.shape()));
    if (X.shape() != Y.shape())
      detail::shape_fail("drift", "student " + shape_str(X.shape()) + " and target " + shape_str(Y.shape()) +
                                      " features differ in shape");
    if (Y.requires_grad()) throw std::invalid_argument("drift: target features must be detached");
    if (batch() < 2) throw std::invalid_argument("drift: batch must hold at least 2 elements");
    if (sigma.size() != batch()) throw std::invalid_argument("drift: shift must have one entry per batch element");
    std::vector<bool> hit(batch(), false);
    for (std::size_t s : sigma) {
      if (s >= batch() || hit[s]) throw std::invalid_argument("drift: shift must be a permutation");
      hit[s] = true;
    }
  }
};

// V_h(X_i^f) = sum_j a+_ij (Y_j^f - X_i^f) - sum_j a-_ij (X_sigma(j)^f - X_i^f),
// independently per site f. Returned as plain values shaped like X.
inline std::vector<double> drift_vector(const DriftBatch& batch, double h) {
  batch.validate();
  const std::size_t B = batch.batch(), S = batch.sites(), F = batch.width();
  const auto xv = batch.X.values();
  const auto yv = batch.Y.values();
  std::vector<double> V(B * S * F, 0.0);
  std::vector<double> anchors(B * F), pos(B * F), neg(B * F);
  for (std::size_t f = 0; f < S; ++f) {
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < F; ++k) {
        anchors[i * F + k] = xv[(i * S + f) * F + k];
        pos[i * F + k] = yv[(i * S + f) * F + k];
        neg[i * F + k] = xv[(batch.sigma[i] * S + f) * F + k];
      }
    const auto ap = affinities(anchors, pos, B, F, h);
    const auto an = affinities(anchors, neg, B, F, h);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < F; ++k) {
        double v = 0.0;
        for (std::size_t j = 0; j < B; ++j) {
          v += ap[i * B + j] * (pos[j * F + k] - anchors[i * F + k]);
          v -= an[i * B + j] * (neg[j * F + k] - anchors[i * F + k]);
        }
        V[(i * S + f) * F + k] = v;
      }
  }
  return V;
}

struct DriftLoss {
  Tensor loss;
  std::vector<double> normalizers;  // Z_h
  std::vector<double> terms;        // per-bandwidth contribution
  std::vector<std::vector<double>> drifts;
};

// sum_h (1/Z_h) mean_{i,f} |X_i^f - sg(X_i^f + V_h(X_i^f))|^2 with
// Z_h = max(RMS_{i,f} |V_h|, eps). Only the anchor copy of X is live.
inline DriftLoss drift_loss(const DriftBatch& batch, const DriftConfig& cfg) {
  cfg.validate();
  batch.validate();
  const std::size_t B = batch.batch(), S = batch.sites(), F = batch.width();
  const double N = static_cast<double>(B * S);
  DriftLoss out;
  Tensor total = Tensor::scalar(0.0);
  for (double h : cfg.bandwidths) {
    std::vector<double> V = drift_vector(batch, h);
    double ss = 0.0;
    for (double v : V) ss += v * v;
    const double Z = std::max(std::sqrt(ss / N), cfg.eps_rms);
    const Tensor target = stop_gradient(batch.X + Tensor(batch.X.shape(), V));
    const Tensor term = scale(sum(square(batch.X - target)), 1.0 / (N * Z));
    out.normalizers.push_back(Z);
    out.terms.push_back(term.item());
    out.drifts.push_back(std::move(V));
    total = total + term;
  }
  (void)F;
  out.loss = total;
  return out;
}

// Mean over (i, f) of |X_i^f - Y_i^f|.
inline double feature_residual(const Tensor& X, const Tensor& Y) {
  const std::size_t F = X.shape().back();
  const std::size_t rows = X.numel() / F;
  const auto xv = X.values();
  const auto yv = Y.values();
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < F; ++k) d2 += (xv[r * F + k] - yv[r * F + k]) * (xv[r * F + k] - yv[r * F + k]);
    acc += std::sqrt(d2);
  }
  return acc / static_cast<double>(rows);
}

}  // namespace fpdlab
