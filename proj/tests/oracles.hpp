#pragma once

#include <cmath>
#include <vector>

#include "fpdlab/rng.hpp"
#include "fpdlab/tensor.hpp"

namespace fpdlab::testing {

using Mat = std::vector<std::vector<double>>;

// Three-stage normalization written directly from the definition.
inline Mat oracle_affinity(const Mat& anchors, const Mat& targets, double h) {
  const std::size_t B = anchors.size();
  Mat k(B, std::vector<double>(B));
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) {
      double d2 = 0;
      for (std::size_t f = 0; f < anchors[i].size(); ++f) d2 += std::pow(anchors[i][f] - targets[j][f], 2);
      k[i][j] = std::exp(-std::sqrt(d2) / h);
    }
  for (auto& row : k) {
    double s = 0;
    for (double v : row) s += v;
    for (double& v : row) v /= s;
  }
  for (std::size_t j = 0; j < B; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < B; ++i) s += k[i][j];
    for (std::size_t i = 0; i < B; ++i) k[i][j] /= s;
  }
  for (auto& row : k) {
    double s = 0;
    for (double v : row) s += v;
    for (double& v : row) v /= s;
  }
  return k;
}

// Brute-force double loop over (i, j) for a single site.
inline Mat oracle_drift(const Mat& X, const Mat& Y, double h) {
  const std::size_t B = X.size(), F = X[0].size();
  Mat neg(B);
  for (std::size_t j = 0; j < B; ++j) neg[j] = X[(j + 1) % B];
  const Mat ap = oracle_affinity(X, Y, h), an = oracle_affinity(X, neg, h);
  Mat V(B, std::vector<double>(F, 0.0));
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j)
      for (std::size_t f = 0; f < F; ++f)
        V[i][f] += ap[i][j] * (Y[j][f] - X[i][f]) - an[i][j] * (neg[j][f] - X[i][f]);
  return V;
}

inline Tensor from_mat(const Mat& m) {
  std::vector<double> v;
  for (const auto& r : m) v.insert(v.end(), r.begin(), r.end());
  return Tensor({m.size(), 1, m[0].size()}, v);
}

inline Mat random_mat(std::size_t B, std::size_t F, CounterRng& rng) {
  Mat m(B, std::vector<double>(F));
  for (auto& r : m)
    for (double& v : r) v = rng.normal();
  return m;
}

}  // namespace fpdlab::testing
