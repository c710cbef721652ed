#pragma once

// Absorbing-state forward process, re-masking and confidence-ranked reveal.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpdlab/rng.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("schedule.kind", "expected linear|cosine, got '" + s + "'");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

// Monotone gamma: [0,1] -> [0,1] with gamma(0) = 0 and gamma(1) = 1 exactly.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::cosine;

  double gamma(double t) const {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    if (kind == ScheduleKind::linear) return t;
    return 1.0 - std::cos(std::numbers::pi * t / 2.0);
  }

  // Smallest t with gamma(t) >= r, by bisection to 1e-9.
  double inverse(double r) const {
    if (r <= 0.0) return 0.0;
    if (r >= 1.0) return 1.0;
    double lo = 0.0, hi = 1.0;
    while (hi - lo > 1e-9) {
      const double mid = 0.5 * (lo + hi);
      (gamma(mid) < r ? lo : hi) = mid;
    }
    return hi;
  }
};

// ceil(r * n), tolerant of products that land a rounding error above an integer.
inline std::size_t ceil_count(double r, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(r * static_cast<double>(n) - 1e-9));
}

struct MaskState {
  TokenSeq tokens;
  std::vector<std::size_t> mask_set;  // ascending

  static MaskState from_tokens(TokenSeq tokens) {
    MaskState s{std::move(tokens), {}};
    for (std::size_t i = 0; i < s.tokens.size(); ++i)
      if (s.tokens[i] == kMaskToken) s.mask_set.push_back(i);
    return s;
  }

  bool consistent() const {
    std::vector<std::size_t> expect;
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] == kMaskToken) expect.push_back(i);
    return expect == mask_set;
  }

  bool complete() const { return mask_set.empty(); }
  std::size_t masked() const { return mask_set.size(); }
};

// Each position independently becomes the mask symbol with probability gamma(t).
inline MaskState corrupt(const TokenSeq& z, double t, const NoiseSchedule& schedule, CounterRng& rng) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("corrupt: t must lie in [0,1], got " + std::to_string(t));
  if (!is_complete(z)) throw std::invalid_argument("corrupt: input sequence must be complete");
  const double g = schedule.gamma(t);
  TokenSeq out = z;
  for (int& v : out)
    if (rng.uniform() < g) v = kMaskToken;
  return MaskState::from_tokens(std::move(out));
}

// Uniform subset of exactly `count` positions out of n (partial Fisher-Yates).
inline std::vector<std::size_t> choose_positions(std::size_t n, std::size_t count, CounterRng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// M_r: masks exactly ceil(r L) positions chosen uniformly without replacement.
inline MaskState remask(const TokenSeq& z, double r, CounterRng& rng) {
  if (!(r > 0.0 && r < 1.0)) throw std::invalid_argument("remask: ratio must lie in (0,1), got " + std::to_string(r));
  if (!is_complete(z)) throw std::invalid_argument("remask: input sequence must be complete");
  TokenSeq out = z;
  for (std::size_t i : choose_positions(z.size(), ceil_count(r, z.size()), rng)) out[i] = kMaskToken;
  return MaskState::from_tokens(std::move(out));
}

// ceil(r_init L) masked positions; the rest are uniform random tokens.
inline MaskState init_draft(double r_init, std::size_t L, int K, CounterRng& rng) {
  if (!(r_init > 0.0 && r_init <= 1.0))
    throw std::invalid_argument("init_draft: ratio must lie in (0,1], got " + std::to_string(r_init));
  TokenSeq out(L);
  for (int& v : out) v = static_cast<int>(rng.below(static_cast<std::size_t>(K)));
  for (std::size_t i : choose_positions(L, std::min(L, ceil_count(r_init, L)), rng)) out[i] = kMaskToken;
  return MaskState::from_tokens(std::move(out));
}

// The `keep` masked positions whose sampled token carries the most probability
// mass; ties go to the lower position. probs is row-major L x K.
inline std::vector<std::size_t> select_top_confidence(std::span<const double> probs, std::size_t K,
                                                      std::span<const int> sampled,
                                                      std::span<const std::size_t> mask_set, std::size_t keep) {
  if (keep > mask_set.size())
    throw std::invalid_argument("select_top_confidence: keep " + std::to_string(keep) + " exceeds " +
                                std::to_string(mask_set.size()) + " masked positions");
  std::vector<std::size_t> order(mask_set.begin(), mask_set.end());
  auto confidence = [&](std::size_t i) { return probs[i * K + static_cast<std::size_t>(sampled[i])]; };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ca = confidence(a), cb = confidence(b);
    return ca != cb ? ca > cb : a < b;
  });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace fpdlab
