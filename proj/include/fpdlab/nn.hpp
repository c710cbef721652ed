#pragma once

// Parameter containers, initializers and the adaptive optimizer shared by the
// teacher, the student and the discriminator.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fpdlab/rng.hpp"
#include "fpdlab/tensor.hpp"

namespace fpdlab {

// FNV-1a over raw bytes; used for parameter checksums and file checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Ordered, named set of leaf tensors.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor t) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(t));
    return entries_.back().second;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& [_, t] : entries_) t.set_requires_grad(on);
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& [name, t] : entries_) {
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(t.values().data(), t.numel() * sizeof(double), h);
    }
    return h;
  }

  // Deep copy: new leaves, same values and trainability.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone(t.requires_grad()));
    return out;
  }

  // Copies values from another store with identical names and shapes.
  void assign(const ParamStore& other) {
    if (other.size() != size()) throw std::invalid_argument("ParamStore::assign: parameter count differs");
    for (auto& [name, t] : entries_) {
      const Tensor& src = other.get(name);
      if (src.shape() != t.shape())
        throw std::invalid_argument("ParamStore::assign: shape mismatch for '" + name + "'");
      auto dst = t.mutable_values();
      std::copy(src.values().begin(), src.values().end(), dst.begin());
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

inline Tensor normal_init(Shape shape, double stddev, CounterRng& rng, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Stable log-softmax over the last axis. The row max enters as a constant,
// which leaves the gradient unchanged because log-sum-exp is shift-invariant.
inline Tensor log_softmax(const Tensor& logits) {
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  Shape red = logits.shape();
  red.back() = 1;
  std::vector<double> mx(rows);
  const auto v = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    mx[r] = v[r * k];
    for (std::size_t j = 1; j < k; ++j) mx[r] = std::max(mx[r], v[r * k + j]);
  }
  const Tensor shift(red, std::move(mx));
  const Tensor centered = logits - shift;
  return centered - log(sum(exp(centered), -1, true));
}

// Per-parameter RMS-scaled gradient descent without momentum:
//   v <- beta v + (1 - beta) g^2,   p <- p - lr g / (sqrt(v / (1 - beta^t)) + eps)
struct RmsOptimizer {
  RmsOptimizer() = default;
  explicit RmsOptimizer(double learning_rate) : lr(learning_rate) {}

  double lr = 1e-3;
  double beta = 0.999;
  double eps = 1e-8;
  std::uint64_t steps = 0;
  std::vector<std::vector<double>> second_moment;

  void step(ParamStore& params) {
    if (second_moment.empty())
      for (const auto& [_, t] : params) second_moment.emplace_back(t.numel(), 0.0);
    if (second_moment.size() != params.size())
      throw std::logic_error("RmsOptimizer: parameter set changed between steps");
    ++steps;
    const double correction = 1.0 - std::pow(beta, static_cast<double>(steps));
    std::size_t k = 0;
    for (auto& [_, t] : params) {
      auto& v = second_moment[k++];
      if (!t.requires_grad()) continue;
      auto values = t.mutable_values();
      const auto g = t.grad();
      for (std::size_t i = 0; i < values.size(); ++i) {
        v[i] = beta * v[i] + (1.0 - beta) * g[i] * g[i];
        values[i] -= lr * g[i] / (std::sqrt(v[i] / correction) + eps);
      }
    }
  }
};

}  // namespace fpdlab
