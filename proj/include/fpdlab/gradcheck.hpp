#pragma once

// Central finite-difference checks for every autodiff primitive, plus the
// straight-through dual-path identity and the drift analytic-gradient
// identity.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fpdlab/distill.hpp"
#include "fpdlab/drift.hpp"
#include "fpdlab/nn.hpp"
#include "fpdlab/rng.hpp"
#include "fpdlab/tensor.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

struct GradTolerance {
  double rel = 1e-4;
  double abs = 1e-6;
  double step = 1e-5;
};

// |a - n| / max(|a|, |n|, abs/rel): at most `rel` iff the pair is within
// `rel` relatively or within `abs` absolutely.
inline double grad_error(double analytic, double numeric, const GradTolerance& tol) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), tol.abs / tol.rel});
}

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Max grad_error over every element of every input. Inputs must be leaves.
inline double finite_difference_error(const LossFn& f, std::vector<Tensor>& inputs, const GradTolerance& tol = {}) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  backward(f(inputs));
  double worst = 0.0;
  for (auto& x : inputs) {
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto v = x.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + tol.step;
      const double up = f(inputs).item();
      v[i] = keep - tol.step;
      const double down = f(inputs).item();
      v[i] = keep;
      worst = std::max(worst, grad_error(analytic[i], (up - down) / (2.0 * tol.step), tol));
    }
  }
  return worst;
}

struct GradCase {
  std::string primitive;
  Shape shape;
  std::vector<Tensor> inputs;
  LossFn op;  // tensor-valued; contracted with fixed random weights
};

struct GradRow {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  bool passed = false;
};

namespace detail {

inline Tensor randn(Shape s, CounterRng& rng) {
  std::vector<double> v(fpdlab::numel(s));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(s), std::move(v));
}

// Values bounded away from 0 by at least `gap`, keeping kinks out of reach of the step.
inline Tensor randn_away(Shape s, double gap, CounterRng& rng) {
  std::vector<double> v(fpdlab::numel(s));
  for (double& x : v) {
    x = rng.normal();
    x += x < 0 ? -gap : gap;
  }
  return Tensor(std::move(s), std::move(v));
}

inline Tensor positive(Shape s, CounterRng& rng) {
  std::vector<double> v(fpdlab::numel(s));
  for (double& x : v) x = 0.5 + rng.uniform() * 2.0;
  return Tensor(std::move(s), std::move(v));
}

}  // namespace detail

// Three or more shapes per primitive, broadcasting included.
inline std::vector<GradCase> primitive_cases(std::uint64_t seed = 1) {
  CounterRng rng(seed, 0x6C);
  using detail::positive;
  using detail::randn;
  using detail::randn_away;
  using V = const std::vector<Tensor>&;
  std::vector<GradCase> cs;
  auto add_case = [&](std::string name, Shape s, std::vector<Tensor> in, LossFn op) {
    cs.push_back({std::move(name), std::move(s), std::move(in), std::move(op)});
  };

  const std::vector<std::pair<Shape, Shape>> pairs = {{{5}, {5}}, {{3, 4}, {4}}, {{2, 3, 4}, {3, 1}}, {{2, 1, 3}, {2, 4, 1}}};
  for (const auto& [sa, sb] : pairs) {
    add_case("add", sa, {randn(sa, rng), randn(sb, rng)}, [](V x) { return x[0] + x[1]; });
    add_case("sub", sa, {randn(sa, rng), randn(sb, rng)}, [](V x) { return x[0] - x[1]; });
    add_case("mul", sa, {randn(sa, rng), randn(sb, rng)}, [](V x) { return x[0] * x[1]; });
    add_case("div", sa, {randn(sa, rng), positive(sb, rng)}, [](V x) { return x[0] / x[1]; });
  }
  const std::vector<Shape> shapes = {{7}, {3, 5}, {2, 3, 4}};
  for (const auto& s : shapes) {
    add_case("scale", s, {randn(s, rng)}, [](V x) { return scale(x[0], -1.7); });
    add_case("exp", s, {randn(s, rng)}, [](V x) { return exp(x[0]); });
    add_case("log", s, {positive(s, rng)}, [](V x) { return log(x[0]); });
    add_case("square", s, {randn(s, rng)}, [](V x) { return square(x[0]); });
    add_case("sqrt", s, {positive(s, rng)}, [](V x) { return sqrt(x[0]); });
    add_case("tanh", s, {randn(s, rng)}, [](V x) { return tanh(x[0]); });
    add_case("relu", s, {randn_away(s, 0.05, rng)}, [](V x) { return relu(x[0]); });
    add_case("gelu", s, {randn(s, rng)}, [](V x) { return gelu(x[0]); });
    add_case("softplus", s, {randn(s, rng)}, [](V x) { return softplus(x[0]); });
    add_case("sum", s, {randn(s, rng)}, [](V x) { return sum(x[0]); });
    add_case("sum_axis", s, {randn(s, rng)}, [](V x) { return sum(x[0], 0); });
    add_case("mean", s, {randn(s, rng)}, [](V x) { return mean(x[0], -1, true); });
    add_case("softmax", s, {randn(s, rng)}, [](V x) { return softmax(x[0], -1); });
    add_case("layer_norm", s, {randn(s, rng)}, [](V x) { return layer_norm(x[0]); });
    add_case("log_softmax", s, {randn(s, rng)}, [](V x) { return log_softmax(x[0]); });
    add_case("broadcast", s, {randn({1, s.back()}, rng)}, [s](V x) {
      Shape t = s;
      if (t.size() == 1) t.insert(t.begin(), 2);
      return broadcast_to(x[0], t);
    });
  }
  add_case("softmax", {3, 4}, {randn({3, 4}, rng)}, [](V x) { return softmax(x[0], 0); });
  add_case("softmax", {2, 3, 4}, {randn({2, 3, 4}, rng)}, [](V x) { return softmax(x[0], 1); });

  add_case("matmul", {3, 4}, {randn({3, 5}, rng), randn({5, 4}, rng)}, [](V x) { return matmul(x[0], x[1]); });
  add_case("matmul", {2, 3, 4}, {randn({2, 3, 5}, rng), randn({5, 4}, rng)}, [](V x) { return matmul(x[0], x[1]); });
  add_case("matmul", {2, 3, 4}, {randn({3, 5}, rng), randn({2, 5, 4}, rng)}, [](V x) { return matmul(x[0], x[1]); });
  add_case("matmul", {2, 3, 4}, {randn({2, 3, 5}, rng), randn({2, 5, 4}, rng)}, [](V x) { return matmul(x[0], x[1]); });

  const std::vector<std::pair<Shape, std::vector<int>>> gathers = {
      {{4, 3}, {0, 2, 2, 3}}, {{5, 2}, {4, 4, 4}}, {{3, 6}, {1, 0, 2, 1, 0}}};
  for (const auto& [s, idx] : gathers)
    add_case("gather_rows", s, {randn(s, rng)}, [idx](V x) { return gather_rows(x[0], idx); });

  add_case("reshape", {6}, {randn({2, 3}, rng)}, [](V x) { return reshape(x[0], {6}); });
  add_case("reshape", {3, 4}, {randn({2, 6}, rng)}, [](V x) { return reshape(x[0], {3, 4}); });
  add_case("reshape", {2, 2, 3}, {randn({12}, rng)}, [](V x) { return reshape(x[0], {2, 2, 3}); });

  add_case("concat", {5}, {randn({2}, rng), randn({3}, rng)}, [](V x) { return concat({x[0], x[1]}, 0); });
  add_case("concat", {3, 5}, {randn({3, 2}, rng), randn({3, 3}, rng)}, [](V x) { return concat({x[0], x[1]}, 1); });
  add_case("concat", {2, 5, 2}, {randn({2, 1, 2}, rng), randn({2, 3, 2}, rng), randn({2, 1, 2}, rng)},
           [](V x) { return concat({x[0], x[1], x[2]}, 1); });

  add_case("slice", {2}, {randn({5}, rng)}, [](V x) { return slice(x[0], 0, 1, 3); });
  add_case("slice", {3, 2}, {randn({3, 4}, rng)}, [](V x) { return slice(x[0], 1, 2, 4); });
  add_case("slice", {2, 1, 4}, {randn({2, 3, 4}, rng)}, [](V x) { return slice(x[0], 1, 1, 2); });
  return cs;
}

// Contracts op(x) with fixed N(0,1) weights so every output element matters.
inline double check_case(GradCase& c, std::uint64_t seed, const GradTolerance& tol = {}) {
  CounterRng rng(seed, 0x77);
  const Tensor probe = c.op(c.inputs);
  const Tensor w = detail::randn(probe.shape(), rng);
  const LossFn loss = [&](const std::vector<Tensor>& x) { return sum(c.op(x) * w); };
  return finite_difference_error(loss, c.inputs, tol);
}

// stop_gradient: values pass through unchanged, no gradient reaches the input.
inline double stop_gradient_error(std::uint64_t seed) {
  CounterRng rng(seed, 0x56);
  double worst = 0.0;
  for (const Shape& s : std::vector<Shape>{{4}, {2, 3}, {2, 2, 3}}) {
    Tensor x = detail::randn(s, rng).clone(true);
    const Tensor y = stop_gradient(x);
    for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
    backward(sum(square(y)) + sum(x));
    for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(x.grad()[i] - 1.0));
  }
  return worst;
}

// One row per primitive with the worst error over its shapes.
inline std::vector<GradRow> run_primitive_suite(std::uint64_t seed = 1, const GradTolerance& tol = {}) {
  std::vector<GradRow> rows;
  auto cases = primitive_cases(seed);
  std::uint64_t k = 0;
  for (auto& c : cases) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const GradRow& r) { return r.name == c.primitive; });
    if (it == rows.end()) {
      rows.push_back({c.primitive, 0, 0.0, true});
      it = rows.end() - 1;
    }
    const double e = check_case(c, seed * 1000 + ++k, tol);
    it->cases++;
    it->max_error = std::max(it->max_error, e);
    it->passed = it->max_error <= tol.rel;
  }
  const double sg = stop_gradient_error(seed);
  rows.push_back({"stop_gradient", 3, sg, sg == 0.0});
  return rows;
}

// ---------------------------------------------------------------------------
// Straight-through estimator

struct SteCheck {
  bool forward_bit_exact = false;
  double max_grad_diff = 0.0;
};

// Path A backpropagates a loss through ste_embed. Path B contracts the soft
// embedding alone with the upstream gradient that path A sees at E[z]. The
// logit gradients must agree.
inline SteCheck ste_identity(const World& world, std::size_t B, std::uint64_t seed) {
  CounterRng rng(seed, 0x57E);
  const std::size_t L = static_cast<std::size_t>(world.L()), K = static_cast<std::size_t>(world.K());
  std::vector<int> classes(B);
  for (int& c : classes) c = static_cast<int>(rng.below(static_cast<std::size_t>(world.config().C)));
  const Tensor logits = detail::randn({B, L, K}, rng).clone(true);
  const Tensor probs = softmax(logits, -1);
  const std::vector<TokenSeq> tokens = sample_rows(probs, L, rng);
  const Tensor& E = world.codebook();
  const int taps[] = {2, 4};
  const Tensor wout = detail::randn({B, 2 * world.cells(), static_cast<std::size_t>(world.config().F)}, rng);
  auto head = [&](const Tensor& e) { return sum(world.lift(world.decode(e, classes), taps, true) * wout); };

  SteCheck out;
  const Tensor e_ste = ste_embed(tokens, probs, E);
  const Tensor hard = world.embed(tokens);
  out.forward_bit_exact = e_ste.shape() == hard.shape() &&
                          std::equal(e_ste.values().begin(), e_ste.values().end(), hard.values().begin());

  backward(head(e_ste));
  const std::vector<double> grad_a(logits.grad().begin(), logits.grad().end());

  const Tensor e_leaf = hard.clone(true);
  backward(head(e_leaf));
  const Tensor upstream(e_leaf.shape(), std::vector<double>(e_leaf.grad().begin(), e_leaf.grad().end()));
  logits.node()->grad.assign(logits.numel(), 0.0);
  backward(sum(soft_embed(probs, E) * upstream));
  for (std::size_t i = 0; i < grad_a.size(); ++i)
    out.max_grad_diff = std::max(out.max_grad_diff, std::abs(grad_a[i] - logits.grad()[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Drift gradient identity

// max |dL/dX + (2/N) sum_h V_h / Z_h| on a random batch.
inline double drift_gradient_identity(std::size_t B, std::size_t S, std::size_t F, const DriftConfig& cfg,
                                      std::uint64_t seed) {
  CounterRng rng(seed, 0xD21F);
  Tensor X = detail::randn({B, S, F}, rng).clone(true);
  const Tensor Y = detail::randn({B, S, F}, rng);
  const DriftBatch batch = DriftBatch::make(X, Y);
  const DriftLoss dl = drift_loss(batch, cfg);
  backward(dl.loss);
  const double N = static_cast<double>(B * S);
  double worst = 0.0;
  for (std::size_t i = 0; i < X.numel(); ++i) {
    double expect = 0.0;
    for (std::size_t h = 0; h < cfg.bandwidths.size(); ++h) expect -= 2.0 * dl.drifts[h][i] / (dl.normalizers[h] * N);
    worst = std::max(worst, std::abs(X.grad()[i] - expect));
  }
  return worst;
}

}  // namespace fpdlab
