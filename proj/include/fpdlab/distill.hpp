#pragma once

// Fixed-point distillation: one-shot student drafts, straight-through
// embeddings, re-mask + single teacher refinement targets, the lifted drift
// objective and the optional unconditional GAN term.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpdlab/drift.hpp"
#include "fpdlab/masking.hpp"
#include "fpdlab/nn.hpp"
#include "fpdlab/teacher.hpp"
#include "fpdlab/tensor.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

enum class Estimator { ste, soft };
enum class RefinementSource { student, random };
enum class ClassMix { single, mixed };

inline Estimator parse_estimator(const std::string& s) {
  if (s == "ste") return Estimator::ste;
  if (s == "soft") return Estimator::soft;
  throw ConfigError("distill.estimator", "expected ste|soft, got '" + s + "'");
}
inline RefinementSource parse_source(const std::string& s) {
  if (s == "student") return RefinementSource::student;
  if (s == "random") return RefinementSource::random;
  throw ConfigError("distill.source", "expected student|random, got '" + s + "'");
}
inline ClassMix parse_class_mix(const std::string& s) {
  if (s == "single") return ClassMix::single;
  if (s == "mixed") return ClassMix::mixed;
  throw ConfigError("distill.class_mix", "expected single|mixed, got '" + s + "'");
}
inline std::string to_string(Estimator e) { return e == Estimator::ste ? "ste" : "soft"; }
inline std::string to_string(RefinementSource s) { return s == RefinementSource::student ? "student" : "random"; }
inline std::string to_string(ClassMix m) { return m == ClassMix::single ? "single" : "mixed"; }

struct DistillConfig {
  double r_init = 0.95;
  double r_lo = 0.3;
  double r_hi = 0.7;
  double lambda = 0.0;
  RefinementSource source = RefinementSource::student;
  Estimator estimator = Estimator::ste;
  ClassMix class_mix = ClassMix::single;  // one class per batch, or one per element
  std::size_t batch = 8;
  std::size_t steps = 2000;
  double lr = 1e-4;
  double disc_lr = 1e-4;
  int disc_hidden = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(r_init > 0.0 && r_init <= 1.0)) throw ConfigError("distill.r_init", "must lie in (0,1]");
    if (!(r_lo > 0.0 && r_lo < r_hi && r_hi < 1.0))
      throw ConfigError("distill.r_lo", "need 0 < r_lo < r_hi < 1");
    if (!(lambda >= 0.0)) throw ConfigError("distill.lambda", "must be non-negative");
    if (batch < 2) throw ConfigError("distill.batch", "needs at least 2 elements for in-batch negatives");
    if (!(lr >= 0.0)) throw ConfigError("distill.lr", "must be non-negative");
    if (!(disc_lr >= 0.0)) throw ConfigError("distill.disc_lr", "must be non-negative");
    if (disc_hidden <= 0) throw ConfigError("distill.disc_hidden", "must be positive");
  }
};

// Unconditional realness score: P -> H -> H -> 1 with GELU.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(int P, int hidden, std::uint64_t seed) {
    CounterRng rng(seed, 0xD15C);
    const std::size_t p = static_cast<std::size_t>(P), h = static_cast<std::size_t>(hidden);
    params_.add("w1", normal_init({p, h}, 1.0 / std::sqrt(static_cast<double>(p)), rng));
    params_.add("b1", Tensor::zeros({h}, true));
    params_.add("w2", normal_init({h, h}, 1.0 / std::sqrt(static_cast<double>(h)), rng));
    params_.add("b2", Tensor::zeros({h}, true));
    params_.add("w3", normal_init({h, 1}, 1.0 / std::sqrt(static_cast<double>(h)), rng));
    params_.add("b3", Tensor::zeros({1}, true));
  }

  // pixels [B, P] -> [B, 1]
  Tensor forward(const Tensor& pixels) const {
    const Tensor h1 = gelu(matmul(pixels, params_.get("w1")) + params_.get("b1"));
    const Tensor h2 = gelu(matmul(h1, params_.get("w2")) + params_.get("b2"));
    return matmul(h2, params_.get("w3")) + params_.get("b3");
  }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  ParamStore params_;
};

struct GanLosses {
  Tensor gen;   // mean softplus(-D(fake))
  Tensor disc;  // mean softplus(-D(real)) + softplus(D(sg(fake)))
};

template <class Disc>
GanLosses gan_losses(const Tensor& fake, const Tensor& real, const Disc& disc) {
  if (fake.numel() == 0 || real.numel() == 0) throw std::invalid_argument("gan_losses: empty batch");
  GanLosses g;
  g.gen = mean(softplus(-disc.forward(fake)));
  g.disc = mean(softplus(-disc.forward(real))) + mean(softplus(disc.forward(stop_gradient(fake))));
  return g;
}

// ---------------------------------------------------------------------------
// Draft and embeddings

struct Draft {
  std::vector<MaskState> init;
  Tensor logits;  // [B, L, K]
  Tensor probs;   // [B, L, K]
  std::vector<TokenSeq> tokens;
};

// One categorical draw per row of a [.., K] probability tensor.
inline std::vector<TokenSeq> sample_rows(const Tensor& probs, std::size_t L, CounterRng& rng) {
  const std::size_t K = probs.shape().back();
  const std::size_t rows = probs.numel() / K;
  const auto pv = probs.values();
  std::vector<TokenSeq> out(rows / L, TokenSeq(L));
  for (std::size_t r = 0; r < rows; ++r)
    out[r / L][r % L] = static_cast<int>(rng.categorical(pv.subspan(r * K, K)));
  return out;
}

// g_theta(z_init, c) in one forward pass; every position is re-predicted.
inline Draft student_draft(const DenoiserNet& student, std::span<const int> classes, const DistillConfig& cfg,
                           const NoiseSchedule& schedule, CounterRng& rng) {
  const std::size_t B = classes.size(), L = static_cast<std::size_t>(student.L());
  Draft d;
  std::vector<int> tokens;
  std::vector<double> times;
  for (std::size_t b = 0; b < B; ++b) {
    d.init.push_back(init_draft(cfg.r_init, L, student.K(), rng));
    tokens.insert(tokens.end(), d.init.back().tokens.begin(), d.init.back().tokens.end());
    times.push_back(schedule.inverse(static_cast<double>(d.init.back().masked()) / static_cast<double>(L)));
  }
  d.logits = student.forward(tokens, classes, times);
  d.probs = softmax(d.logits, -1);
  d.tokens = sample_rows(d.probs, L, rng);
  return d;
}

// e~ = p E, one soft embedding per position: probs [.., K] -> [rows, d].
inline Tensor soft_embed(const Tensor& probs, const Tensor& E) {
  const std::size_t K = probs.shape().back();
  if (E.ndim() != 2 || E.shape()[0] != K)
    detail::shape_fail("soft_embed", "codebook " + shape_str(E.shape()) + " does not match K=" + std::to_string(K));
  return matmul(reshape(probs, {probs.numel() / K, K}), E);
}

// e = E[z] + (e~ - sg(e~)): hard rows forward, soft-mixture gradient backward.
inline Tensor ste_embed(std::span<const TokenSeq> tokens, const Tensor& probs, const Tensor& E) {
  std::vector<int> flat;
  for (const auto& z : tokens) {
    if (!is_complete(z)) throw std::invalid_argument("ste_embed: draft contains the mask symbol");
    flat.insert(flat.end(), z.begin(), z.end());
  }
  const Tensor soft = soft_embed(probs, E);
  if (flat.size() != soft.shape()[0])
    detail::shape_fail("ste_embed", std::to_string(flat.size()) + " tokens for " + shape_str(soft.shape()) +
                                        " soft embeddings");
  return gather_rows(E, flat) + (soft - stop_gradient(soft));
}

// z_T = T_phi^r(M_r(z)) with r ~ U[r_lo, r_hi], revealing every masked
// position. With source=random the re-masked draft is replaced by a fresh
// init_draft at the same ratio.
inline std::vector<TokenSeq> make_target(const DenoiserNet& teacher, std::span<const TokenSeq> draft,
                                         std::span<const int> classes, const DistillConfig& cfg,
                                         const NoiseSchedule& schedule, CounterRng& rng,
                                         const RefineOptions& opts = {}) {
  const std::size_t B = draft.size(), L = static_cast<std::size_t>(teacher.L());
  std::vector<MaskState> states;
  std::vector<double> t_eff;
  std::vector<std::size_t> keep;
  for (std::size_t b = 0; b < B; ++b) {
    const double r = rng.uniform(cfg.r_lo, cfg.r_hi);
    states.push_back(cfg.source == RefinementSource::student ? remask(draft[b], r, rng)
                                                             : init_draft(r, L, teacher.K(), rng));
    t_eff.push_back(schedule.inverse(r));
    keep.push_back(states.back().masked());
  }
  std::vector<TokenSeq> out;
  for (auto& s : refine_batch(teacher, states, classes, t_eff, keep, rng, opts)) out.push_back(std::move(s.tokens));
  return out;
}

// Lifted features used by the drift loss: Phi(x) in feature space, or the
// decoder output as a single 1-cell tap in pixel space.
inline Tensor drift_features(const World& world, const Tensor& pixels, const DriftConfig& drift) {
  if (drift.space == DriftSpace::pixel) return reshape(pixels, {pixels.shape()[0], 1, pixels.shape()[1]});
  return world.lift(pixels, drift.taps, drift.spatial);
}

inline TokenSeq student_sample(const DenoiserNet& student, int c, const DistillConfig& cfg,
                               const NoiseSchedule& schedule, CounterRng& rng) {
  const int cls[] = {c};
  return student_draft(student, cls, cfg, schedule, rng).tokens.front();
}

inline std::vector<TokenSeq> student_sample_many(const DenoiserNet& student, int c, std::size_t n,
                                                 const DistillConfig& cfg, const NoiseSchedule& schedule,
                                                 CounterRng& rng, std::size_t chunk = 512) {
  std::vector<TokenSeq> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::vector<int> cls(std::min(chunk, n - start), c);
    for (auto& z : student_draft(student, cls, cfg, schedule, rng).tokens) out.push_back(std::move(z));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepMetrics {
  std::size_t step = 0;
  double drift_loss = 0.0;
  std::optional<double> gan_gen;
  std::optional<double> gan_disc;
  double fp_residual = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

class Distiller {
 public:
  Distiller(const World& world, const DenoiserNet& teacher, const NoiseSchedule& schedule, DistillConfig cfg,
            DriftConfig drift, RefineOptions refine = {})
      : world_(world),
        teacher_(teacher),
        schedule_(schedule),
        cfg_(std::move(cfg)),
        drift_(std::move(drift)),
        refine_(refine),
        student_(teacher.clone()),
        disc_(world.config().P, cfg_.disc_hidden, cfg_.seed),
        student_opt_(cfg_.lr),
        disc_opt_(cfg_.disc_lr),
        rng_(cfg_.seed, 0xF1D0) {
    cfg_.validate();
    drift_.validate();
    student_.params().set_trainable(true);
  }

  std::vector<int> next_classes() {
    const std::size_t C = static_cast<std::size_t>(world_.config().C);
    if (cfg_.class_mix == ClassMix::single) return std::vector<int>(cfg_.batch, static_cast<int>(rng_.below(C)));
    std::vector<int> cls(cfg_.batch);
    for (int& c : cls) c = static_cast<int>(rng_.below(C));
    return cls;
  }

  StepMetrics step() { return step(next_classes()); }

  StepMetrics step(const std::vector<int>& classes) {
    const auto t0 = std::chrono::steady_clock::now();
    const Draft draft = student_draft(student_, classes, cfg_, schedule_, rng_);
    const Tensor& E = world_.codebook();
    const Tensor emb = cfg_.estimator == Estimator::ste ? ste_embed(draft.tokens, draft.probs, E)
                                                        : soft_embed(draft.probs, E);
    last_decoder_input_ = std::vector<double>(emb.values().begin(), emb.values().end());
    const Tensor fake = world_.decode(emb, classes);
    const Tensor X = drift_features(world_, fake, drift_);

    const std::vector<TokenSeq> target = make_target(teacher_, draft.tokens, classes, cfg_, schedule_, rng_, refine_);
    const Tensor Y = stop_gradient(drift_features(world_, world_.decode_tokens(target, classes), drift_));
    const DriftLoss dl = drift_loss(DriftBatch::make(X, Y), drift_);

    StepMetrics m;
    m.step = steps_;
    m.drift_loss = dl.loss.item();
    m.fp_residual = feature_residual(X, Y);
    Tensor total = dl.loss;
    std::optional<GanLosses> gan;
    if (cfg_.lambda > 0.0) {
      std::vector<TokenSeq> reals;
      std::vector<int> real_cls;
      const std::size_t C = static_cast<std::size_t>(world_.config().C);
      for (std::size_t b = 0; b < classes.size(); ++b) {
        real_cls.push_back(static_cast<int>(rng_.below(C)));
        reals.push_back(world_.data().sample(real_cls.back(), 1, rng_).front());
      }
      gan = gan_losses(fake, world_.decode_tokens(reals, real_cls), disc_);
      total = total + scale(gan->gen, cfg_.lambda);
      m.gan_gen = gan->gen.item();
      m.gan_disc = gan->disc.item();
    }
    m.total = total.item();

    student_.params().zero_grad();
    disc_.params().zero_grad();
    backward(total);
    student_opt_.step(student_.params());
    if (gan) {
      disc_.params().zero_grad();
      backward(gan->disc);
      disc_opt_.step(disc_.params());
    }
    ++steps_;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return m;
  }

  const DenoiserNet& student() const { return student_; }
  DenoiserNet& student() { return student_; }
  const Discriminator& discriminator() const { return disc_; }
  Discriminator& discriminator() { return disc_; }
  RmsOptimizer& student_optimizer() { return student_opt_; }
  RmsOptimizer& disc_optimizer() { return disc_opt_; }
  const RmsOptimizer& student_optimizer() const { return student_opt_; }
  const RmsOptimizer& disc_optimizer() const { return disc_opt_; }
  CounterRng& rng() { return rng_; }
  const CounterRng& rng() const { return rng_; }
  std::size_t steps_done() const { return steps_; }
  void set_steps_done(std::size_t s) { steps_ = s; }
  const DistillConfig& config() const { return cfg_; }
  const DriftConfig& drift() const { return drift_; }
  const std::vector<double>& last_decoder_input() const { return last_decoder_input_; }

 private:
  const World& world_;
  const DenoiserNet& teacher_;
  NoiseSchedule schedule_;
  DistillConfig cfg_;
  DriftConfig drift_;
  RefineOptions refine_;
  DenoiserNet student_;
  Discriminator disc_;
  RmsOptimizer student_opt_;
  RmsOptimizer disc_opt_;
  CounterRng rng_;
  std::size_t steps_ = 0;
  std::vector<double> last_decoder_input_;
};

}  // namespace fpdlab
