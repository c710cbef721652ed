#pragma once

// Masked-token denoiser (used for both teacher and student), its masked
// cross-entropy objective, the single refinement operator and the T-step
// iterative sampler.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpdlab/masking.hpp"
#include "fpdlab/nn.hpp"
#include "fpdlab/tensor.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

struct DenoiserConfig {
  int width = 64;
  int hidden = 160;
  int blocks = 2;
};

// Position-mixing MLP: token + position + class + time embeddings, then
// residual blocks of (layer norm -> linear mix over positions) and
// (layer norm -> channel MLP), then a per-position K-way head.
class DenoiserNet {
 public:
  static constexpr std::size_t kTimeFeatures = 16;

  DenoiserNet() = default;

  DenoiserNet(const World& world, const DenoiserConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), codebook_(world.codebook()), K_(world.K()), L_(world.L()), C_(world.config().C) {
    if (cfg.width <= 0) throw ConfigError("teacher.width", "must be positive");
    if (cfg.hidden <= 0) throw ConfigError("teacher.hidden", "must be positive");
    if (cfg.blocks <= 0) throw ConfigError("teacher.blocks", "must be positive");
    CounterRng rng(seed, 0xDE70);
    const std::size_t W = static_cast<std::size_t>(cfg.width), H = static_cast<std::size_t>(cfg.hidden),
                      L = static_cast<std::size_t>(L_), K = static_cast<std::size_t>(K_),
                      d = static_cast<std::size_t>(world.d());
    auto sd = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    params_.add("mask_embedding", normal_init({1, d}, 1.0, rng));
    params_.add("in.w", normal_init({d, W}, sd(d), rng));
    params_.add("pos", normal_init({L, W}, 0.5, rng));
    params_.add("class", normal_init({static_cast<std::size_t>(C_), W}, 0.5, rng));
    params_.add("time.w", normal_init({kTimeFeatures, W}, sd(kTimeFeatures), rng));
    for (int b = 0; b < cfg.blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      params_.add(p + "ln1.g", Tensor::filled({W}, 1.0).clone(true));
      params_.add(p + "ln1.b", Tensor::zeros({W}, true));
      params_.add(p + "mix.w", normal_init({L, L}, 0.5 * sd(L), rng));
      params_.add(p + "ln2.g", Tensor::filled({W}, 1.0).clone(true));
      params_.add(p + "ln2.b", Tensor::zeros({W}, true));
      params_.add(p + "mlp.w1", normal_init({W, H}, sd(W), rng));
      params_.add(p + "mlp.b1", Tensor::zeros({H}, true));
      params_.add(p + "mlp.w2", normal_init({H, W}, 0.5 * sd(H), rng));
      params_.add(p + "mlp.b2", Tensor::zeros({W}, true));
    }
    params_.add("out.ln.g", Tensor::filled({W}, 1.0).clone(true));
    params_.add("out.ln.b", Tensor::zeros({W}, true));
    params_.add("out.w", normal_init({W, K}, 0.5 * sd(W), rng));
    params_.add("out.b", Tensor::zeros({K}, true));
  }

  // Independent copy: new parameter leaves, same values.
  DenoiserNet clone() const {
    DenoiserNet n;
    n.cfg_ = cfg_;
    n.codebook_ = codebook_;
    n.K_ = K_;
    n.L_ = L_;
    n.C_ = C_;
    n.params_ = params_.clone();
    return n;
  }

  static std::vector<double> time_features(double t) {
    std::vector<double> f(kTimeFeatures);
    for (std::size_t k = 0; k < kTimeFeatures / 2; ++k) {
      const double w = std::numbers::pi * std::pow(2.0, static_cast<double>(k)) * t;
      f[2 * k] = std::sin(w);
      f[2 * k + 1] = std::cos(w);
    }
    return f;
  }

  // tokens: B*L row-major (mask symbol allowed); returns logits [B, L, K].
  Tensor forward(std::span<const int> tokens, std::span<const int> classes, std::span<const double> times) const {
    const std::size_t B = classes.size(), L = static_cast<std::size_t>(L_), W = static_cast<std::size_t>(cfg_.width);
    if (tokens.size() != B * L || times.size() != B)
      throw std::invalid_argument("DenoiserNet::forward: expected " + std::to_string(B * L) + " tokens and " +
                                  std::to_string(B) + " times");
    std::vector<int> idx(tokens.begin(), tokens.end());
    for (int& v : idx) {
      if (v == kMaskToken) v = K_;
      else if (v < 0 || v >= K_) throw std::out_of_range("DenoiserNet::forward: token " + std::to_string(v));
    }
    std::vector<int> cls(classes.begin(), classes.end());
    for (int c : cls)
      if (c < 0 || c >= C_) throw std::out_of_range("DenoiserNet::forward: class " + std::to_string(c));
    std::vector<double> tf;
    for (double t : times) {
      const auto f = time_features(t);
      tf.insert(tf.end(), f.begin(), f.end());
    }
    ++forwards_;

    const Tensor table = concat({codebook_, p("mask_embedding")}, 0);
    const Tensor emb = reshape(gather_rows(table, idx), {B, L, table.shape()[1]});
    Tensor h = matmul(emb, p("in.w")) + p("pos") + reshape(gather_rows(p("class"), cls), {B, 1, W}) +
               reshape(matmul(Tensor({B, kTimeFeatures}, std::move(tf)), p("time.w")), {B, 1, W});
    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      h = h + matmul(p(pre + "mix.w"), layer_norm(h) * p(pre + "ln1.g") + p(pre + "ln1.b"));
      const Tensor u = layer_norm(h) * p(pre + "ln2.g") + p(pre + "ln2.b");
      h = h + matmul(gelu(matmul(u, p(pre + "mlp.w1")) + p(pre + "mlp.b1")), p(pre + "mlp.w2")) + p(pre + "mlp.b2");
    }
    return matmul(layer_norm(h) * p("out.ln.g") + p("out.ln.b"), p("out.w")) + p("out.b");
  }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const DenoiserConfig& config() const { return cfg_; }
  int K() const { return K_; }
  int L() const { return L_; }
  int classes() const { return C_; }

  std::size_t forward_count() const { return forwards_; }
  void reset_forward_count() { forwards_ = 0; }

 private:
  const Tensor& p(const std::string& name) const { return params_.get(name); }

  DenoiserConfig cfg_;
  Tensor codebook_;
  ParamStore params_;
  int K_ = 0, L_ = 0, C_ = 0;
  mutable std::size_t forwards_ = 0;
};

// ---------------------------------------------------------------------------
// Masked cross-entropy

struct TeacherLoss {
  Tensor loss;              // mean over the batch of the masked-position CE sum
  double mean_masked = 0.0;  // average number of masked positions per sequence
};

inline TeacherLoss teacher_loss(const DenoiserNet& net, std::span<const TokenSeq> batch, std::span<const int> classes,
                                const NoiseSchedule& schedule, CounterRng& rng,
                                std::optional<double> fixed_t = std::nullopt) {
  if (batch.empty()) throw std::invalid_argument("teacher_loss: empty batch");
  if (batch.size() != classes.size()) throw std::invalid_argument("teacher_loss: batch/class size mismatch");
  const std::size_t B = batch.size(), L = static_cast<std::size_t>(net.L()), K = static_cast<std::size_t>(net.K());
  std::vector<int> tokens;
  std::vector<double> times;
  std::vector<double> weight(B * L * K, 0.0);
  std::size_t masked = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const double t = fixed_t ? *fixed_t : rng.uniform();
    const MaskState zt = corrupt(batch[b], t, schedule, rng);
    for (std::size_t i : zt.mask_set) weight[(b * L + i) * K + static_cast<std::size_t>(batch[b][i])] = 1.0;
    masked += zt.masked();
    tokens.insert(tokens.end(), zt.tokens.begin(), zt.tokens.end());
    times.push_back(t);
  }
  const Tensor logp = log_softmax(net.forward(tokens, classes, times));
  const Tensor picked = sum(logp * Tensor({B, L, K}, std::move(weight)));
  return {scale(picked, -1.0 / static_cast<double>(B)), static_cast<double>(masked) / static_cast<double>(B)};
}

// ---------------------------------------------------------------------------
// Refinement and sampling

enum class RevealRule { confidence, random };
enum class DecodeRule { sample, argmax };

inline RevealRule parse_reveal(const std::string& s) {
  if (s == "confidence") return RevealRule::confidence;
  if (s == "random") return RevealRule::random;
  throw ConfigError("teacher.reveal", "expected confidence|random, got '" + s + "'");
}

inline DecodeRule parse_decode(const std::string& s) {
  if (s == "sample") return DecodeRule::sample;
  if (s == "argmax") return DecodeRule::argmax;
  throw ConfigError("teacher.decode", "expected sample|argmax, got '" + s + "'");
}

struct RefineOptions {
  RevealRule reveal = RevealRule::confidence;
  DecodeRule decode = DecodeRule::sample;
};

// Draws one token per masked position from a probability row (or takes the argmax).
inline int draw_token(std::span<const double> row, DecodeRule rule, CounterRng& rng) {
  if (rule == DecodeRule::argmax)
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  return static_cast<int>(rng.categorical(row));
}

// Batched T_phi: every masked position is sampled from p_phi(. | z_t, c, t_eff);
// keep[b] of them are revealed and the rest stay masked. Revealed tokens are
// never touched.
inline std::vector<MaskState> refine_batch(const DenoiserNet& net, std::span<const MaskState> states,
                                           std::span<const int> classes, std::span<const double> t_eff,
                                           std::span<const std::size_t> keep, CounterRng& rng,
                                           const RefineOptions& opts = {}) {
  const std::size_t B = states.size(), L = static_cast<std::size_t>(net.L()), K = static_cast<std::size_t>(net.K());
  if (classes.size() != B || t_eff.size() != B || keep.size() != B)
    throw std::invalid_argument("refine_batch: argument sizes differ");
  std::vector<MaskState> out(states.begin(), states.end());
  std::vector<std::size_t> active;
  for (std::size_t b = 0; b < B; ++b) {
    if (keep[b] > states[b].masked())
      throw std::invalid_argument("refine_step: keep " + std::to_string(keep[b]) + " exceeds " +
                                  std::to_string(states[b].masked()) + " masked positions");
    if (!states[b].mask_set.empty()) active.push_back(b);
  }
  if (active.empty()) return out;

  std::vector<int> tokens, cls;
  std::vector<double> times;
  for (std::size_t b : active) {
    tokens.insert(tokens.end(), states[b].tokens.begin(), states[b].tokens.end());
    cls.push_back(classes[b]);
    times.push_back(t_eff[b]);
  }
  const Tensor probs = softmax(net.forward(tokens, cls, times), -1);
  const auto pv = probs.values();
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t b = active[a];
    const std::span<const double> rows = pv.subspan(a * L * K, L * K);
    std::vector<int> sampled(L, kMaskToken);
    for (std::size_t i : states[b].mask_set) sampled[i] = draw_token(rows.subspan(i * K, K), opts.decode, rng);
    std::vector<std::size_t> reveal;
    if (opts.reveal == RevealRule::confidence) {
      reveal = select_top_confidence(rows, K, sampled, states[b].mask_set, keep[b]);
    } else {
      for (std::size_t j : choose_positions(states[b].masked(), keep[b], rng)) reveal.push_back(states[b].mask_set[j]);
    }
    TokenSeq next = states[b].tokens;
    for (std::size_t i : reveal) next[i] = sampled[i];
    out[b] = MaskState::from_tokens(std::move(next));
  }
  return out;
}

inline MaskState refine_step(const DenoiserNet& net, const MaskState& state, int c, double t_eff, std::size_t keep,
                             CounterRng& rng, const RefineOptions& opts = {}) {
  const int cls[] = {c};
  const double t[] = {t_eff};
  const std::size_t k[] = {keep};
  return refine_batch(net, std::span(&state, 1), cls, t, k, rng, opts)[0];
}

// Per-step reveal budgets: the masked count after step k is
// ceil(gamma(1 - k/T) L). With T > L some budgets are zero.
struct SamplerPlan {
  std::size_t steps = 0;
  NoiseSchedule schedule;
  std::vector<std::size_t> budgets;
  std::vector<std::size_t> masked_after;

  static SamplerPlan make(std::size_t T, const NoiseSchedule& schedule, std::size_t L) {
    if (T == 0) throw std::invalid_argument("SamplerPlan: T must be positive");
    SamplerPlan plan{T, schedule, {}, {}};
    std::size_t before = L;
    for (std::size_t k = 1; k <= T; ++k) {
      const double s = 1.0 - static_cast<double>(k) / static_cast<double>(T);
      const std::size_t after = k == T ? 0 : std::min(before, ceil_count(schedule.gamma(s), L));
      plan.budgets.push_back(before - after);
      plan.masked_after.push_back(after);
      before = after;
    }
    return plan;
  }
};

// n independent samples for class c, run in parallel chunks. Each step
// refines at t = gamma^{-1}(masked / L).
inline std::vector<TokenSeq> sample_many(const DenoiserNet& net, int c, const SamplerPlan& plan, std::size_t n,
                                         CounterRng& rng, const RefineOptions& opts = {},
                                         std::vector<std::vector<std::size_t>>* trajectory = nullptr,
                                         std::size_t chunk = 512) {
  const std::size_t L = static_cast<std::size_t>(net.L());
  std::vector<TokenSeq> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<MaskState> states(m, MaskState::from_tokens(TokenSeq(L, kMaskToken)));
    const std::vector<int> cls(m, c);
    for (std::size_t k = 0; k < plan.steps; ++k) {
      const std::size_t masked = states[0].masked();
      if (plan.budgets[k] > 0) {
        const std::vector<double> t(m, plan.schedule.inverse(static_cast<double>(masked) / static_cast<double>(L)));
        const std::vector<std::size_t> keep(m, plan.budgets[k]);
        states = refine_batch(net, states, cls, t, keep, rng, opts);
      }
      if (trajectory && start == 0) {
        if (trajectory->size() <= k) trajectory->resize(k + 1);
        for (const auto& s : states) (*trajectory)[k].push_back(s.masked());
      }
    }
    for (auto& s : states) out.push_back(std::move(s.tokens));
  }
  return out;
}

inline TokenSeq sample_iterative(const DenoiserNet& net, int c, const SamplerPlan& plan, CounterRng& rng,
                                 const RefineOptions& opts = {}) {
  return sample_many(net, c, plan, 1, rng, opts).front();
}

// ---------------------------------------------------------------------------
// Pretraining

struct TeacherTrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 64;
  double lr = 3e-3;
};

// on_step(step, loss, mean_masked) is called after every update.
template <class OnStep>
void train_teacher(DenoiserNet& net, const World& world, const NoiseSchedule& schedule,
                   const TeacherTrainConfig& cfg, CounterRng& rng, OnStep&& on_step) {
  RmsOptimizer opt(cfg.lr);
  const int C = world.config().C;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<TokenSeq> batch;
    std::vector<int> classes;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const int c = static_cast<int>(rng.below(static_cast<std::size_t>(C)));
      classes.push_back(c);
      batch.push_back(world.data().sample(c, 1, rng).front());
    }
    net.params().zero_grad();
    const TeacherLoss l = teacher_loss(net, batch, classes, schedule, rng);
    backward(l.loss);
    opt.step(net.params());
    on_step(step, l.loss.item(), l.mean_masked);
  }
}

}  // namespace fpdlab
