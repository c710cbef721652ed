#pragma once

// Frozen stand-ins for the tokenizer stack (codebook, decoder, multi-tap
// feature backbone) and a class-conditional token dataset whose probabilities
// are known in closed form.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpdlab/nn.hpp"
#include "fpdlab/rng.hpp"
#include "fpdlab/tensor.hpp"

namespace fpdlab {

// Tokens are 0..K-1; the mask symbol lives outside the vocabulary.
inline constexpr int kMaskToken = -1;
using TokenSeq = std::vector<int>;

// Validation failure that names the offending config key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct WorldConfig {
  int K = 16;             // vocabulary size
  int L = 16;             // sequence length
  int d = 8;              // codebook embedding width
  int P = 32;             // decoded "pixel" vector size
  int F = 24;             // per-cell feature width
  int G = 2;              // spatial grid side; G*G cells per tap
  int C = 4;              // classes
  int decoder_hidden = 64;
  double rho = 0.1;       // per-position resampling rate
  int modes = 2;          // templates per class
  double mode_weight = 0.8;  // mixture weight of the primary template
  std::uint64_t seed = 1;

  void validate() const {
    auto positive = [](const char* key, int v) {
      if (v <= 0) throw ConfigError(key, "must be positive, got " + std::to_string(v));
    };
    positive("world.K", K);
    positive("world.L", L);
    positive("world.d", d);
    positive("world.P", P);
    positive("world.F", F);
    positive("world.G", G);
    positive("world.C", C);
    positive("world.decoder_hidden", decoder_hidden);
    positive("world.modes", modes);
    if (K < 2) throw ConfigError("world.K", "needs at least 2 symbols");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("world.rho", "must lie in [0,1]");
    // Ignored when modes == 1.
    if (!(mode_weight > 0.0 && mode_weight <= 1.0)) throw ConfigError("world.mode_weight", "must lie in (0,1]");
  }

  // K^L when it is small enough to enumerate, otherwise nullopt.
  std::optional<std::size_t> space_size(std::size_t limit = 100000) const {
    std::size_t n = 1;
    for (int i = 0; i < L; ++i) {
      n *= static_cast<std::size_t>(K);
      if (n > limit) return std::nullopt;
    }
    return n;
  }
};

// Index of a complete sequence in the base-K enumeration (position 0 most significant).
inline std::size_t sequence_index(const TokenSeq& z, int K) {
  std::size_t idx = 0;
  for (int v : z) idx = idx * static_cast<std::size_t>(K) + static_cast<std::size_t>(v);
  return idx;
}

inline TokenSeq sequence_at(std::size_t idx, int K, int L) {
  TokenSeq z(static_cast<std::size_t>(L));
  for (int i = L; i-- > 0;) {
    z[static_cast<std::size_t>(i)] = static_cast<int>(idx % static_cast<std::size_t>(K));
    idx /= static_cast<std::size_t>(K);
  }
  return z;
}

inline bool is_complete(const TokenSeq& z) {
  return std::none_of(z.begin(), z.end(), [](int v) { return v == kMaskToken; });
}

class SyntheticDataset {
 public:
  SyntheticDataset() = default;
  SyntheticDataset(const WorldConfig& cfg, CounterRng& rng) : K_(cfg.K), L_(cfg.L), rho_(cfg.rho) {
    const std::size_t L = static_cast<std::size_t>(cfg.L);
    weights_.assign(static_cast<std::size_t>(cfg.modes), 0.0);
    weights_[0] = cfg.modes == 1 ? 1.0 : cfg.mode_weight;
    for (int m = 1; m < cfg.modes; ++m) weights_[static_cast<std::size_t>(m)] = (1.0 - cfg.mode_weight) / (cfg.modes - 1);
    templates_.resize(static_cast<std::size_t>(cfg.C));
    for (auto& modes : templates_) {
      TokenSeq primary(L);
      for (int& v : primary) v = static_cast<int>(rng.below(static_cast<std::size_t>(cfg.K)));
      modes.push_back(primary);
      // Secondary templates disagree with the primary at every position.
      for (int m = 1; m < cfg.modes; ++m) {
        TokenSeq alt(L);
        for (std::size_t i = 0; i < L; ++i)
          alt[i] = (primary[i] + 1 + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.K - 1)))) % cfg.K;
        modes.push_back(alt);
      }
    }
  }

  SyntheticDataset(int K, int L, double rho, std::vector<std::vector<TokenSeq>> templates, std::vector<double> weights)
      : K_(K), L_(L), rho_(rho), templates_(std::move(templates)), weights_(std::move(weights)) {}

  int classes() const { return static_cast<int>(templates_.size()); }
  int vocab() const { return K_; }
  int length() const { return L_; }
  double rho() const { return rho_; }
  const std::vector<TokenSeq>& templates(int c) const { return templates_.at(check_class(c)); }
  const std::vector<double>& mode_weights() const { return weights_; }

  std::vector<TokenSeq> sample(int c, std::size_t n, CounterRng& rng) const {
    if (n == 0) throw std::invalid_argument("sample_data: n must be at least 1");
    const auto& modes = templates_.at(check_class(c));
    std::vector<TokenSeq> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
      const TokenSeq& t = modes[rng.categorical(weights_)];
      TokenSeq z(t.size());
      for (std::size_t i = 0; i < t.size(); ++i)
        z[i] = rng.bernoulli(rho_) ? static_cast<int>(rng.below(static_cast<std::size_t>(K_))) : t[i];
      out.push_back(std::move(z));
    }
    return out;
  }

  std::vector<TokenSeq> sample(int c, std::size_t n, std::uint64_t seed) const {
    CounterRng rng(seed, 0x5A17);
    return sample(c, n, rng);
  }

  // sum_m w_m prod_i [(1 - rho) 1{z_i = t_{m,i}} + rho / K]
  double exact_prob(const TokenSeq& z, int c) const {
    if (!is_complete(z) || z.size() != static_cast<std::size_t>(L_))
      throw std::invalid_argument("exact_prob: sequence must be complete and of length " + std::to_string(L_));
    const auto& modes = templates_.at(check_class(c));
    const double noise = rho_ / K_;
    double total = 0.0;
    for (std::size_t m = 0; m < modes.size(); ++m) {
      double p = weights_[m];
      for (std::size_t i = 0; i < z.size(); ++i) p *= (z[i] == modes[m][i] ? 1.0 - rho_ : 0.0) + noise;
      total += p;
    }
    return total;
  }

 private:
  std::size_t check_class(int c) const {
    if (c < 0 || c >= classes()) throw std::out_of_range("unknown class " + std::to_string(c));
    return static_cast<std::size_t>(c);
  }

  int K_ = 0, L_ = 0;
  double rho_ = 0.0;
  std::vector<std::vector<TokenSeq>> templates_;
  std::vector<double> weights_;
};

// Codebook, decoder, backbone and dataset, all frozen after construction.
class World {
 public:
  static constexpr int kTaps = 4;

  World() = default;

  explicit World(const WorldConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    CounterRng rng(cfg.seed, 0xC0DE);
    const std::size_t K = static_cast<std::size_t>(cfg.K), L = static_cast<std::size_t>(cfg.L),
                      d = static_cast<std::size_t>(cfg.d), H = static_cast<std::size_t>(cfg.decoder_hidden),
                      P = static_cast<std::size_t>(cfg.P), D = feature_width();
    auto frozen = [&](const std::string& name, Shape s, double stddev) {
      params_.add(name, normal_init(std::move(s), stddev, rng, false));
    };
    frozen("codebook", {K, d}, 1.0);
    frozen("decoder.w1", {L * d, H}, 1.0 / std::sqrt(static_cast<double>(L * d)));
    frozen("decoder.b1", {H}, 0.1);
    frozen("decoder.class", {static_cast<std::size_t>(cfg.C), H}, 0.5);
    frozen("decoder.w2", {H, P}, 1.0 / std::sqrt(static_cast<double>(H)));
    frozen("decoder.b2", {P}, 0.1);
    std::size_t in = P;
    for (int k = 1; k <= kTaps; ++k) {
      frozen("backbone.w" + std::to_string(k), {in, D}, 1.5 / std::sqrt(static_cast<double>(in)));
      frozen("backbone.b" + std::to_string(k), {D}, 0.1);
      in = D;
    }
    CounterRng data_rng = rng.split(0xDA7A);
    data_ = SyntheticDataset(cfg, data_rng);
    validate_injective();
  }

  // Rebuilds a world from serialized blocks (see to_store).
  static World from_store(const WorldConfig& cfg, const ParamStore& store) {
    World w;
    w.cfg_ = cfg;
    cfg.validate();
    for (const auto& [name, t] : store) {
      if (name.starts_with("data.")) continue;
      w.params_.add(name, t.clone(false));
    }
    const Tensor& tmpl = store.get("data.templates");
    const Tensor& wts = store.get("data.weights");
    const std::size_t C = static_cast<std::size_t>(cfg.C), M = static_cast<std::size_t>(cfg.modes),
                      L = static_cast<std::size_t>(cfg.L);
    if (tmpl.shape() != Shape{C, M, L} || wts.shape() != Shape{M})
      throw std::invalid_argument("world checkpoint does not match world.* configuration");
    std::vector<std::vector<TokenSeq>> templates(C, std::vector<TokenSeq>(M, TokenSeq(L)));
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t i = 0; i < L; ++i) templates[c][m][i] = static_cast<int>(tmpl[(c * M + m) * L + i]);
    w.data_ = SyntheticDataset(cfg.K, cfg.L, cfg.rho, std::move(templates),
                               std::vector<double>(wts.values().begin(), wts.values().end()));
    return w;
  }

  ParamStore to_store() const {
    ParamStore s = params_.clone();
    const std::size_t C = static_cast<std::size_t>(cfg_.C), M = static_cast<std::size_t>(cfg_.modes),
                      L = static_cast<std::size_t>(cfg_.L);
    std::vector<double> tmpl;
    for (std::size_t c = 0; c < C; ++c)
      for (const auto& t : data_.templates(static_cast<int>(c)))
        for (int v : t) tmpl.push_back(v);
    s.add("data.templates", Tensor({C, M, L}, std::move(tmpl)));
    s.add("data.weights", Tensor({M}, data_.mode_weights()));
    return s;
  }

  const WorldConfig& config() const { return cfg_; }
  const SyntheticDataset& data() const { return data_; }
  const ParamStore& params() const { return params_; }
  const Tensor& codebook() const { return params_.get("codebook"); }
  int K() const { return cfg_.K; }
  int L() const { return cfg_.L; }
  int d() const { return cfg_.d; }
  std::size_t cells() const { return static_cast<std::size_t>(cfg_.G * cfg_.G); }
  std::size_t feature_width() const { return cells() * static_cast<std::size_t>(cfg_.F); }

  // Hard codebook lookup for a batch of complete sequences -> [B*L, d].
  Tensor embed(std::span<const TokenSeq> batch) const {
    std::vector<int> flat;
    for (const auto& z : batch) {
      if (!is_complete(z)) throw std::invalid_argument("decode: sequence contains the mask symbol");
      if (z.size() != static_cast<std::size_t>(cfg_.L))
        throw std::invalid_argument("decode: sequence length " + std::to_string(z.size()) + " != L");
      flat.insert(flat.end(), z.begin(), z.end());
    }
    return gather_rows(codebook(), flat);
  }

  // D(e; c): embeddings with B*L*d entries (any layout) -> [B, P].
  Tensor decode(const Tensor& embeddings, std::span<const int> classes) const {
    const std::size_t B = classes.size();
    const std::size_t Ld = static_cast<std::size_t>(cfg_.L * cfg_.d);
    if (embeddings.numel() != B * Ld)
      detail::shape_fail("decode", "expected " + std::to_string(B) + "x" + std::to_string(Ld) +
                                       " embedding values, got " + shape_str(embeddings.shape()));
    std::vector<int> cls(classes.begin(), classes.end());
    for (int c : cls)
      if (c < 0 || c >= cfg_.C) throw std::out_of_range("decode: unknown class " + std::to_string(c));
    const Tensor flat = reshape(embeddings, {B, Ld});
    const Tensor h = tanh(matmul(flat, params_.get("decoder.w1")) + params_.get("decoder.b1") +
                          gather_rows(params_.get("decoder.class"), cls));
    return matmul(h, params_.get("decoder.w2")) + params_.get("decoder.b2");
  }

  Tensor decode_tokens(std::span<const TokenSeq> batch, std::span<const int> classes) const {
    return decode(embed(batch), classes);
  }

  // Phi: [B, P] -> [B, taps * sites, F] with sites = G*G (spatial) or 1 (pooled).
  // Tap outputs are unit-RMS normalized before the grid split.
  Tensor lift(const Tensor& pixels, std::span<const int> taps, bool spatial) const {
    if (taps.empty()) throw std::invalid_argument("lift: tap set must be nonempty");
    if (pixels.ndim() != 2 || pixels.shape()[1] != static_cast<std::size_t>(cfg_.P))
      detail::shape_fail("lift", "expected [B," + std::to_string(cfg_.P) + "], got " + shape_str(pixels.shape()));
    std::vector<bool> wanted(kTaps + 1, false);
    for (int t : taps) {
      if (t < 1 || t > kTaps) throw std::invalid_argument("lift: tap " + std::to_string(t) + " outside 1..4");
      wanted[static_cast<std::size_t>(t)] = true;
    }
    const std::size_t B = pixels.shape()[0], S = cells(), F = static_cast<std::size_t>(cfg_.F);
    std::vector<Tensor> outs;
    Tensor h = pixels;
    for (int k = 1; k <= kTaps; ++k) {
      h = tanh(matmul(h, params_.get("backbone.w" + std::to_string(k))) +
               params_.get("backbone.b" + std::to_string(k)));
      if (!wanted[static_cast<std::size_t>(k)]) continue;
      const Tensor rms = sqrt(mean(square(h), 1, true) + 1e-12);
      Tensor grid = reshape(h / rms, {B, S, F});
      if (!spatial) grid = mean(grid, 1, true);
      outs.push_back(grid);
    }
    return outs.size() == 1 ? outs[0] : concat(outs, 1);
  }

  // Every pair of distinct sequences must decode to distinct vectors, per
  // class. Only checked when K^L is small.
  void validate_injective(double min_distance = 1e-6) const {
    const auto space = cfg_.space_size(4096);
    if (!space) return;
    std::vector<TokenSeq> all;
    for (std::size_t i = 0; i < *space; ++i) all.push_back(sequence_at(i, cfg_.K, cfg_.L));
    const std::size_t P = static_cast<std::size_t>(cfg_.P);
    for (int c = 0; c < cfg_.C; ++c) {
      const std::vector<int> cls(all.size(), c);
      const Tensor x = decode_tokens(all, cls);
      const auto v = x.values();
      for (std::size_t a = 0; a < all.size(); ++a)
        for (std::size_t b = a + 1; b < all.size(); ++b) {
          double d2 = 0.0;
          for (std::size_t j = 0; j < P; ++j) d2 += (v[a * P + j] - v[b * P + j]) * (v[a * P + j] - v[b * P + j]);
          if (std::sqrt(d2) < min_distance)
            throw std::runtime_error("decoder is not injective: sequences " + std::to_string(a) + " and " +
                                     std::to_string(b) + " collide for class " + std::to_string(c));
        }
    }
  }

 private:
  WorldConfig cfg_;
  ParamStore params_;
  SyntheticDataset data_;
};

}  // namespace fpdlab
