#pragma once

// Flat key=value run configuration with namespaced keys. Unknown keys are
// rejected; the resolved form lists every key in a fixed order.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fpdlab/distill.hpp"
#include "fpdlab/drift.hpp"
#include "fpdlab/masking.hpp"
#include "fpdlab/nn.hpp"
#include "fpdlab/teacher.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

struct EvalConfig {
  std::size_t samples = 20000;             // per class, for tv_exact
  std::vector<std::size_t> steps{1, 2, 4, 8};  // teacher sampler step counts
  std::string tv = "auto";                 // auto|on|off
  int frechet_tap = 4;
  std::size_t frechet_samples = 2000;
  std::size_t residual_samples = 1000;
  std::size_t dump = 256;
  std::optional<std::uint64_t> seed;
};

struct RunConfig {
  WorldConfig world;
  NoiseSchedule schedule;
  DenoiserConfig teacher;
  TeacherTrainConfig teacher_train;
  RefineOptions refine;
  std::optional<std::uint64_t> teacher_seed;
  DistillConfig distill;
  bool distill_seed_set = false;
  std::size_t checkpoint_every = 0;
  DriftConfig drift;
  EvalConfig eval;
  std::uint64_t seed = 1;
  std::string out = "run";
  bool wall_clock = true;
  bool world_seed_set = false;

  std::uint64_t teacher_seed_value() const { return teacher_seed.value_or(seed); }
  std::uint64_t eval_seed_value() const { return eval.seed.value_or(seed); }

  void validate() const {
    world.validate();
    if (teacher_train.steps == 0) throw ConfigError("teacher.steps", "must be positive");
    if (teacher_train.batch == 0) throw ConfigError("teacher.batch", "must be positive");
    if (!(teacher_train.lr > 0.0)) throw ConfigError("teacher.lr", "must be positive");
    if (teacher.width <= 0) throw ConfigError("teacher.width", "must be positive");
    if (teacher.hidden <= 0) throw ConfigError("teacher.hidden", "must be positive");
    if (teacher.blocks <= 0) throw ConfigError("teacher.blocks", "must be positive");
    distill.validate();
    drift.validate();
    if (eval.samples == 0) throw ConfigError("eval.samples", "must be positive");
    if (eval.steps.empty()) throw ConfigError("eval.steps", "at least one step count required");
    for (std::size_t t : eval.steps)
      if (t == 0) throw ConfigError("eval.steps", "step counts must be positive");
    if (eval.tv != "auto" && eval.tv != "on" && eval.tv != "off") throw ConfigError("eval.tv", "expected auto|on|off");
    if (eval.frechet_tap < 1 || eval.frechet_tap > World::kTaps) throw ConfigError("eval.frechet_tap", "must lie in 1..4");
    if (out.empty()) throw ConfigError("out", "must be nonempty");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key, "cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true|false, got '" + v + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>) s += fmt_double(xs[i]);
    else s += std::to_string(xs[i]);
  }
  return s;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<Field>& fields() {
  using R = RunConfig;
  using S = const std::string&;
  auto i = [](S k, S v) { return parse_number<int>(k, v); };
  auto z = [](S k, S v) { return parse_number<std::size_t>(k, v); };
  auto u = [](S k, S v) { return parse_number<std::uint64_t>(k, v); };
  auto d = [](S k, S v) { return parse_number<double>(k, v); };
  auto str = [](auto x) { return std::to_string(x); };
  static const std::vector<Field> table = {
      {"seed", [=](R& c, S v) { c.seed = u("seed", v); }, [=](const R& c) { return str(c.seed); }},
      {"out", [](R& c, S v) { c.out = v; }, [](const R& c) { return c.out; }},
      {"wall_clock", [](R& c, S v) { c.wall_clock = parse_bool("wall_clock", v); },
       [](const R& c) { return std::string(c.wall_clock ? "true" : "false"); }},

      {"world.K", [=](R& c, S v) { c.world.K = i("world.K", v); }, [=](const R& c) { return str(c.world.K); }},
      {"world.L", [=](R& c, S v) { c.world.L = i("world.L", v); }, [=](const R& c) { return str(c.world.L); }},
      {"world.d", [=](R& c, S v) { c.world.d = i("world.d", v); }, [=](const R& c) { return str(c.world.d); }},
      {"world.P", [=](R& c, S v) { c.world.P = i("world.P", v); }, [=](const R& c) { return str(c.world.P); }},
      {"world.F", [=](R& c, S v) { c.world.F = i("world.F", v); }, [=](const R& c) { return str(c.world.F); }},
      {"world.G", [=](R& c, S v) { c.world.G = i("world.G", v); }, [=](const R& c) { return str(c.world.G); }},
      {"world.C", [=](R& c, S v) { c.world.C = i("world.C", v); }, [=](const R& c) { return str(c.world.C); }},
      {"world.decoder_hidden", [=](R& c, S v) { c.world.decoder_hidden = i("world.decoder_hidden", v); },
       [=](const R& c) { return str(c.world.decoder_hidden); }},
      {"world.rho", [=](R& c, S v) { c.world.rho = d("world.rho", v); },
       [](const R& c) { return fmt_double(c.world.rho); }},
      {"world.modes", [=](R& c, S v) { c.world.modes = i("world.modes", v); },
       [=](const R& c) { return str(c.world.modes); }},
      {"world.mode_weight", [=](R& c, S v) { c.world.mode_weight = d("world.mode_weight", v); },
       [](const R& c) { return fmt_double(c.world.mode_weight); }},
      {"world.seed",
       [=](R& c, S v) {
         c.world.seed = u("world.seed", v);
         c.world_seed_set = true;
       },
       [=](const R& c) { return str(c.world_seed_set ? c.world.seed : c.seed); }},

      {"schedule.kind", [](R& c, S v) { c.schedule.kind = parse_schedule(v); },
       [](const R& c) { return to_string(c.schedule.kind); }},

      {"teacher.width", [=](R& c, S v) { c.teacher.width = i("teacher.width", v); },
       [=](const R& c) { return str(c.teacher.width); }},
      {"teacher.hidden", [=](R& c, S v) { c.teacher.hidden = i("teacher.hidden", v); },
       [=](const R& c) { return str(c.teacher.hidden); }},
      {"teacher.blocks", [=](R& c, S v) { c.teacher.blocks = i("teacher.blocks", v); },
       [=](const R& c) { return str(c.teacher.blocks); }},
      {"teacher.steps", [=](R& c, S v) { c.teacher_train.steps = z("teacher.steps", v); },
       [=](const R& c) { return str(c.teacher_train.steps); }},
      {"teacher.batch", [=](R& c, S v) { c.teacher_train.batch = z("teacher.batch", v); },
       [=](const R& c) { return str(c.teacher_train.batch); }},
      {"teacher.lr", [=](R& c, S v) { c.teacher_train.lr = d("teacher.lr", v); },
       [](const R& c) { return fmt_double(c.teacher_train.lr); }},
      {"teacher.seed", [=](R& c, S v) { c.teacher_seed = u("teacher.seed", v); },
       [=](const R& c) { return str(c.teacher_seed_value()); }},
      {"teacher.reveal", [](R& c, S v) { c.refine.reveal = parse_reveal(v); },
       [](const R& c) { return std::string(c.refine.reveal == RevealRule::confidence ? "confidence" : "random"); }},
      {"teacher.decode", [](R& c, S v) { c.refine.decode = parse_decode(v); },
       [](const R& c) { return std::string(c.refine.decode == DecodeRule::sample ? "sample" : "argmax"); }},

      {"distill.r_init", [=](R& c, S v) { c.distill.r_init = d("distill.r_init", v); },
       [](const R& c) { return fmt_double(c.distill.r_init); }},
      {"distill.r_lo", [=](R& c, S v) { c.distill.r_lo = d("distill.r_lo", v); },
       [](const R& c) { return fmt_double(c.distill.r_lo); }},
      {"distill.r_hi", [=](R& c, S v) { c.distill.r_hi = d("distill.r_hi", v); },
       [](const R& c) { return fmt_double(c.distill.r_hi); }},
      {"distill.lambda", [=](R& c, S v) { c.distill.lambda = d("distill.lambda", v); },
       [](const R& c) { return fmt_double(c.distill.lambda); }},
      {"distill.source", [](R& c, S v) { c.distill.source = parse_source(v); },
       [](const R& c) { return to_string(c.distill.source); }},
      {"distill.estimator", [](R& c, S v) { c.distill.estimator = parse_estimator(v); },
       [](const R& c) { return to_string(c.distill.estimator); }},
      {"distill.class_mix", [](R& c, S v) { c.distill.class_mix = parse_class_mix(v); },
       [](const R& c) { return to_string(c.distill.class_mix); }},
      {"distill.batch", [=](R& c, S v) { c.distill.batch = z("distill.batch", v); },
       [=](const R& c) { return str(c.distill.batch); }},
      {"distill.steps", [=](R& c, S v) { c.distill.steps = z("distill.steps", v); },
       [=](const R& c) { return str(c.distill.steps); }},
      {"distill.lr", [=](R& c, S v) { c.distill.lr = d("distill.lr", v); },
       [](const R& c) { return fmt_double(c.distill.lr); }},
      {"distill.disc_lr", [=](R& c, S v) { c.distill.disc_lr = d("distill.disc_lr", v); },
       [](const R& c) { return fmt_double(c.distill.disc_lr); }},
      {"distill.disc_hidden", [=](R& c, S v) { c.distill.disc_hidden = i("distill.disc_hidden", v); },
       [=](const R& c) { return str(c.distill.disc_hidden); }},
      {"distill.seed",
       [=](R& c, S v) {
         c.distill.seed = u("distill.seed", v);
         c.distill_seed_set = true;
       },
       [=](const R& c) { return str(c.distill_seed_set ? c.distill.seed : c.seed); }},
      {"distill.checkpoint_every", [=](R& c, S v) { c.checkpoint_every = z("distill.checkpoint_every", v); },
       [=](const R& c) { return str(c.checkpoint_every); }},

      {"drift.bandwidths", [](R& c, S v) { c.drift.bandwidths = parse_list<double>("drift.bandwidths", v); },
       [](const R& c) { return join(c.drift.bandwidths); }},
      {"drift.eps", [=](R& c, S v) { c.drift.eps_rms = d("drift.eps", v); },
       [](const R& c) { return fmt_double(c.drift.eps_rms); }},
      {"drift.space", [](R& c, S v) { c.drift.space = parse_drift_space(v); },
       [](const R& c) { return to_string(c.drift.space); }},
      {"drift.taps", [](R& c, S v) { c.drift.taps = parse_list<int>("drift.taps", v); },
       [](const R& c) { return join(c.drift.taps); }},
      {"drift.spatial", [](R& c, S v) { c.drift.spatial = parse_bool("drift.spatial", v); },
       [](const R& c) { return std::string(c.drift.spatial ? "true" : "false"); }},

      {"eval.samples", [=](R& c, S v) { c.eval.samples = z("eval.samples", v); },
       [=](const R& c) { return str(c.eval.samples); }},
      {"eval.steps", [](R& c, S v) { c.eval.steps = parse_list<std::size_t>("eval.steps", v); },
       [](const R& c) { return join(c.eval.steps); }},
      {"eval.tv", [](R& c, S v) { c.eval.tv = v; }, [](const R& c) { return c.eval.tv; }},
      {"eval.frechet_tap", [=](R& c, S v) { c.eval.frechet_tap = i("eval.frechet_tap", v); },
       [=](const R& c) { return str(c.eval.frechet_tap); }},
      {"eval.frechet_samples", [=](R& c, S v) { c.eval.frechet_samples = z("eval.frechet_samples", v); },
       [=](const R& c) { return str(c.eval.frechet_samples); }},
      {"eval.residual_samples", [=](R& c, S v) { c.eval.residual_samples = z("eval.residual_samples", v); },
       [=](const R& c) { return str(c.eval.residual_samples); }},
      {"eval.dump", [=](R& c, S v) { c.eval.dump = z("eval.dump", v); }, [=](const R& c) { return str(c.eval.dump); }},
      {"eval.seed", [=](R& c, S v) { c.eval.seed = u("eval.seed", v); },
       [=](const R& c) { return str(c.eval_seed_value()); }},
  };
  return table;
}

inline const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError(key, "unknown configuration key");
}

}  // namespace detail

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  detail::field(key).set(cfg, value);
}

inline std::string get_key(const RunConfig& cfg, const std::string& key) { return detail::field(key).get(cfg); }

// "key=value" as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, "override must have the form key=value");
  set_key(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

// Lines of "key = value"; '#' starts a comment.
inline void apply_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    apply_override(cfg, line);
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  apply_text(cfg, ss.str());
  return cfg;
}

// Every key with its effective value, one per line, in table order.
inline std::string resolved_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& f : detail::fields()) s += f.key + "=" + f.get(cfg) + "\n";
  return s;
}

// Hash over the resolved values of keys whose name starts with one of the
// given prefixes, excluding the listed keys.
inline std::string fingerprint(const RunConfig& cfg, const std::vector<std::string>& prefixes,
                               const std::vector<std::string>& exclude = {}) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& f : detail::fields()) {
    bool take = false;
    for (const auto& p : prefixes) take = take || f.key.starts_with(p);
    for (const auto& e : exclude) take = take && f.key != e;
    if (!take) continue;
    const std::string line = f.key + "=" + f.get(cfg) + "\n";
    h = fnv1a(line.data(), line.size(), h);
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string world_fingerprint(const RunConfig& c) { return fingerprint(c, {"world."}); }
inline std::string teacher_fingerprint(const RunConfig& c) {
  return fingerprint(c, {"world.", "schedule.", "teacher."});
}
// Step count and checkpoint cadence are excluded so a run can be extended.
inline std::string student_fingerprint(const RunConfig& c) {
  return fingerprint(c, {"world.", "schedule.", "teacher.", "distill.", "drift."},
                     {"distill.steps", "distill.checkpoint_every"});
}

// Section seeds that were not given explicitly follow the global seed.
inline void resolve_seeds(RunConfig& cfg) {
  if (!cfg.world_seed_set) cfg.world.seed = cfg.seed;
  if (!cfg.distill_seed_set) cfg.distill.seed = cfg.seed;
}

}  // namespace fpdlab
