#pragma once

// Subcommand bodies: world generation, teacher pretraining, distillation,
// evaluation and the gradient suite. Every artifact is written atomically
// next to the resolved config of the run that produced it.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fpdlab/checkpoint.hpp"
#include "fpdlab/config.hpp"
#include "fpdlab/distill.hpp"
#include "fpdlab/gradcheck.hpp"
#include "fpdlab/metrics.hpp"
#include "fpdlab/teacher.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab {

namespace fs = std::filesystem;

inline fs::path out_dir(const RunConfig& cfg) { return fs::path(cfg.out); }

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

inline void write_resolved_config(const RunConfig& cfg, const std::string& name) {
  write_atomic(out_dir(cfg) / (name + ".cfg"), resolved_text(cfg));
}

inline void check_fingerprint(const Checkpoint& ck, const std::string& kind, const std::string& expect,
                              const fs::path& path) {
  if (ck.kind != kind)
    throw CheckpointError(path.string() + ": expected a " + kind + " checkpoint, found '" + ck.kind + "'");
  if (ck.fingerprint != expect)
    throw CheckpointError(path.string() + ": config fingerprint " + ck.fingerprint +
                          " does not match the current configuration (" + expect + ")");
}

// ---------------------------------------------------------------------------
// Loading

inline World load_world(const RunConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("world checkpoint '" + path.string() + "' not found; run gen-world");
  const Checkpoint ck = load_checkpoint(path);
  check_fingerprint(ck, "world", world_fingerprint(cfg), path);
  return World::from_store(cfg.world, take_blocks(ck.blocks, "world/"));
}

inline DenoiserNet load_teacher(const RunConfig& cfg, const World& world, const fs::path& path) {
  if (!fs::exists(path))
    throw std::runtime_error("teacher checkpoint '" + path.string() + "' not found; run train-teacher");
  const Checkpoint ck = load_checkpoint(path);
  check_fingerprint(ck, "teacher", teacher_fingerprint(cfg), path);
  DenoiserNet net(world, cfg.teacher, cfg.teacher_seed_value());
  net.params().assign(take_blocks(ck.blocks, "teacher/"));
  net.params().set_trainable(false);
  return net;
}

inline Checkpoint student_checkpoint(const RunConfig& cfg, const Distiller& d) {
  Checkpoint ck{"student", student_fingerprint(cfg), resolved_text(cfg), {}};
  put_blocks(ck.blocks, "student/", d.student().params());
  put_blocks(ck.blocks, "disc/", d.discriminator().params());
  ck.blocks.add("state/step", pack_u64({d.steps_done()}));
  ck.blocks.add("state/rng", pack_rng(d.rng()));
  put_optimizer(ck.blocks, "state/student_opt/", d.student_optimizer(), d.student().params());
  put_optimizer(ck.blocks, "state/disc_opt/", d.disc_optimizer(), d.discriminator().params());
  return ck;
}

inline void restore_distiller(Distiller& d, const Checkpoint& ck) {
  d.student().params().assign(take_blocks(ck.blocks, "student/"));
  d.discriminator().params().assign(take_blocks(ck.blocks, "disc/"));
  d.set_steps_done(unpack_u64(ck.blocks.get("state/step")).at(0));
  d.rng() = unpack_rng(ck.blocks.get("state/rng"));
  take_optimizer(ck.blocks, "state/student_opt/", d.student_optimizer(), d.student().params());
  take_optimizer(ck.blocks, "state/disc_opt/", d.disc_optimizer(), d.discriminator().params());
}

inline DenoiserNet load_student(const RunConfig& cfg, const World& world, const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("student checkpoint '" + path.string() + "' not found; run distill");
  const Checkpoint ck = load_checkpoint(path);
  check_fingerprint(ck, "student", student_fingerprint(cfg), path);
  DenoiserNet net(world, cfg.teacher, cfg.teacher_seed_value());
  net.params().assign(take_blocks(ck.blocks, "student/"));
  net.params().set_trainable(false);
  return net;
}

// ---------------------------------------------------------------------------
// gen-world

inline fs::path cmd_gen_world(const RunConfig& cfg) {
  cfg.validate();
  const World world(cfg.world);
  Checkpoint ck{"world", world_fingerprint(cfg), resolved_text(cfg), {}};
  put_blocks(ck.blocks, "world/", world.to_store());
  const fs::path path = out_dir(cfg) / "world.ckpt";
  save_checkpoint(path, ck);
  write_resolved_config(cfg, "gen-world");
  return path;
}

// ---------------------------------------------------------------------------
// train-teacher

inline fs::path cmd_train_teacher(const RunConfig& cfg, const fs::path& world_path, std::ostream* log = nullptr) {
  cfg.validate();
  const World world = load_world(cfg, world_path);
  DenoiserNet net(world, cfg.teacher, cfg.teacher_seed_value());
  CounterRng rng(cfg.teacher_seed_value(), 0x7EAC);
  std::ostringstream csv;
  csv << "step,loss,wall_ms\n";
  auto last = std::chrono::steady_clock::now();
  train_teacher(net, world, cfg.schedule, cfg.teacher_train, rng, [&](std::size_t step, double loss, double) {
    const auto now = std::chrono::steady_clock::now();
    const double ms = cfg.wall_clock ? std::chrono::duration<double, std::milli>(now - last).count() : 0.0;
    last = now;
    csv << step << "," << fmt_num(loss) << "," << fmt_num(ms) << "\n";
    if (log && (step + 1) % 500 == 0) *log << "teacher step " << step + 1 << " loss " << fmt_num(loss) << "\n";
  });
  Checkpoint ck{"teacher", teacher_fingerprint(cfg), resolved_text(cfg), {}};
  put_blocks(ck.blocks, "teacher/", net.params());
  const fs::path path = out_dir(cfg) / "teacher.ckpt";
  save_checkpoint(path, ck);
  write_atomic(out_dir(cfg) / "teacher_loss.csv", csv.str());
  write_resolved_config(cfg, "train-teacher");
  return path;
}

// ---------------------------------------------------------------------------
// distill

inline std::string distill_csv_row(const StepMetrics& m, bool wall_clock) {
  std::ostringstream os;
  os << m.step << "," << fmt_num(m.drift_loss) << "," << (m.gan_gen ? fmt_num(*m.gan_gen) : "") << ","
     << (m.gan_disc ? fmt_num(*m.gan_disc) : "") << "," << fmt_num(m.fp_residual) << ","
     << fmt_num(wall_clock ? m.wall_ms : 0.0) << "\n";
  return os.str();
}

inline constexpr const char* kDistillCsvHeader = "step,drift_loss,gan_gen,gan_disc,fp_residual,wall_ms\n";

// Rows of an existing metrics CSV with step < `before`.
inline std::string csv_prefix(const fs::path& path, std::size_t before) {
  std::string out = kDistillCsvHeader;
  if (!fs::exists(path)) return out;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) >= before) break;
    out += line + "\n";
  }
  return out;
}

// Runs distill.steps total steps. With `resume`, training continues from the
// saved step, RNG and optimizer state.
inline fs::path cmd_distill(const RunConfig& cfg, const fs::path& world_path, const fs::path& teacher_path,
                            const std::optional<fs::path>& resume = std::nullopt, std::ostream* log = nullptr) {
  cfg.validate();
  const World world = load_world(cfg, world_path);
  const DenoiserNet teacher = load_teacher(cfg, world, teacher_path);
  Distiller d(world, teacher, cfg.schedule, cfg.distill, cfg.drift, cfg.refine);
  const fs::path path = out_dir(cfg) / "student.ckpt";
  const fs::path csv_path = out_dir(cfg) / "distill.csv";
  std::string csv = kDistillCsvHeader;
  if (resume) {
    const Checkpoint ck = load_checkpoint(*resume);
    check_fingerprint(ck, "student", student_fingerprint(cfg), *resume);
    restore_distiller(d, ck);
    csv = csv_prefix(csv_path, d.steps_done());
  }
  while (d.steps_done() < cfg.distill.steps) {
    const StepMetrics m = d.step();
    csv += distill_csv_row(m, cfg.wall_clock);
    if (log && d.steps_done() % 500 == 0)
      *log << "distill step " << d.steps_done() << " drift " << fmt_num(m.drift_loss) << " residual "
           << fmt_num(m.fp_residual) << "\n";
    if (cfg.checkpoint_every && d.steps_done() % cfg.checkpoint_every == 0 && d.steps_done() < cfg.distill.steps) {
      save_checkpoint(path, student_checkpoint(cfg, d));
      write_atomic(csv_path, csv);
    }
  }
  save_checkpoint(path, student_checkpoint(cfg, d));
  write_atomic(csv_path, csv);
  write_resolved_config(cfg, "distill");
  return path;
}

// ---------------------------------------------------------------------------
// eval

inline std::string samples_csv(const World& world, std::span<const TokenSeq> seqs, std::span<const int> classes) {
  std::ostringstream os;
  os << "class,tokens";
  for (int j = 0; j < world.config().P; ++j) os << ",x" << j;
  os << "\n";
  if (seqs.empty()) return os.str();
  const Tensor x = world.decode_tokens(seqs, classes);
  const std::size_t P = static_cast<std::size_t>(world.config().P);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    os << classes[i] << ",";
    for (std::size_t k = 0; k < seqs[i].size(); ++k) os << (k ? " " : "") << seqs[i][k];
    for (std::size_t j = 0; j < P; ++j) os << "," << fmt_num(x[i * P + j]);
    os << "\n";
  }
  return os.str();
}

// sampler(c, n, rng) -> n sequences of class c.
template <class Sampler>
EvalReport evaluate_sampler(const RunConfig& cfg, const World& world, Sampler&& sampler, const std::string& label) {
  EvalReport rep;
  rep.model = label;
  rep.seed = cfg.eval_seed_value();
  rep.fingerprint = fingerprint(cfg, {"world.", "schedule.", "teacher.", "distill.", "drift.", "eval."});
  const bool enumerable = world.config().space_size(kEnumerationLimit).has_value();
  if (cfg.eval.tv == "on" && !enumerable)
    throw ConfigError("eval.tv", "tv_exact needs K^L <= 100000 (the enumeration preset); use frechet at this scale");
  if (cfg.eval.tv == "on" || (cfg.eval.tv == "auto" && enumerable)) {
    for (int c = 0; c < world.config().C; ++c)
      rep.tv_by_condition[c] = tv_exact(world.data(), sampler, c, cfg.eval.samples, rep.seed * 7919 + c);
    rep.sample_count = cfg.eval.samples * static_cast<std::size_t>(world.config().C);
  }
  const std::size_t nf = cfg.eval.frechet_samples;
  if (nf > static_cast<std::size_t>(world.config().F)) {
    CounterRng rng(rep.seed, 0xF7EC);
    const int C = world.config().C;
    std::vector<TokenSeq> fake, real;
    std::vector<int> cls;
    for (int c = 0; c < C; ++c) {
      const std::size_t n = nf / static_cast<std::size_t>(C) + (static_cast<std::size_t>(c) < nf % C ? 1 : 0);
      for (auto& z : sampler(c, n, rng)) fake.push_back(std::move(z));
      for (auto& z : world.data().sample(c, n, rng)) real.push_back(std::move(z));
      cls.insert(cls.end(), n, c);
    }
    const auto ff = pooled_features(world, fake, cls, cfg.eval.frechet_tap);
    const auto fr = pooled_features(world, real, cls, cfg.eval.frechet_tap);
    const FrechetResult fd = frechet_proxy(ff, fr, static_cast<std::size_t>(world.config().F));
    rep.frechet = fd.value;
    rep.frechet_regularized = fd.regularized;
  }
  return rep;
}

struct EvalOutputs {
  std::vector<EvalReport> reports;
};

inline void write_eval_outputs(const RunConfig& cfg, const World& world, const EvalReport& rep,
                               const std::vector<TokenSeq>& dump, const std::vector<int>& dump_cls) {
  write_atomic(out_dir(cfg) / ("report_" + rep.model + ".txt"), rep.to_text());
  write_atomic(out_dir(cfg) / ("samples_" + rep.model + ".csv"), samples_csv(world, dump, dump_cls));
}

// Evaluates the student when given, otherwise the teacher at every eval.steps.
inline EvalOutputs cmd_eval(const RunConfig& cfg, const fs::path& world_path,
                            const std::optional<fs::path>& teacher_path, const std::optional<fs::path>& student_path) {
  cfg.validate();
  if (!teacher_path && !student_path) throw std::invalid_argument("eval: need a teacher or a student checkpoint");
  const World world = load_world(cfg, world_path);
  std::optional<DenoiserNet> teacher;
  if (teacher_path && (fs::exists(*teacher_path) || !student_path)) teacher = load_teacher(cfg, world, *teacher_path);
  EvalOutputs out;

  auto dump_for = [&](auto&& sampler, std::vector<TokenSeq>& seqs, std::vector<int>& cls) {
    CounterRng rng(cfg.eval_seed_value(), 0xD0);
    for (std::size_t i = 0; i < cfg.eval.dump; ++i) {
      const int c = static_cast<int>(i % static_cast<std::size_t>(world.config().C));
      seqs.push_back(sampler(c, 1, rng).front());
      cls.push_back(c);
    }
  };

  if (student_path) {
    const DenoiserNet student = load_student(cfg, world, *student_path);
    auto sampler = [&](int c, std::size_t n, CounterRng& rng) {
      return student_sample_many(student, c, n, cfg.distill, cfg.schedule, rng);
    };
    EvalReport rep = evaluate_sampler(cfg, world, sampler, "student");
    if (teacher && cfg.eval.residual_samples > 0)
      rep.fp_residual = fixed_point_residual(world, student, *teacher, cfg.distill, cfg.schedule, cfg.drift,
                                             cfg.refine, cfg.eval.residual_samples, cfg.eval_seed_value());
    std::vector<TokenSeq> seqs;
    std::vector<int> cls;
    dump_for(sampler, seqs, cls);
    write_eval_outputs(cfg, world, rep, seqs, cls);
    out.reports.push_back(std::move(rep));
  } else {
    for (std::size_t T : cfg.eval.steps) {
      const SamplerPlan plan = SamplerPlan::make(T, cfg.schedule, static_cast<std::size_t>(world.L()));
      auto sampler = [&](int c, std::size_t n, CounterRng& rng) {
        return sample_many(*teacher, c, plan, n, rng, cfg.refine);
      };
      EvalReport rep = evaluate_sampler(cfg, world, sampler, "teacher_T" + std::to_string(T));
      rep.steps = T;
      std::vector<TokenSeq> seqs;
      std::vector<int> cls;
      dump_for(sampler, seqs, cls);
      write_eval_outputs(cfg, world, rep, seqs, cls);
      out.reports.push_back(std::move(rep));
    }
  }
  write_resolved_config(cfg, "eval");
  return out;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOutcome {
  std::vector<GradRow> rows;
  bool passed = true;
};

// Prints one row per primitive plus the two estimator/objective identities.
inline GradcheckOutcome cmd_gradcheck(const RunConfig& cfg, std::ostream& os, const std::string& corrupt = "") {
  detail::corrupted_op() = corrupt;
  GradcheckOutcome out;
  const GradTolerance tol;
  out.rows = run_primitive_suite(cfg.seed, tol);

  WorldConfig wc;
  wc.K = 5;
  wc.L = 4;
  wc.C = 3;
  wc.seed = cfg.seed;
  const World world(wc);
  double ste_fwd = 0.0, ste_bwd = 0.0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const SteCheck sc = ste_identity(world, 3, cfg.seed * 31 + s);
    ste_fwd = std::max(ste_fwd, sc.forward_bit_exact ? 0.0 : 1.0);
    ste_bwd = std::max(ste_bwd, sc.max_grad_diff);
  }
  out.rows.push_back({"ste_forward_bit_exact", 3, ste_fwd, ste_fwd == 0.0});
  out.rows.push_back({"ste_backward_dual_path", 3, ste_bwd, ste_bwd <= 1e-10});
  double drift = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) drift = std::max(drift, drift_gradient_identity(4 + s, 3, 5, DriftConfig{}, cfg.seed * 17 + s));
  out.rows.push_back({"drift_gradient_identity", 5, drift, drift <= 1e-10});
  detail::corrupted_op().clear();

  os << std::left << std::setw(26) << "check" << std::setw(7) << "cases" << std::setw(14) << "max_error"
     << "status\n";
  for (const auto& r : out.rows) {
    os << std::left << std::setw(26) << r.name << std::setw(7) << r.cases << std::setw(14) << std::setprecision(3)
       << std::scientific << r.max_error << std::defaultfloat << (r.passed ? "PASS" : "FAIL") << "\n";
    out.passed = out.passed && r.passed;
  }
  os << (out.passed ? "all checks passed" : "gradient checks FAILED") << " (primitives: rel " << tol.rel << ", abs "
     << tol.abs << "; identities: 1e-10)\n";
  return out;
}

}  // namespace fpdlab
