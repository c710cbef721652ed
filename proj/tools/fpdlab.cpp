// fpdlab: gen-world | train-teacher | distill | eval | gradcheck

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fpdlab/fpdlab.hpp"

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "flat key=value config file");
  app->add_option("--out", c.out, "output directory (overrides out=)");
  app->add_option("--seed", c.seed, "global seed (overrides seed=)");
  app->add_option("--set", c.sets, "override, key=value (repeatable)");
}

fpdlab::RunConfig build_config(const Common& c) {
  fpdlab::RunConfig cfg = c.config.empty() ? fpdlab::RunConfig{} : fpdlab::load_config(c.config);
  for (const auto& s : c.sets) fpdlab::apply_override(cfg, s);
  if (!c.out.empty()) cfg.out = c.out;
  if (c.seed) cfg.seed = *c.seed;
  fpdlab::resolve_seeds(cfg);
  cfg.validate();
  return cfg;
}

fpdlab::fs::path or_default(const std::string& given, const fpdlab::RunConfig& cfg, const char* name) {
  return given.empty() ? fpdlab::out_dir(cfg) / name : fpdlab::fs::path(given);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fixed-point distillation lab for discrete masked diffusion"};
  app.require_subcommand(1);

  Common common;
  std::string world_path, teacher_path, student_path, resume_path, corrupt;

  auto* gen = app.add_subcommand("gen-world", "build and freeze codebook, decoder, backbone and dataset");
  add_common(gen, common);

  auto* train = app.add_subcommand("train-teacher", "pretrain the masked denoiser");
  add_common(train, common);
  train->add_option("--world", world_path, "world checkpoint (default OUT/world.ckpt)");

  auto* distill = app.add_subcommand("distill", "distill a one-step student from the teacher");
  add_common(distill, common);
  distill->add_option("--world", world_path, "world checkpoint (default OUT/world.ckpt)");
  distill->add_option("--teacher", teacher_path, "teacher checkpoint (default OUT/teacher.ckpt)");
  distill->add_option("--resume", resume_path, "student checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "TV / Fréchet / residual report and sample dump");
  add_common(eval, common);
  eval->add_option("--world", world_path, "world checkpoint (default OUT/world.ckpt)");
  eval->add_option("--teacher", teacher_path, "teacher checkpoint (default OUT/teacher.ckpt)");
  eval->add_option("--student", student_path, "student checkpoint; evaluates the student when given");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference suite and gradient identities");
  add_common(grad, common);
  grad->add_option("--corrupt", corrupt, "scale the backward pass of one operator by 1.5 (negative control)");

  CLI11_PARSE(app, argc, argv);

  try {
    const fpdlab::RunConfig cfg = build_config(common);
    if (*gen) {
      std::cout << "wrote " << fpdlab::cmd_gen_world(cfg).string() << "\n";
    } else if (*train) {
      const auto path = fpdlab::cmd_train_teacher(cfg, or_default(world_path, cfg, "world.ckpt"), &std::cout);
      std::cout << "wrote " << path.string() << "\n";
    } else if (*distill) {
      std::optional<fpdlab::fs::path> resume;
      if (!resume_path.empty()) resume = resume_path;
      const auto path = fpdlab::cmd_distill(cfg, or_default(world_path, cfg, "world.ckpt"),
                                            or_default(teacher_path, cfg, "teacher.ckpt"), resume, &std::cout);
      std::cout << "wrote " << path.string() << "\n";
    } else if (*eval) {
      std::optional<fpdlab::fs::path> student;
      if (!student_path.empty()) student = student_path;
      const auto out = fpdlab::cmd_eval(cfg, or_default(world_path, cfg, "world.ckpt"),
                                        or_default(teacher_path, cfg, "teacher.ckpt"), student);
      for (const auto& r : out.reports) std::cout << r.to_text() << "\n";
    } else if (*grad) {
      return fpdlab::cmd_gradcheck(cfg, std::cout, corrupt).passed ? 0 : 1;
    }
  } catch (const fpdlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
