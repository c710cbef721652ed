#pragma once

// Enumeration preset shared by the slow tests and the acceptance run.
// Mirrors configs/enum.cfg.

#include "fpdlab/config.hpp"
#include "fpdlab/teacher.hpp"
#include "fpdlab/toyworld.hpp"

namespace fpdlab::testing {

inline WorldConfig enum_world_config() {
  WorldConfig c;
  c.K = 3;
  c.L = 4;
  c.C = 4;
  c.modes = 2;
  c.mode_weight = 0.8;
  c.rho = 0.02;
  c.seed = 1;
  return c;
}

inline DenoiserConfig enum_teacher_config() { return DenoiserConfig{32, 64, 2}; }

inline TeacherTrainConfig enum_teacher_train() { return TeacherTrainConfig{3000, 64, 3e-3}; }

inline RefineOptions enum_refine() { return RefineOptions{RevealRule::random, DecodeRule::sample}; }

inline DenoiserNet train_enum_teacher(const World& world, std::size_t steps = 3000, std::uint64_t seed = 7) {
  DenoiserNet net(world, enum_teacher_config(), seed);
  TeacherTrainConfig tc = enum_teacher_train();
  tc.steps = steps;
  CounterRng rng(seed, 0x7EAC);
  train_teacher(net, world, NoiseSchedule{ScheduleKind::cosine}, tc, rng, [](std::size_t, double, double) {});
  net.params().set_trainable(false);
  return net;
}

}  // namespace fpdlab::testing
