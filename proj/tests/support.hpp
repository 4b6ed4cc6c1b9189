// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <string>

#include <unistd.h>

#include "tqdit/tqdit.hpp"

namespace tqdit::testing {

/// A model small enough for per-test training and exhaustive checks.
inline DiTConfig tiny_config() {
  DiTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.num_blocks = 1;
  c.num_heads = 2;
  c.num_classes = 4;
  c.mlp_ratio = 2;
  c.timesteps = 10;
  return c;
}

/// Linear schedule with beta_T scaled so short schedules still end near pure noise.
inline NoiseSchedule schedule_for(const DiTConfig& c) {
  return make_schedule(c.timesteps, 1e-4, std::min(0.5, 2.0 / c.timesteps));
}

/// The default toy model and schedule used by tests that need trained weights.
struct Toy {
  DiTConfig config;
  NoiseSchedule schedule;
  SyntheticDataset data;
  DiTModel model;
};

inline TrainOptions toy_train_options() {
  TrainOptions o;
  o.steps = 2000;
  o.batch_size = 32;
  o.seed = 2;
  return o;
}

/// Trains the default toy once and caches the checkpoint under
/// TQDIT_CACHE_DIR (default: the system temp directory).
inline const Toy& trained_toy() {
  static const Toy toy = [] {
    DiTConfig c;
    NoiseSchedule s = make_schedule(c.timesteps, 1e-4, 0.02);
    SyntheticDataset data(1, c);
    const TrainOptions o = toy_train_options();
    const char* dir = std::getenv("TQDIT_CACHE_DIR");
    const fs::path path = (dir ? fs::path(dir) : fs::temp_directory_path()) / ("toy_" + std::to_string(o.steps) + "_" +
                                                       std::to_string(o.batch_size) + "_" + std::to_string(o.seed) + ".ckpt");
    if (fs::exists(path)) {
      try {
        DiTModel m = load_checkpoint(path);
        if (m.config() == c) return Toy{c, s, data, std::move(m)};
      } catch (const std::exception&) {
      }
    }
    DiTModel m = train_fp(c, s, data, o);
    const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
    save_checkpoint(tmp, m);
    fs::rename(tmp, path);
    return Toy{c, s, data, std::move(m)};
  }();
  return toy;
}

inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tqdit_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace tqdit::testing
