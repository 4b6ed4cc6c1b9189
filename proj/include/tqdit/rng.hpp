// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include "tqdit/tensor.hpp"

namespace tqdit {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream); streams let parallel workers draw
/// per-item randomness without depending on scheduling order.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x7144u};
  return Rng(seq);
}

inline double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = stddev * normal(rng);
  return t;
}

}  // namespace tqdit
