// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tqdit/diffusion.hpp"
#include "tqdit/model.hpp"

namespace tqdit {

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 16;

inline void check_bits(int bits) {
  if (bits < kMinBits || bits > kMaxBits) throw ConfigError("bit width " + std::to_string(bits) + " unsupported");
}

/// Round half to even under the default floating-point environment.
inline double round_half_even(double v) { return std::nearbyint(v); }

/// Affine uniform quantizer: q = clip(round(x/s) + z, 0, 2^k-1), x_hat = s (q - z).
struct QuantParams {
  double scale = 1.0;
  std::int64_t zero_point = 0;
  int bits = 8;
  bool degenerate = false;  // min-max init saw a constant tensor

  std::int64_t max_code() const { return (std::int64_t{1} << bits) - 1; }

  void validate() const {
    check_bits(bits);
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("quantizer step size must be positive");
    if (zero_point < 0 || zero_point > max_code()) throw ConfigError("zero point outside the code range");
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline constexpr double kDegenerateScale = 1e-8;

/// Zero point for step `s` so that `range_min` lands on the grid, clamped to the code range.
inline std::int64_t zero_point_for(double range_min, double s, int bits) {
  const double z = -round_half_even(range_min / s);
  return static_cast<std::int64_t>(std::clamp(z, 0.0, static_cast<double>((std::int64_t{1} << bits) - 1)));
}

/// Min-max initialization, s = (max - min)/(2^k - 1), z = -round(min/s).
/// The range is widened to contain zero so the zero point stays in range.
inline QuantParams init_minmax(std::span<const double> x, int bits) {
  check_bits(bits);
  if (x.empty()) throw ContractError("init_minmax on an empty tensor");
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  if (*lo_it == *hi_it) return QuantParams{kDegenerateScale, 0, bits, true};
  const double lo = std::min(*lo_it, 0.0), hi = std::max(*hi_it, 0.0);
  const double s = (hi - lo) / static_cast<double>((std::int64_t{1} << bits) - 1);
  return QuantParams{s, zero_point_for(lo, s, bits), bits, false};
}

inline QuantParams init_minmax(const Tensor& x, int bits) { return init_minmax(x.data(), bits); }

/// Integer code of x before dequantization.
inline std::int64_t uniform_code(double x, const QuantParams& p) {
  const double q = round_half_even(x / p.scale) + static_cast<double>(p.zero_point);
  return static_cast<std::int64_t>(std::clamp(q, 0.0, static_cast<double>(p.max_code())));
}

inline double quantize_value(double x, const QuantParams& p) {
  return p.scale * static_cast<double>(uniform_code(x, p) - p.zero_point);
}

inline Tensor quantize_uniform(const Tensor& x, const QuantParams& p) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = quantize_value(x[i], p);
  return y;
}

enum class RegionKind { post_softmax, post_gelu };

inline const char* to_string(RegionKind k) { return k == RegionKind::post_softmax ? "post-softmax" : "post-gelu"; }

/// Two-region quantizer. Codes are one region bit plus k-1 magnitude bits.
///
/// post-softmax: [0, b) uses step s1 and [b, 1] the fixed step s2 = 2^-(k-1),
/// with boundary b = 2^(k-1) s1. The boundary must not exceed the largest
/// coarse level (2^(k-1) - 1) s2, which keeps the map monotone.
///
/// post-gelu: negatives use s1 down to -2^(k-1) s1, non-negatives use s2 up
/// to (2^(k-1) - 1) s2.
struct MultiRegionParams {
  RegionKind kind = RegionKind::post_softmax;
  double s1 = 1.0;
  double s2 = 1.0;
  int bits = 8;

  static double softmax_coarse_step(int bits) { return std::ldexp(1.0, -(bits - 1)); }

  static MultiRegionParams softmax(double s1, int bits) {
    MultiRegionParams p{RegionKind::post_softmax, s1, softmax_coarse_step(bits), bits};
    p.validate();
    return p;
  }

  static MultiRegionParams gelu(double s1, double s2, int bits) {
    MultiRegionParams p{RegionKind::post_gelu, s1, s2, bits};
    p.validate();
    return p;
  }

  std::int64_t half() const { return std::int64_t{1} << (bits - 1); }
  double boundary() const { return static_cast<double>(half()) * s1; }

  /// Largest admissible fine step for softmax at this bit width.
  static double softmax_max_s1(int bits) {
    const double half = std::ldexp(1.0, bits - 1);
    return (half - 1.0) * softmax_coarse_step(bits) / half;
  }

  void validate() const {
    check_bits(bits);
    if (!(s1 > 0.0) || !(s2 > 0.0) || !std::isfinite(s1) || !std::isfinite(s2)) {
      throw ConfigError("multi-region step sizes must be positive");
    }
    if (kind == RegionKind::post_softmax) {
      if (s2 != softmax_coarse_step(bits)) throw ConfigError("post-softmax coarse step must be 2^-(k-1)");
      if (boundary() > static_cast<double>(half() - 1) * s2) throw ConfigError("post-softmax region boundary beyond the coarse range");
    }
  }

  friend bool operator==(const MultiRegionParams&, const MultiRegionParams&) = default;
};

inline constexpr double kSoftmaxRangeTolerance = 1e-6;

inline double quantize_mrq_softmax_value(double a, const MultiRegionParams& p) {
  const double top = static_cast<double>(p.half() - 1);
  const double b = p.boundary();
  if (a < b) return p.s1 * std::clamp(round_half_even(a / p.s1), 0.0, top);
  const double lo = std::min(std::ceil(b / p.s2), top);
  return p.s2 * std::clamp(round_half_even(a / p.s2), lo, top);
}

inline double quantize_mrq_gelu_value(double x, const MultiRegionParams& p) {
  const double h = static_cast<double>(p.half());
  if (x < 0.0) return p.s1 * std::clamp(round_half_even(x / p.s1), -h, 0.0);
  return p.s2 * std::clamp(round_half_even(x / p.s2), 0.0, h - 1.0);
}

inline Tensor quantize_mrq_softmax(const Tensor& a, const MultiRegionParams& p) {
  if (p.kind != RegionKind::post_softmax) throw ContractError("post-softmax quantizer given post-gelu parameters");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < -kSoftmaxRangeTolerance || a[i] > 1.0 + kSoftmaxRangeTolerance) {
      throw ContractError("post-softmax quantizer input " + std::to_string(a[i]) + " outside [0, 1]");
    }
    y[i] = quantize_mrq_softmax_value(a[i], p);
  }
  return y;
}

inline Tensor quantize_mrq_gelu(const Tensor& x, const MultiRegionParams& p) {
  if (p.kind != RegionKind::post_gelu) throw ContractError("post-gelu quantizer given post-softmax parameters");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = quantize_mrq_gelu_value(x[i], p);
  return y;
}

inline Tensor quantize_mrq(const Tensor& x, const MultiRegionParams& p) {
  return p.kind == RegionKind::post_softmax ? quantize_mrq_softmax(x, p) : quantize_mrq_gelu(x, p);
}

/// Lowest value GELU attains (at x ~ -0.7518).
inline constexpr double kGeluMinimum = -0.16997120747990;

/// Softmax init: fine step equal to the uniform min-max step over [0, max].
inline MultiRegionParams init_mrq_softmax(std::span<const double> a, int bits) {
  check_bits(bits);
  double hi = 0.0;
  for (double v : a) hi = std::max(hi, v);
  double s1 = hi / static_cast<double>((std::int64_t{1} << bits) - 1);
  if (!(s1 > 0.0)) s1 = kDegenerateScale;
  s1 = std::min(s1, MultiRegionParams::softmax_max_s1(bits));
  return MultiRegionParams::softmax(s1, bits);
}

/// GELU init: each region's step covers that side's observed range.
inline MultiRegionParams init_mrq_gelu(std::span<const double> x, int bits) {
  check_bits(bits);
  double lo = 0.0, hi = 0.0;
  for (double v : x) lo = std::min(lo, v), hi = std::max(hi, v);
  const double half = std::ldexp(1.0, bits - 1);
  double s1 = -lo / half, s2 = hi / (half - 1.0);
  if (!(s1 > 0.0)) s1 = kDegenerateScale;
  if (!(s2 > 0.0)) s2 = kDegenerateScale;
  return MultiRegionParams::gelu(s1, s2, bits);
}

/// Contiguous timestep groups G_i = [i T/G, (i+1) T/G - 1], zero-based i.
inline int group_of(int t, int timesteps, int groups) {
  if (groups < 1 || timesteps < 1 || timesteps % groups != 0) {
    throw ConfigError("group count " + std::to_string(groups) + " must divide timesteps " + std::to_string(timesteps));
  }
  if (t < 0 || t >= timesteps) throw DomainError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(timesteps) + ")");
  return t / (timesteps / groups);
}

/// Per-group post-softmax parameters.
struct TimeGroupedParams {
  int timesteps = 0;
  int group_count = 0;
  std::vector<MultiRegionParams> groups;

  const MultiRegionParams& for_timestep(int t) const {
    const int g = group_of(t, timesteps, group_count);
    if (groups.size() != static_cast<std::size_t>(group_count)) {
      throw ConfigError("time-grouped quantizer has " + std::to_string(groups.size()) + " entries for " +
                        std::to_string(group_count) + " groups");
    }
    return groups[static_cast<std::size_t>(g)];
  }

  friend bool operator==(const TimeGroupedParams&, const TimeGroupedParams&) = default;
};

inline Tensor quantize_tgq(const Tensor& a, int t, const TimeGroupedParams& p) {
  return quantize_mrq_softmax(a, p.for_timestep(t));
}

/// Activation quantizer of one site operand; monostate means full precision.
using ActQuant = std::variant<std::monostate, QuantParams, MultiRegionParams, TimeGroupedParams>;

inline bool is_full_precision(const ActQuant& q) { return std::holds_alternative<std::monostate>(q); }

inline Tensor apply_act(const ActQuant& q, const Tensor& x, int t) {
  return std::visit(
      [&](const auto& p) -> Tensor {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, std::monostate>) return x;
        else if constexpr (std::is_same_v<P, QuantParams>) return quantize_uniform(x, p);
        else if constexpr (std::is_same_v<P, MultiRegionParams>) return quantize_mrq(x, p);
        else return quantize_tgq(x, t, p);
      },
      q);
}

/// Weight quantizer: one entry (per-tensor) or one per output row; empty means full precision.
struct WeightQuant {
  std::vector<QuantParams> channels;

  bool full_precision() const { return channels.empty(); }
  friend bool operator==(const WeightQuant&, const WeightQuant&) = default;
};

inline Tensor quantize_weight(const Tensor& w, const WeightQuant& q) {
  if (q.full_precision()) return w;
  if (q.channels.size() == 1) return quantize_uniform(w, q.channels.front());
  if (w.rank() != 2 || q.channels.size() != w.dim(0)) throw DimensionError("per-channel quantizer does not match weight rows");
  Tensor y(w.shape());
  const std::size_t cols = w.dim(1);
  for (std::size_t r = 0; r < w.dim(0); ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = quantize_value(w[r * cols + c], q.channels[r]);
  return y;
}

/// Quantizer assignment of one site: a = linear input or first matmul operand,
/// b = second matmul operand.
struct SiteQuant {
  bool enabled = false;
  WeightQuant weight;
  ActQuant a;
  ActQuant b;
};

/// A DiT with fake quantization at its registered sites.
///
/// Holds a reference to the model, which must outlive it. Every site starts
/// disabled (full precision); with all sites disabled the forward is the
/// full-precision forward exactly.
class QuantizedModel {
 public:
  explicit QuantizedModel(const DiTModel& model)
      : model_(&model), sites_(model.sites().size()), qweights_(model.sites().size()) {}

  const DiTModel& model() const { return *model_; }
  const std::vector<SiteQuant>& sites() const { return sites_; }
  const SiteQuant& site(std::size_t i) const { return sites_.at(i); }

  void set(std::size_t i, SiteQuant q) {
    const Site& s = model_->site(i);
    if (has_weight(s.kind)) {
      qweights_.at(i) = q.weight.full_precision() ? Tensor() : quantize_weight(model_->param(s.weight), q.weight);
    } else if (!q.weight.full_precision()) {
      throw ConfigError("matmul site " + s.id + " has no weight to quantize");
    }
    sites_.at(i) = std::move(q);
  }

  void set_enabled(std::size_t i, bool on) { sites_.at(i).enabled = on; }
  void set_all_enabled(bool on) {
    for (auto& s : sites_) s.enabled = on;
  }

  /// Quantized weight of site i (empty when full precision).
  const Tensor& quantized_weight(std::size_t i) const { return qweights_.at(i); }

  Tensor predict(const Tensor& x_t, int t, int y) const;

  NoisePredictor predictor() const {
    return [this](const Tensor& x, int t, int y) { return predict(x, t, y); };
  }

 private:
  const DiTModel* model_;
  std::vector<SiteQuant> sites_;
  std::vector<Tensor> qweights_;
};

/// Forward hook applying a QuantizedModel's site quantizers.
struct QuantHook {
  const QuantizedModel& qm;

  Var quantized_operand(Var x, const ActQuant& q, int t) {
    if (is_full_precision(q)) return x;
    return ops::fake_quant(x, apply_act(q, x.value(), t));
  }

  Var linear(const Site& site, Var x, Var w, Var b, int t) {
    const SiteQuant& q = qm.site(site.index);
    if (!q.enabled) return ops::linear(x, w, b);
    Var wq = q.weight.full_precision() ? w : x.graph->constant(qm.quantized_weight(site.index));
    return ops::linear(quantized_operand(x, q.a, t), wq, b);
  }

  Var matmul(const Site& site, Var a, Var b, int t) {
    const SiteQuant& q = qm.site(site.index);
    if (!q.enabled) return ops::matmul(a, b);
    return ops::matmul(quantized_operand(a, q.a, t), quantized_operand(b, q.b, t));
  }

  void observe(const std::string&, Var) {}
};

inline Tensor QuantizedModel::predict(const Tensor& x_t, int t, int y) const {
  Graph g(false);
  auto params = bind_parameters(g, *model_, false);
  QuantHook hook{*this};
  return dit_forward(g, *model_, params, x_t, t, y, hook).value();
}

}  // namespace tqdit
