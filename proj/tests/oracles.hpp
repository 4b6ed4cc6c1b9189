// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

// Reference computations written without the calibration module: synthetic
// site data and an exhaustive search over the weighted site objective.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tqdit/tqdit.hpp"

namespace tqdit::testing {

/// Rows drawn from Dirichlet(alpha); a fraction of rows uses a small alpha and
/// comes out peaked. Values sit mostly near zero with rare large entries.
inline Tensor dirichlet_rows(std::size_t rows, std::size_t cols, double alpha, double peaked_fraction, Rng& rng) {
  Tensor a({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    std::gamma_distribution<double> gamma(uniform(rng) < peaked_fraction ? 0.05 : alpha, 1.0);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += a[r * cols + c] = gamma(rng) + 1e-300;
    for (std::size_t c = 0; c < cols; ++c) a[r * cols + c] /= sum;
  }
  return a;
}

/// Integer matrix in [-31, 32] with both ends present, so a 6-bit min-max
/// quantizer (step 1, zero point 31) represents it exactly.
inline Tensor exact_operand(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor b({rows, cols});
  for (double& v : b.data()) v = std::floor(uniform(rng, -31.0, 33.0));
  b[0] = -31;
  b[1] = 32;
  return b;
}

inline Tensor chi_square_weights(const Shape& shape, Rng& rng) {
  Tensor g(shape);
  for (double& v : g.data()) {
    const double n = normal(rng);
    v = n * n;
  }
  return g;
}

/// Stats of a single matmul site: outputs recomputed at full precision.
inline LayerStats matmul_site_stats(const std::vector<Tensor>& a, const std::vector<Tensor>& b, std::vector<int> ts,
                                    int timesteps, Rng& rng) {
  LayerStats st;
  st.total_timesteps = timesteps;
  st.timesteps = std::move(ts);
  st.sites.resize(1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    SiteRecord& r = st.sites[0];
    r.a.push_back(a[i]);
    r.b.push_back(b[i]);
    r.output.push_back(kernels::matmul(a[i], b[i]));
    r.g2.push_back(chi_square_weights(r.output.back().shape(), rng));
  }
  return st;
}

// ---- brute-force reference for linear sites ----

inline double ref_quantize(double x, double s, std::int64_t z, int bits) {
  const double max_code = std::ldexp(1.0, bits) - 1.0;
  double q = std::nearbyint(x / s) + static_cast<double>(z);
  q = q < 0.0 ? 0.0 : (q > max_code ? max_code : q);
  return s * (q - static_cast<double>(z));
}

struct RefQuant {
  double step;
  std::int64_t zero;
};

inline std::int64_t ref_zero(double lo, double s, int bits) {
  double z = -std::nearbyint(lo / s);
  const double max_code = std::ldexp(1.0, bits) - 1.0;
  z = z < 0.0 ? 0.0 : (z > max_code ? max_code : z);
  return static_cast<std::int64_t>(z);
}

/// Min-max step and zero point over a range widened to contain zero.
inline RefQuant ref_minmax(double lo, double hi, int bits) {
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const double s = (hi - lo) / (std::ldexp(1.0, bits) - 1.0);
  return {s, ref_zero(lo, s, bits)};
}

/// Candidates gamma * s for gamma = (0.2 n + j)/n, with gamma = 1 forced in.
inline std::vector<RefQuant> ref_candidates(const RefQuant& init, double lo, int count, int bits) {
  std::vector<double> gammas;
  bool has_one = false;
  for (int j = 0; j < count; ++j) {
    gammas.push_back((0.2 * count + j) / count);
    has_one = has_one || gammas.back() == 1.0;
  }
  if (!has_one) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < gammas.size(); ++j)
      if (std::abs(gammas[j] - 1.0) < std::abs(gammas[best] - 1.0)) best = j;
    gammas[best] = 1.0;
  }
  std::vector<RefQuant> out;
  for (double g : gammas) {
    const double s = g * init.step;
    out.push_back({s, ref_zero(std::min(lo, 0.0), s, bits)});
  }
  return out;
}

/// One linear layer's recorded data: inputs [tokens, in], weight [out, in].
struct RefLinearSite {
  std::vector<Tensor> inputs, outputs, g2;
  Tensor weight, bias;
};

/// Mean over samples of sum_i g2_i (y_i - y_hat_i)^2 with the layer run on
/// quantized input and weight, accumulating in input-index order.
inline double ref_objective(const RefLinearSite& site, const RefQuant& w, const RefQuant& a, int bits_w, int bits_a) {
  const std::size_t out_f = site.weight.dim(0), in_f = site.weight.dim(1);
  std::vector<double> wq(site.weight.size());
  for (std::size_t i = 0; i < wq.size(); ++i) wq[i] = ref_quantize(site.weight[i], w.step, w.zero, bits_w);
  double total = 0.0;
  for (std::size_t s = 0; s < site.inputs.size(); ++s) {
    const Tensor& x = site.inputs[s];
    const std::size_t rows = x.dim(0);
    double err = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> acc(out_f, 0.0);
      for (std::size_t k = 0; k < in_f; ++k) {
        const double xv = ref_quantize(x[r * in_f + k], a.step, a.zero, bits_a);
        for (std::size_t j = 0; j < out_f; ++j) acc[j] += xv * wq[j * in_f + k];
      }
      for (std::size_t j = 0; j < out_f; ++j) {
        const double d = site.outputs[s][r * out_f + j] - (acc[j] + site.bias[j]);
        err += site.g2[s][r * out_f + j] * (d * d);
      }
    }
    total += err;
  }
  return total / static_cast<double>(site.inputs.size());
}

/// Exhaustive minimizer; ties go to the larger step.
template <class F>
std::size_t ref_argmin(const std::vector<RefQuant>& cands, F&& objective) {
  std::size_t best = 0;
  double best_value = objective(cands[0]);
  for (std::size_t i = 1; i < cands.size(); ++i) {
    const double v = objective(cands[i]);
    if (v < best_value || (v == best_value && cands[i].step > cands[best].step)) best = i, best_value = v;
  }
  return best;
}

/// Two linear layers with a GELU between them, recorded on random inputs.
struct TwoLayerCase {
  std::vector<RefLinearSite> sites;
  int bits_w = 4, bits_a = 4, candidates = 20, rounds = 2;

  static TwoLayerCase make(std::uint64_t seed) {
    Rng rng = make_rng(seed, 0);
    TwoLayerCase c;
    c.bits_w = 3 + static_cast<int>(seed % 4);
    c.bits_a = 3 + static_cast<int>((seed / 4) % 4);
    const std::size_t dims[3] = {5, 7, 4};
    c.sites.resize(2);
    for (int l = 0; l < 2; ++l) {
      c.sites[l].weight = randn({dims[l + 1], dims[l]}, rng, 0.6);
      c.sites[l].bias = randn({dims[l + 1]}, rng, 0.1);
    }
    for (int s = 0; s < 6; ++s) {
      Tensor x = randn({3, dims[0]}, rng);
      for (int l = 0; l < 2; ++l) {
        RefLinearSite& site = c.sites[l];
        Tensor y({3, dims[l + 1]});
        for (std::size_t r = 0; r < 3; ++r)
          for (std::size_t j = 0; j < dims[l + 1]; ++j) {
            double acc = site.bias[j];
            for (std::size_t k = 0; k < dims[l]; ++k) acc += x[r * dims[l] + k] * site.weight[j * dims[l] + k];
            y[r * dims[l + 1] + j] = acc;
          }
        site.inputs.push_back(x);
        site.outputs.push_back(y);
        site.g2.push_back(chi_square_weights(y.shape(), rng));
        x = y;
        if (l == 0)
          for (double& v : x.data()) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
      }
    }
    return c;
  }

  /// Exhaustive alternation: per round, the best weight step with the input
  /// quantizer fixed, then the best input step with the weight fixed.
  std::vector<std::pair<RefQuant, RefQuant>> brute_force() const {
    std::vector<std::pair<RefQuant, RefQuant>> out;
    for (const RefLinearSite& site : sites) {
      double wlo = 1e300, whi = -1e300, alo = 1e300, ahi = -1e300;
      for (double v : site.weight.data()) wlo = std::min(wlo, v), whi = std::max(whi, v);
      for (const Tensor& x : site.inputs)
        for (double v : x.data()) alo = std::min(alo, v), ahi = std::max(ahi, v);
      RefQuant w = ref_minmax(wlo, whi, bits_w), a = ref_minmax(alo, ahi, bits_a);
      const auto wc = ref_candidates(w, wlo, candidates, bits_w);
      const auto ac = ref_candidates(a, alo, candidates, bits_a);
      double current = ref_objective(site, w, a, bits_w, bits_a);
      for (int r = 0; r < rounds; ++r) {
        const RefQuant wb = wc[ref_argmin(wc, [&](const RefQuant& q) { return ref_objective(site, q, a, bits_w, bits_a); })];
        if (const double v = ref_objective(site, wb, a, bits_w, bits_a); v <= current) w = wb, current = v;
        const RefQuant ab = ac[ref_argmin(ac, [&](const RefQuant& q) { return ref_objective(site, w, q, bits_w, bits_a); })];
        if (const double v = ref_objective(site, w, ab, bits_w, bits_a); v <= current) a = ab, current = v;
      }
      out.emplace_back(w, a);
    }
    return out;
  }

  /// The same problem through the library's calibrator.
  CalibrationResult calibrate() const {
    std::vector<SiteSpec> specs;
    LayerStats st;
    st.total_timesteps = 1;
    st.timesteps.assign(sites.front().inputs.size(), 0);
    for (std::size_t l = 0; l < sites.size(); ++l) {
      specs.push_back(SiteSpec{"layer" + std::to_string(l), SiteKind::linear, sites[l].weight, sites[l].bias, true});
      st.sites.push_back(SiteRecord{sites[l].inputs, {}, sites[l].outputs, sites[l].g2});
    }
    CalibrationOptions o;
    o.weight_bits = bits_w;
    o.act_bits = bits_a;
    o.rounds = rounds;
    o.candidates = candidates;
    o.hessian = true;
    o.multi_region = false;
    o.time_grouping = false;
    o.groups = 1;
    return calibrate_sites(specs, st, o);
  }
};

/// Whether the calibrator picked exactly the brute-force parameters.
inline bool matches_brute_force(const TwoLayerCase& c, std::string* detail = nullptr) {
  const auto ref = c.brute_force();
  const CalibrationResult got = c.calibrate();
  for (std::size_t l = 0; l < ref.size(); ++l) {
    const QuantParams& w = got.quant[l].weight.channels.at(0);
    const auto* a = std::get_if<QuantParams>(&got.quant[l].a);
    const bool ok = a && w.scale == ref[l].first.step && w.zero_point == ref[l].first.zero &&
                    a->scale == ref[l].second.step && a->zero_point == ref[l].second.zero;
    if (!ok) {
      if (detail) {
        *detail = "layer " + std::to_string(l) + ": weight step " + std::to_string(w.scale) + " vs " +
                  std::to_string(ref[l].first.step) + ", input step " + (a ? std::to_string(a->scale) : "?") + " vs " +
                  std::to_string(ref[l].second.step);
      }
      return false;
    }
  }
  return true;
}

}  // namespace tqdit::testing
