// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tqdit/diffusion.hpp"
#include "tqdit/digest.hpp"
#include "tqdit/parallel.hpp"
#include "tqdit/quantizers.hpp"

namespace tqdit {

enum class CalibrationMode { forward_corruption, trajectory };

inline const char* to_string(CalibrationMode m) {
  return m == CalibrationMode::forward_corruption ? "forward" : "trajectory";
}

struct CalibrationSample {
  Tensor x_t;
  int t = 0;
  int y = 0;
  Tensor eps_target;
  int group = 0;
};

/// n samples from each of G contiguous timestep groups, stored group by group.
struct CalibrationDataset {
  std::vector<CalibrationSample> samples;
  int timesteps = 0;
  int groups = 0;
  int per_group = 0;
  CalibrationMode mode = CalibrationMode::forward_corruption;

  std::string digest() const {
    Sha256 h;
    h.update("calib:" + std::to_string(timesteps) + ":" + std::to_string(groups) + ":" + std::to_string(per_group) +
             ":" + to_string(mode));
    for (const auto& s : samples) {
      h.update(std::to_string(s.t) + "," + std::to_string(s.y) + "," + std::to_string(s.group));
      h.update(s.x_t).update(s.eps_target);
    }
    return h.hex();
  }
};

/// Builds the time-grouped calibration set.
///
/// forward_corruption: x_t = q_sample(x_0, t, eps) with the drawn eps kept as
/// the loss target. trajectory: x_t is a snapshot of a full-precision reverse
/// trajectory (n trajectories, one snapshot per group each) and the target is
/// a fresh standard normal draw.
inline CalibrationDataset build_calib_dataset(const DiTModel& model, const NoiseSchedule& schedule,
                                              const SyntheticDataset& data, int groups, int per_group,
                                              CalibrationMode mode, std::uint64_t seed) {
  const int T = schedule.steps();
  if (per_group < 1) throw ConfigError("samples per group must be at least 1");
  group_of(0, T, groups);  // validates G | T
  if (model.config().timesteps != T) throw ConfigError("schedule length differs from model timesteps");
  const int span_len = T / groups;
  CalibrationDataset ds;
  ds.timesteps = T;
  ds.groups = groups;
  ds.per_group = per_group;
  ds.mode = mode;
  const auto total = static_cast<std::size_t>(groups) * static_cast<std::size_t>(per_group);
  ds.samples.resize(total);
  const Shape shape = model.config().image_shape();

  if (mode == CalibrationMode::forward_corruption) {
    parallel_for(total, [&](std::size_t i) {
      const int g = static_cast<int>(i / static_cast<std::size_t>(per_group));
      Rng rng = make_rng(seed, i);
      CalibrationSample& s = ds.samples[i];
      s.group = g;
      s.t = g * span_len + std::uniform_int_distribution<int>(0, span_len - 1)(rng);
      auto item = data.sample(rng());
      s.y = item.y;
      s.eps_target = randn(shape, rng);
      s.x_t = q_sample(item.x0, s.t, s.eps_target, schedule);
    });
    return ds;
  }

  const NoisePredictor fp = fp_predictor(model);
  parallel_for(static_cast<std::size_t>(per_group), [&](std::size_t j) {
    Rng rng = make_rng(seed ^ 0x7a9ec7ULL, j);
    const int y = std::uniform_int_distribution<int>(0, model.config().num_classes - 1)(rng);
    std::vector<int> picks(static_cast<std::size_t>(groups));
    for (int g = 0; g < groups; ++g) picks[static_cast<std::size_t>(g)] = g * span_len + std::uniform_int_distribution<int>(0, span_len - 1)(rng);
    sample_trajectory(fp, schedule, shape, y, seed, j, [&](int t, const Tensor& x_t, const Tensor&) {
      const int g = t / span_len;
      if (picks[static_cast<std::size_t>(g)] != t) return;
      CalibrationSample& s = ds.samples[static_cast<std::size_t>(g) * static_cast<std::size_t>(per_group) + j];
      s.group = g;
      s.t = t;
      s.y = y;
      s.x_t = x_t;
      Rng eps_rng = make_rng(seed ^ 0xe95ULL, static_cast<std::uint64_t>(g) * static_cast<std::uint64_t>(per_group) + j);
      s.eps_target = randn(shape, eps_rng);
    });
  });
  return ds;
}

/// Recorded full-precision operands, outputs and squared output gradients of
/// one site, one entry per calibration sample. `b` is empty for linear sites.
struct SiteRecord {
  std::vector<Tensor> a;
  std::vector<Tensor> b;
  std::vector<Tensor> output;
  std::vector<Tensor> g2;
};

struct LayerStats {
  std::vector<SiteRecord> sites;
  std::vector<int> timesteps;  // per sample
  int total_timesteps = 0;

  std::size_t samples() const { return timesteps.size(); }
  std::size_t record_count() const {
    std::size_t n = 0;
    for (const auto& s : sites) n += s.output.size();
    return n;
  }
};

namespace detail {

struct SampleCapture {
  Tensor a, b;
  std::size_t out_id = 0;
};

/// Full-precision hook that records site operands and taps site outputs.
struct RecordingHook {
  std::vector<SampleCapture>& capture;

  Var linear(const Site& site, Var x, Var w, Var b, int) {
    Var y = ops::linear(x, w, b);
    capture[site.index].a = x.value();
    capture[site.index].out_id = y.id;
    y.graph->tap(site.id, y);
    return y;
  }

  Var matmul(const Site& site, Var a, Var b, int) {
    Var y = ops::matmul(a, b);
    capture[site.index].a = a.value();
    capture[site.index].b = b.value();
    capture[site.index].out_id = y.id;
    y.graph->tap(site.id, y);
    return y;
  }

  void observe(const std::string&, Var) {}
};

}  // namespace detail

/// One forward and one backward of the diffusion loss per calibration sample;
/// records every site's operands, output and squared output gradient.
inline LayerStats collect_layer_stats(const DiTModel& model, const CalibrationDataset& ds) {
  const std::size_t n_sites = model.sites().size();
  const std::size_t n = ds.samples.size();
  std::vector<std::vector<detail::SampleCapture>> per_sample(n);
  std::vector<std::vector<Tensor>> outputs(n), grads(n);
  parallel_for(n, [&](std::size_t i) {
    const CalibrationSample& s = ds.samples[i];
    Graph g(true);
    auto params = bind_parameters(g, model, false);
    per_sample[i].resize(n_sites);
    detail::RecordingHook hook{per_sample[i]};
    Var pred = dit_forward(g, model, params, s.x_t, s.t, s.y, hook);
    Var loss = ops::squared_error(pred, g.constant(s.eps_target));
    g.backward(loss);
    outputs[i].resize(n_sites);
    grads[i].resize(n_sites);
    for (std::size_t k = 0; k < n_sites; ++k) {
      const std::size_t id = per_sample[i][k].out_id;
      outputs[i][k] = g.value(id);
      Tensor g2 = g.grad(id);
      for (double& v : g2.data()) {
        if (!std::isfinite(v)) throw CalibrationError("non-finite gradient at site " + model.site(k).id);
        v *= v;
      }
      grads[i][k] = std::move(g2);
    }
  });
  LayerStats stats;
  stats.total_timesteps = ds.timesteps;
  stats.sites.resize(n_sites);
  for (std::size_t i = 0; i < n; ++i) {
    stats.timesteps.push_back(ds.samples[i].t);
    for (std::size_t k = 0; k < n_sites; ++k) {
      SiteRecord& r = stats.sites[k];
      r.a.push_back(std::move(per_sample[i][k].a));
      if (!has_weight(model.site(k).kind)) r.b.push_back(std::move(per_sample[i][k].b));
      r.output.push_back(std::move(outputs[i][k]));
      r.g2.push_back(std::move(grads[i][k]));
    }
  }
  return stats;
}

/// sum_i g2_i * delta_i^2, the diagonal-Fisher weighted squared error.
inline double ho_objective(std::span<const double> delta, std::span<const double> g2) {
  if (delta.size() != g2.size()) throw DimensionError("ho_objective: delta and weights differ in length");
  double acc = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) acc += g2[i] * (delta[i] * delta[i]);
  return acc;
}

inline double ho_objective(const Tensor& delta, const Tensor& g2) {
  if (delta.shape() != g2.shape()) throw DimensionError("ho_objective shape mismatch");
  return ho_objective(delta.data(), g2.data());
}

/// A site as the calibrator sees it: kind plus weight and bias for linear sites.
struct SiteSpec {
  std::string id;
  SiteKind kind = SiteKind::linear;
  Tensor weight;
  Tensor bias;
  bool calibrate = true;  // false keeps the site at full precision
};

/// Recorded data of one site with the site-local error model: the output is
/// recomputed from quantized operands and compared with the recorded one.
class SiteProblem {
 public:
  SiteProblem(const SiteSpec& spec, const SiteRecord& rec, std::span<const int> timesteps, bool weighted)
      : spec_(spec), rec_(rec), timesteps_(timesteps), weighted_(weighted) {
    if (rec.a.size() != timesteps.size() || rec.output.size() != timesteps.size() || rec.g2.size() != timesteps.size()) {
      throw CalibrationError("site " + spec.id + " stats do not cover every sample");
    }
    if (!has_weight(spec.kind) && rec.b.size() != timesteps.size()) {
      throw CalibrationError("matmul site " + spec.id + " is missing its second operand");
    }
  }

  const SiteSpec& spec() const { return spec_; }
  const SiteRecord& record() const { return rec_; }
  std::size_t samples() const { return timesteps_.size(); }
  int timestep(std::size_t s) const { return timesteps_[s]; }

  /// Error of sample s given its recomputed output.
  double sample_error(std::size_t s, const Tensor& out) const {
    const Tensor& ref = rec_.output[s];
    if (out.shape() != ref.shape()) throw DimensionError("site " + spec_.id + " output shape mismatch");
    double acc = 0.0;
    if (weighted_) {
      const Tensor& g2 = rec_.g2[s];
      for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = ref[i] - out[i];
        acc += g2[i] * (d * d);
      }
    } else {
      for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = ref[i] - out[i];
        acc += d * d;
      }
    }
    return acc;
  }

  /// Mean per-sample error over a non-empty subset of samples.
  double objective(const SiteQuant& q, std::span<const std::size_t> subset) const {
    if (subset.empty()) throw CalibrationError("site " + spec_.id + ": empty sample selection");
    const bool linear = has_weight(spec_.kind);
    const std::vector<double> wt = linear ? kernels::transpose_weight(quantize_weight(spec_.weight, q.weight))
                                          : std::vector<double>();
    double total = 0.0;
    for (std::size_t s : subset) {
      const int t = timesteps_[s];
      const Tensor qa = apply_act(q.a, rec_.a[s], t);
      total += sample_error(s, linear ? kernels::linear_t(qa, wt, spec_.bias)
                                      : kernels::matmul(qa, apply_act(q.b, rec_.b[s], t)));
    }
    return total / static_cast<double>(subset.size());
  }

 private:
  const SiteSpec& spec_;
  const SiteRecord& rec_;
  std::span<const int> timesteps_;
  bool weighted_;
};

/// Trial step sizes (and zero points, for uniform quantizers) of one operand.
struct CandidateSet {
  std::string scheme;
  std::vector<double> steps;
  std::vector<std::int64_t> zero_points;  // uniform schemes only

  std::size_t size() const { return steps.size(); }
};

/// gamma * s_init for `count` values of gamma spaced 1/count apart from 0.2;
/// gamma = 1 is always present.
inline std::vector<double> linear_sweep(double s_init, int count) {
  if (count < 1) throw ConfigError("candidate count must be positive");
  std::vector<double> gammas(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) gammas[static_cast<std::size_t>(j)] = (0.2 * count + j) / count;
  if (std::find(gammas.begin(), gammas.end(), 1.0) == gammas.end()) {
    auto nearest = std::min_element(gammas.begin(), gammas.end(),
                                    [](double a, double b) { return std::abs(a - 1.0) < std::abs(b - 1.0); });
    *nearest = 1.0;
  }
  std::vector<double> steps;
  steps.reserve(gammas.size());
  for (double g : gammas) steps.push_back(g * s_init);
  return steps;
}

/// Uniform candidates around a min-max init; `range_min` (<= 0) sets each zero point.
inline CandidateSet make_uniform_candidates(const QuantParams& init, double range_min, int count) {
  CandidateSet c{"uniform-linear-sweep", {}, {}};
  if (init.degenerate) {
    c.steps = {init.scale};
    c.zero_points = {init.zero_point};
    return c;
  }
  c.steps = linear_sweep(init.scale, count);
  for (double s : c.steps) c.zero_points.push_back(zero_point_for(range_min, s, init.bits));
  return c;
}

/// Fine-step candidates for post-softmax MRQ: s2/2^m for m = 1..k plus the
/// linear sweep around the init, restricted to admissible boundaries, ascending.
inline CandidateSet make_softmax_candidates(const MultiRegionParams& init, int count) {
  CandidateSet c{"mrq-softmax-pow2+sweep", {}, {}};
  const double s2 = MultiRegionParams::softmax_coarse_step(init.bits);
  const double limit = MultiRegionParams::softmax_max_s1(init.bits);
  for (int m = 1; m <= init.bits; ++m) c.steps.push_back(std::ldexp(s2, -m));
  for (double s : linear_sweep(init.s1, count)) c.steps.push_back(s);
  std::erase_if(c.steps, [&](double s) { return !(s > 0.0) || s > limit; });
  std::sort(c.steps.begin(), c.steps.end());
  c.steps.erase(std::unique(c.steps.begin(), c.steps.end()), c.steps.end());
  return c;
}

/// Independent sweeps for the negative (s1) and positive (s2) GELU steps.
inline std::pair<CandidateSet, CandidateSet> make_gelu_candidates(const MultiRegionParams& init, int count) {
  return {CandidateSet{"mrq-gelu-negative-sweep", linear_sweep(init.s1, count), {}},
          CandidateSet{"mrq-gelu-positive-sweep", linear_sweep(init.s2, count), {}}};
}

struct SearchResult {
  std::size_t index = 0;
  double objective = 0.0;
  std::vector<double> objectives;  // per candidate
};

/// Evaluates every candidate (in parallel) and returns the minimizer; ties go
/// to the larger step size.
inline SearchResult search_best(std::span<const double> steps, const std::function<double(std::size_t)>& objective) {
  if (steps.empty()) throw CalibrationError("empty candidate set");
  SearchResult r;
  r.objectives.resize(steps.size());
  parallel_for(steps.size(), [&](std::size_t i) { r.objectives[i] = objective(i); });
  for (std::size_t i = 1; i < steps.size(); ++i) {
    const double o = r.objectives[i], b = r.objectives[r.index];
    if (o < b || (o == b && steps[i] > steps[r.index])) r.index = i;
  }
  r.objective = r.objectives[r.index];
  return r;
}

struct CalibrationOptions {
  int weight_bits = 8;
  int act_bits = 8;
  int rounds = 3;
  int candidates = 100;
  bool hessian = true;        // FIM-weighted objective instead of plain MSE
  bool multi_region = true;   // MRQ at post-softmax and post-GELU operands
  bool time_grouping = true;  // per-group post-softmax parameters
  int groups = 10;
  bool per_channel_weights = false;
  bool quantize_head = true;

  void validate(int timesteps) const {
    check_bits(weight_bits);
    check_bits(act_bits);
    if (rounds < 1) throw ConfigError("rounds must be at least 1");
    if (candidates < 1) throw ConfigError("candidate count must be positive");
    if (time_grouping) {
      if (!multi_region) throw ConfigError("time grouping requires the multi-region post-softmax path");
      group_of(0, timesteps, groups);
    }
  }
};

struct SiteReport {
  std::string id;
  SiteKind kind = SiteKind::linear;
  bool calibrated = false;
  double objective_init = 0.0;   // search objective at min-max init
  double objective_final = 0.0;  // search objective after the last round
  double ho_objective = 0.0;     // FIM-weighted objective of the final quantizers
  std::vector<double> trace;     // search objective after init and each accepted update
};

struct CalibrationReport {
  std::vector<SiteReport> sites;

  /// Mean over calibrated sites of the FIM-weighted objective.
  double mean_ho_objective() const {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& s : sites) {
      if (!s.calibrated) continue;
      total += s.ho_objective;
      ++n;
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
  }
};

struct CalibrationResult {
  std::vector<SiteQuant> quant;
  CalibrationReport report;
};

namespace detail {

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline QuantParams uniform_candidate(const CandidateSet& c, std::size_t i, int bits) {
  return QuantParams{c.steps[i], c.zero_points[i], bits, false};
}

/// Global min-max init and candidates of an activation operand over all samples.
inline std::pair<QuantParams, CandidateSet> uniform_act_init(const std::vector<Tensor>& xs, int bits, int count) {
  std::vector<double> all;
  for (const auto& x : xs) all.insert(all.end(), x.data().begin(), x.data().end());
  const QuantParams init = init_minmax(all, bits);
  const double lo = std::min(0.0, *std::min_element(all.begin(), all.end()));
  return {init, make_uniform_candidates(init, lo, count)};
}

inline std::vector<double> flatten(const std::vector<Tensor>& xs) {
  std::vector<double> all;
  for (const auto& x : xs) all.insert(all.end(), x.data().begin(), x.data().end());
  return all;
}

/// Per-site alternating search state.
class SiteCalibrator {
 public:
  SiteCalibrator(const SiteProblem& problem, const CalibrationOptions& opt, int timesteps)
      : p_(problem), opt_(opt), timesteps_(timesteps), all_(iota_indices(problem.samples())) {}

  SiteQuant run(SiteReport& report) {
    q_.enabled = true;
    init();
    current_ = p_.objective(q_, all_);
    report.objective_init = current_;
    report.trace = {current_};
    for (int r = 0; r < opt_.rounds; ++r) {
      if (has_weight(p_.spec().kind)) {
        update_weight(report);
        update_linear_input(report);
      } else {
        update_matmul_a(report);
        update_matmul_b(report);
      }
    }
    report.objective_final = current_;
    return q_;
  }

 private:
  void accept(SiteQuant candidate, SiteReport& report) {
    const double obj = p_.objective(candidate, all_);
    if (obj <= current_) {
      q_ = std::move(candidate);
      current_ = obj;
    }
    report.trace.push_back(current_);
  }

  void init() {
    const SiteKind kind = p_.spec().kind;
    const auto& rec = p_.record();
    if (has_weight(kind)) {
      const Tensor& w = p_.spec().weight;
      if (opt_.per_channel_weights) {
        const std::size_t cols = w.dim(1);
        for (std::size_t r = 0; r < w.dim(0); ++r) {
          std::span<const double> row(w.data().data() + r * cols, cols);
          const QuantParams init = init_minmax(row, opt_.weight_bits);
          q_.weight.channels.push_back(init);
          const double lo = std::min(0.0, *std::min_element(row.begin(), row.end()));
          w_cands_.push_back(make_uniform_candidates(init, lo, opt_.candidates));
        }
      } else {
        const QuantParams init = init_minmax(w, opt_.weight_bits);
        q_.weight.channels = {init};
        const double lo = std::min(0.0, *std::min_element(w.data().begin(), w.data().end()));
        w_cands_.push_back(make_uniform_candidates(init, lo, opt_.candidates));
      }
      if (kind == SiteKind::post_gelu_linear && opt_.multi_region) {
        const MultiRegionParams init = init_mrq_gelu(flatten(rec.a), opt_.act_bits);
        q_.a = init;
        std::tie(gelu_neg_, gelu_pos_) = make_gelu_candidates(init, opt_.candidates);
      } else {
        auto [init, cands] = uniform_act_init(rec.a, opt_.act_bits, opt_.candidates);
        q_.a = init;
        a_cands_ = std::move(cands);
      }
      return;
    }
    if (kind == SiteKind::post_softmax_matmul && opt_.multi_region) {
      const MultiRegionParams init = init_mrq_softmax(flatten(rec.a), opt_.act_bits);
      a_cands_ = make_softmax_candidates(init, opt_.candidates);
      if (opt_.time_grouping) {
        TimeGroupedParams tg{timesteps_, opt_.groups, std::vector<MultiRegionParams>(static_cast<std::size_t>(opt_.groups), init)};
        q_.a = tg;
        for (int g = 0; g < opt_.groups; ++g) {
          std::vector<std::size_t> members;
          for (std::size_t s = 0; s < p_.samples(); ++s)
            if (group_of(p_.timestep(s), timesteps_, opt_.groups) == g) members.push_back(s);
          group_members_.push_back(std::move(members));
        }
      } else {
        q_.a = init;
      }
    } else {
      auto [init, cands] = uniform_act_init(rec.a, opt_.act_bits, opt_.candidates);
      q_.a = init;
      a_cands_ = std::move(cands);
    }
    auto [binit, bcands] = uniform_act_init(rec.b, opt_.act_bits, opt_.candidates);
    q_.b = binit;
    b_cands_ = std::move(bcands);
  }

  void update_weight(SiteReport& report) {
    if (!opt_.per_channel_weights) {
      const CandidateSet& c = w_cands_.front();
      auto r = search_best(c.steps, [&](std::size_t i) {
        SiteQuant trial = q_;
        trial.weight.channels = {uniform_candidate(c, i, opt_.weight_bits)};
        return p_.objective(trial, all_);
      });
      SiteQuant next = q_;
      next.weight.channels = {uniform_candidate(c, r.index, opt_.weight_bits)};
      accept(std::move(next), report);
      return;
    }
    // One row at a time with the other rows held fixed.
    SiteQuant next = q_;
    for (std::size_t row = 0; row < w_cands_.size(); ++row) {
      const CandidateSet& c = w_cands_[row];
      auto r = search_best(c.steps, [&](std::size_t i) {
        SiteQuant trial = next;
        trial.weight.channels[row] = uniform_candidate(c, i, opt_.weight_bits);
        return p_.objective(trial, all_);
      });
      next.weight.channels[row] = uniform_candidate(c, r.index, opt_.weight_bits);
    }
    accept(std::move(next), report);
  }

  void update_linear_input(SiteReport& report) {
    if (auto* mrq = std::get_if<MultiRegionParams>(&q_.a)) {
      const MultiRegionParams base = *mrq;
      auto neg = search_best(gelu_neg_.steps, [&](std::size_t i) {
        SiteQuant trial = q_;
        trial.a = MultiRegionParams::gelu(gelu_neg_.steps[i], base.s2, base.bits);
        return p_.objective(trial, all_);
      });
      SiteQuant next = q_;
      next.a = MultiRegionParams::gelu(gelu_neg_.steps[neg.index], base.s2, base.bits);
      accept(std::move(next), report);
      const MultiRegionParams mid = std::get<MultiRegionParams>(q_.a);
      auto pos = search_best(gelu_pos_.steps, [&](std::size_t i) {
        SiteQuant trial = q_;
        trial.a = MultiRegionParams::gelu(mid.s1, gelu_pos_.steps[i], mid.bits);
        return p_.objective(trial, all_);
      });
      next = q_;
      next.a = MultiRegionParams::gelu(mid.s1, gelu_pos_.steps[pos.index], mid.bits);
      accept(std::move(next), report);
      return;
    }
    accept(search_uniform_operand(a_cands_, true), report);
  }

  SiteQuant search_uniform_operand(const CandidateSet& c, bool operand_a) {
    auto set = [&](SiteQuant& q, std::size_t i) {
      (operand_a ? q.a : q.b) = uniform_candidate(c, i, opt_.act_bits);
    };
    auto r = search_best(c.steps, [&](std::size_t i) {
      SiteQuant trial = q_;
      set(trial, i);
      return p_.objective(trial, all_);
    });
    SiteQuant next = q_;
    set(next, r.index);
    return next;
  }

  void update_matmul_a(SiteReport& report) {
    if (auto* tg = std::get_if<TimeGroupedParams>(&q_.a)) {
      TimeGroupedParams next_tg = *tg;
      for (std::size_t g = 0; g < group_members_.size(); ++g) {
        const auto& members = group_members_[g];
        if (members.empty()) continue;  // no calibration data for this group: keep the init
        auto r = search_best(a_cands_.steps, [&](std::size_t i) {
          SiteQuant trial = q_;
          std::get<TimeGroupedParams>(trial.a).groups[g] = MultiRegionParams::softmax(a_cands_.steps[i], opt_.act_bits);
          return p_.objective(trial, members);
        });
        next_tg.groups[g] = MultiRegionParams::softmax(a_cands_.steps[r.index], opt_.act_bits);
      }
      SiteQuant next = q_;
      next.a = std::move(next_tg);
      accept(std::move(next), report);
      return;
    }
    if (std::holds_alternative<MultiRegionParams>(q_.a)) {
      auto r = search_best(a_cands_.steps, [&](std::size_t i) {
        SiteQuant trial = q_;
        trial.a = MultiRegionParams::softmax(a_cands_.steps[i], opt_.act_bits);
        return p_.objective(trial, all_);
      });
      SiteQuant next = q_;
      next.a = MultiRegionParams::softmax(a_cands_.steps[r.index], opt_.act_bits);
      accept(std::move(next), report);
      return;
    }
    accept(search_uniform_operand(a_cands_, true), report);
  }

  void update_matmul_b(SiteReport& report) { accept(search_uniform_operand(b_cands_, false), report); }

  const SiteProblem& p_;
  const CalibrationOptions& opt_;
  int timesteps_;
  std::vector<std::size_t> all_;
  SiteQuant q_;
  double current_ = 0.0;
  std::vector<CandidateSet> w_cands_;
  CandidateSet a_cands_, b_cands_, gelu_neg_, gelu_pos_;
  std::vector<std::vector<std::size_t>> group_members_;
};

}  // namespace detail

/// Time-aware calibration over an ordered site list.
///
/// Sites are processed in order. Linear sites alternate weight and input
/// updates for `rounds` rounds; matmul sites alternate A (per timestep group
/// for post-softmax operands under time grouping) and B. Every update keeps
/// the site objective non-increasing.
inline CalibrationResult calibrate_sites(std::span<const SiteSpec> sites, const LayerStats& stats,
                                         const CalibrationOptions& opt) {
  opt.validate(stats.total_timesteps);
  if (stats.sites.size() != sites.size()) throw CalibrationError("layer stats do not match the site list");
  if (stats.samples() == 0) throw CalibrationError("no calibration samples");
  CalibrationResult result;
  result.quant.resize(sites.size());
  for (std::size_t k = 0; k < sites.size(); ++k) {
    SiteReport rep;
    rep.id = sites[k].id;
    rep.kind = sites[k].kind;
    if (sites[k].calibrate) {
      SiteProblem search_problem(sites[k], stats.sites[k], stats.timesteps, opt.hessian);
      detail::SiteCalibrator cal(search_problem, opt, stats.total_timesteps);
      result.quant[k] = cal.run(rep);
      rep.calibrated = true;
      SiteProblem ho_problem(sites[k], stats.sites[k], stats.timesteps, true);
      rep.ho_objective = ho_problem.objective(result.quant[k], detail::iota_indices(stats.samples()));
    }
    result.report.sites.push_back(std::move(rep));
  }
  return result;
}

/// Site list of a DiT, with the head excluded when `quantize_head` is false.
inline std::vector<SiteSpec> site_specs(const DiTModel& model, const CalibrationOptions& opt) {
  std::vector<SiteSpec> specs;
  for (const Site& s : model.sites()) {
    SiteSpec spec{s.id, s.kind, {}, {}, opt.quantize_head || !s.is_head};
    if (has_weight(s.kind)) {
      spec.weight = model.param(s.weight);
      spec.bias = model.param(s.bias);
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

inline CalibrationResult calibrate(const DiTModel& model, const LayerStats& stats, const CalibrationOptions& opt) {
  const auto specs = site_specs(model, opt);
  return calibrate_sites(specs, stats, opt);
}

inline QuantizedModel make_quantized(const DiTModel& model, const std::vector<SiteQuant>& quant) {
  if (quant.size() != model.sites().size()) throw ConfigError("quantizer list does not match the model's sites");
  QuantizedModel qm(model);
  for (std::size_t i = 0; i < quant.size(); ++i) qm.set(i, quant[i]);
  return qm;
}

}  // namespace tqdit
