// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tqdit/calibration.hpp"

namespace tqdit {

inline constexpr std::size_t kFeatureCount = 16;
inline constexpr double kFrechetRegularization = 1e-6;
inline constexpr std::size_t kMinFrechetSamples = 64;

/// Fixed Gaussian projection of flattened images to kFeatureCount features.
class FeatureProjection {
 public:
  FeatureProjection(std::size_t input_dim, std::uint64_t seed) : input_dim_(input_dim), p_(kFeatureCount, input_dim) {
    Rng rng = make_rng(seed, 0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (Eigen::Index r = 0; r < p_.rows(); ++r)
      for (Eigen::Index c = 0; c < p_.cols(); ++c) p_(r, c) = scale * normal(rng);
  }

  Eigen::VectorXd operator()(const Tensor& x) const {
    if (x.size() != input_dim_) throw DimensionError("feature projection expects " + std::to_string(input_dim_) + " values");
    Eigen::VectorXd f = Eigen::VectorXd::Zero(p_.rows());
    for (Eigen::Index r = 0; r < p_.rows(); ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < input_dim_; ++c) acc += p_(r, static_cast<Eigen::Index>(c)) * x[c];
      f(r) = acc;
    }
    return f;
  }

 private:
  std::size_t input_dim_;
  Eigen::MatrixXd p_;
};

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance of row-stacked feature vectors.
inline Moments moments(const std::vector<Eigen::VectorXd>& features) {
  if (features.size() < 2) throw ContractError("moments need at least two samples");
  const Eigen::Index d = features.front().size();
  Moments m{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, d)};
  for (const auto& f : features) m.mean += f;
  m.mean /= static_cast<double>(features.size());
  for (const auto& f : features) {
    const Eigen::VectorXd c = f - m.mean;
    m.cov += c * c.transpose();
  }
  m.cov /= static_cast<double>(features.size() - 1);
  return m;
}

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

inline double frechet_one_way(const Moments& a, const Moments& b) {
  const Eigen::Index d = a.mean.size();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd ca = a.cov + kFrechetRegularization * eye;
  const Eigen::MatrixXd cb = b.cov + kFrechetRegularization * eye;
  const Eigen::MatrixXd ra = psd_sqrt(ca);
  // Tr((Ca Cb)^{1/2}) = Tr((Ca^{1/2} Cb Ca^{1/2})^{1/2}); the latter is symmetric.
  const double cross = psd_sqrt(ra * cb * ra).trace();
  return (a.mean - b.mean).squaredNorm() + ca.trace() + cb.trace() - 2.0 * cross;
}

}  // namespace detail

/// Frechet distance between Gaussians with the given moments, 1e-6 ridge on
/// both covariances. Averaged over both argument orders so it is exactly
/// symmetric; clamped at zero.
inline double frechet_distance(const Moments& a, const Moments& b) {
  if (a.mean.size() != b.mean.size()) throw DimensionError("frechet_distance: feature dimensions differ");
  const double fd = 0.5 * (detail::frechet_one_way(a, b) + detail::frechet_one_way(b, a));
  return std::max(fd, 0.0);
}

/// toy-FD: Frechet distance between the projected feature distributions of two sample sets.
inline double toy_frechet(const std::vector<Tensor>& samples_a, const std::vector<Tensor>& samples_b,
                          std::uint64_t projection_seed) {
  if (samples_a.size() < kMinFrechetSamples || samples_b.size() < kMinFrechetSamples) {
    throw ContractError("toy_frechet needs at least " + std::to_string(kMinFrechetSamples) + " samples per set");
  }
  const FeatureProjection proj(samples_a.front().size(), projection_seed);
  auto features = [&](const std::vector<Tensor>& xs) {
    std::vector<Eigen::VectorXd> f;
    f.reserve(xs.size());
    for (const auto& x : xs) f.push_back(proj(x));
    return f;
  };
  return frechet_distance(moments(features(samples_a)), moments(features(samples_b)));
}

/// Per-timestep mean squared difference between two noise predictors
/// evaluated at the same states along full-precision trajectories.
///
/// Trajectory i uses class i mod K and noise stream i of `seed`. Entry t of
/// the curve is the per-element MSE at timestep t averaged over trajectories.
inline std::vector<double> trajectory_divergence(const NoisePredictor& fp, const NoisePredictor& q,
                                                 const NoiseSchedule& schedule, const Shape& shape, int num_classes,
                                                 std::size_t num_trajectories, std::uint64_t seed) {
  if (num_trajectories == 0) throw ContractError("trajectory_divergence needs at least one trajectory");
  const auto T = static_cast<std::size_t>(schedule.steps());
  std::vector<std::vector<double>> per(num_trajectories, std::vector<double>(T, 0.0));
  parallel_for(num_trajectories, [&](std::size_t i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    sample_trajectory(fp, schedule, shape, y, seed, i, [&](int t, const Tensor& x_t, const Tensor& eps) {
      const Tensor eq = q(x_t, t, y);
      double acc = 0.0;
      for (std::size_t k = 0; k < eps.size(); ++k) {
        const double d = eps[k] - eq[k];
        acc += d * d;
      }
      per[i][static_cast<std::size_t>(t)] = acc / static_cast<double>(eps.size());
    });
  });
  std::vector<double> curve(T, 0.0);
  for (const auto& row : per)
    for (std::size_t t = 0; t < T; ++t) curve[t] += row[t];
  for (double& v : curve) v /= static_cast<double>(num_trajectories);
  return curve;
}

inline std::vector<double> trajectory_divergence(const DiTModel& fp, const QuantizedModel& q,
                                                 const NoiseSchedule& schedule, std::size_t num_trajectories,
                                                 std::uint64_t seed) {
  if (schedule.steps() != fp.config().timesteps) throw ConfigError("schedule length differs from model timesteps");
  return trajectory_divergence(fp_predictor(fp), q.predictor(), schedule, fp.config().image_shape(),
                               fp.config().num_classes, num_trajectories, seed);
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// One row of the ablation ladder.
struct AblationConfig {
  std::string label;
  bool ho = false;
  bool mrq = false;
  bool tgq = false;
  int weight_bits = 6;
  int act_bits = 6;

  void validate() const {
    if (tgq && !mrq) throw ConfigError("ablation config " + label + ": TGQ requires MRQ");
    check_bits(weight_bits);
    check_bits(act_bits);
  }

  CalibrationOptions options(CalibrationOptions base) const {
    validate();
    base.weight_bits = weight_bits;
    base.act_bits = act_bits;
    base.hessian = ho;
    base.multi_region = mrq;
    base.time_grouping = tgq;
    return base;
  }

  /// baseline, +HO, +HO+MRQ, +HO+MRQ+TGQ.
  static std::vector<AblationConfig> ladder(int weight_bits, int act_bits) {
    return {{"baseline", false, false, false, weight_bits, act_bits},
            {"+HO", true, false, false, weight_bits, act_bits},
            {"+HO+MRQ", true, true, false, weight_bits, act_bits},
            {"+HO+MRQ+TGQ", true, true, true, weight_bits, act_bits}};
  }
};

struct MetricReport {
  std::string label;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double toy_fd = 0.0;
  std::vector<double> mse_curve;
  double mean_divergence = 0.0;
  double calibration_objective = 0.0;  // mean FIM-weighted site objective; 0 for FP
  std::string inputs_digest;           // calibration set, model and sampling seed shared by a seed's rows
};

struct AblationSettings {
  CalibrationOptions base;  // groups, rounds, candidates, head handling
  int samples_per_group = 8;
  CalibrationMode mode = CalibrationMode::forward_corruption;
  std::size_t fd_samples = 64;
  std::size_t reference_samples = 256;
  std::size_t trajectories = 10;
  std::uint64_t projection_seed = 0;
  std::uint64_t reference_offset = 1'000'000;
};

struct AblationSummary {
  std::string label;
  double toy_fd = 0.0;
  double mean_divergence = 0.0;
  double calibration_objective = 0.0;
  std::size_t runs = 0;
};

struct AblationResult {
  std::vector<MetricReport> rows;  // per seed: FP row then one row per config
  std::vector<AblationSummary> means;
  bool ordering_holds = false;       // calibration objective non-increasing down the ladder
  double fd_improvement = 0.0;       // 1 - FD(last) / FD(first config)
};

/// Runs every config on every seed. Per seed the calibration set, stats,
/// sampling noise and reference set are shared across configs; only the
/// quantization strategy differs. A failing config is reported and skipped.
inline AblationResult run_ablation(const DiTModel& model, const NoiseSchedule& schedule, const SyntheticDataset& data,
                                   const std::vector<AblationConfig>& configs, const std::vector<std::uint64_t>& seeds,
                                   const AblationSettings& settings) {
  if (configs.empty() || seeds.empty()) throw ConfigError("ablation needs at least one config and one seed");
  for (const auto& c : configs) c.validate();
  const DiTConfig& mc = model.config();
  const std::vector<Tensor> reference = data.images(settings.reference_samples, settings.reference_offset);
  AblationResult result;
  for (std::uint64_t seed : seeds) {
    const CalibrationDataset ds =
        build_calib_dataset(model, schedule, data, settings.base.groups, settings.samples_per_group, settings.mode, seed);
    const LayerStats stats = collect_layer_stats(model, ds);
    Sha256 h;
    h.update(ds.digest()).update("seed:" + std::to_string(seed));
    for (const auto& p : model.parameters()) h.update(p.value);
    const std::string digest = h.hex();

    const NoisePredictor fp = fp_predictor(model);
    MetricReport fp_row;
    fp_row.label = "FP";
    fp_row.seed = seed;
    fp_row.toy_fd =
        toy_frechet(generate_samples(fp, schedule, mc.image_shape(), mc.num_classes, settings.fd_samples, seed), reference,
                    settings.projection_seed);
    fp_row.mse_curve.assign(static_cast<std::size_t>(schedule.steps()), 0.0);
    fp_row.inputs_digest = digest;
    result.rows.push_back(std::move(fp_row));

    for (const auto& cfg : configs) {
      MetricReport row;
      row.label = cfg.label;
      row.seed = seed;
      row.inputs_digest = digest;
      try {
        const CalibrationResult cal = calibrate(model, stats, cfg.options(settings.base));
        QuantizedModel qm = make_quantized(model, cal.quant);
        row.calibration_objective = cal.report.mean_ho_objective();
        row.toy_fd = toy_frechet(
            generate_samples(qm.predictor(), schedule, mc.image_shape(), mc.num_classes, settings.fd_samples, seed),
            reference, settings.projection_seed);
        row.mse_curve = trajectory_divergence(model, qm, schedule, settings.trajectories, seed);
        row.mean_divergence = mean_of(row.mse_curve);
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      result.rows.push_back(std::move(row));
    }
  }

  std::vector<std::string> labels{"FP"};
  for (const auto& c : configs) labels.push_back(c.label);
  for (const auto& label : labels) {
    AblationSummary s;
    s.label = label;
    for (const auto& r : result.rows) {
      if (r.label != label || r.failed) continue;
      s.toy_fd += r.toy_fd;
      s.mean_divergence += r.mean_divergence;
      s.calibration_objective += r.calibration_objective;
      ++s.runs;
    }
    if (s.runs > 0) {
      s.toy_fd /= static_cast<double>(s.runs);
      s.mean_divergence /= static_cast<double>(s.runs);
      s.calibration_objective /= static_cast<double>(s.runs);
    }
    result.means.push_back(s);
  }
  bool ok = true;
  for (std::size_t i = 1; i < result.means.size(); ++i) ok = ok && result.means[i].runs == seeds.size();
  for (std::size_t i = 2; i < result.means.size(); ++i)
    ok = ok && result.means[i].calibration_objective <= result.means[i - 1].calibration_objective;
  result.ordering_holds = ok;
  const double first = result.means[1].toy_fd, last = result.means.back().toy_fd;
  result.fd_improvement = first > 0.0 ? 1.0 - last / first : 0.0;
  return result;
}

}  // namespace tqdit
