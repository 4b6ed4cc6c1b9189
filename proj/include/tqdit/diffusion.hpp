// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "tqdit/model.hpp"
#include "tqdit/parallel.hpp"

namespace tqdit {

/// DDPM variance schedule over timestep indices 0..T-1.
///
/// Index t holds beta_{t+1} of the usual 1-based notation, so alpha_bar(0)
/// is the first cumulative factor and x_0 (clean data) is what the reverse
/// step at index 0 produces.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  int steps() const noexcept { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(idx(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bar_.at(idx(t)); }
  double sigma(int t) const { return std::sqrt(beta(t)); }
  double beta_start() const { return beta_.front(); }
  double beta_end() const { return beta_.back(); }

  friend NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;

 private:
  std::size_t idx(int t) const {
    if (t < 0 || t >= steps()) throw DomainError("timestep " + std::to_string(t) + " outside schedule");
    return static_cast<std::size_t>(t);
  }

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// Linear beta schedule; alpha_bar is the running product of (1 - beta).
inline NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.beta_.resize(static_cast<std::size_t>(steps));
  s.alpha_bar_.resize(s.beta_.size());
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    s.beta_[static_cast<std::size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - s.beta_[static_cast<std::size_t>(t)];
    s.alpha_bar_[static_cast<std::size_t>(t)] = prod;
  }
  return s;
}

/// x_t = sqrt(alpha_bar) x_0 + sqrt(1 - alpha_bar) eps.
inline Tensor q_sample(const Tensor& x0, double alpha_bar, const Tensor& eps) {
  if (x0.shape() != eps.shape()) throw DimensionError("q_sample: noise shape differs from data shape");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor x(x0.shape());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = a * x0[i] + b * eps[i];
  return x;
}

inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  return q_sample(x0, s.alpha_bar(t), eps);
}

/// Reverse-process mean mu(x_t, eps) for given alpha and alpha_bar.
inline Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_pred, double alpha, double alpha_bar) {
  if (x_t.shape() != eps_pred.shape()) throw DimensionError("posterior_mean: prediction shape differs from x_t");
  const double coef = (1.0 - alpha) / std::sqrt(1.0 - alpha_bar);
  const double inv = 1.0 / std::sqrt(alpha);
  Tensor mu(x_t.shape());
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = inv * (x_t[i] - coef * eps_pred[i]);
  return mu;
}

/// One ancestral step x_t -> x_{t-1} = mu + sigma_t z. The step at index 0
/// ignores z and returns the mean.
inline Tensor posterior_step(const Tensor& x_t, const Tensor& eps_pred, int t, const Tensor& z,
                             const NoiseSchedule& s) {
  Tensor x = posterior_mean(x_t, eps_pred, s.alpha(t), s.alpha_bar(t));
  if (t > 0) {
    if (z.shape() != x.shape()) throw DimensionError("posterior_step: z shape differs from x_t");
    const double sig = s.sigma(t);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += sig * z[i];
  }
  return x;
}

/// eps_theta(x_t, t, y).
using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t, int y)>;

inline NoisePredictor fp_predictor(const DiTModel& m) {
  return [&m](const Tensor& x, int t, int y) { return predict_noise(m, x, t, y); };
}

inline Tensor p_sample_step(const NoisePredictor& model, const Tensor& x_t, int t, int y, const Tensor& z,
                            const NoiseSchedule& s) {
  return posterior_step(x_t, model(x_t, t, y), t, z, s);
}

/// Called at each reverse step with (t, x_t, eps_pred).
using StepObserver = std::function<void(int, const Tensor&, const Tensor&)>;

/// Full ancestral sampling run. All randomness (initial noise and every z)
/// comes from (seed, stream), so two predictors given the same pair see the
/// same noise draws. Uses exactly T predictor evaluations.
inline Tensor sample_trajectory(const NoisePredictor& model, const NoiseSchedule& s, const Shape& shape, int y,
                                std::uint64_t seed, std::uint64_t stream, const StepObserver& observe = {}) {
  Rng rng = make_rng(seed, stream);
  Tensor x = randn(shape, rng);
  for (int t = s.steps() - 1; t >= 0; --t) {
    Tensor z = randn(shape, rng);
    Tensor eps = model(x, t, y);
    if (observe) observe(t, x, eps);
    x = posterior_step(x, eps, t, z, s);
  }
  return x;
}

/// `count` samples; sample i uses class i mod num_classes and noise stream i.
inline std::vector<Tensor> generate_samples(const NoisePredictor& model, const NoiseSchedule& s, const Shape& shape,
                                            int num_classes, std::size_t count, std::uint64_t seed) {
  std::vector<Tensor> out(count);
  parallel_for(count, [&](std::size_t i) {
    out[i] = sample_trajectory(model, s, shape, static_cast<int>(i % static_cast<std::size_t>(num_classes)), seed, i);
  });
  return out;
}

/// Class-conditional Gaussian blobs in [-1, 1].
///
/// Class y places its blob on a circle around the image center at angle
/// 2*pi*y/num_classes, so the label can be read back from the blob position.
class SyntheticDataset {
 public:
  struct Item {
    Tensor x0;
    int y = 0;
  };

  SyntheticDataset(std::uint64_t seed, int num_classes, int image_size, int channels)
      : seed_(seed), num_classes_(num_classes), image_size_(image_size), channels_(channels) {
    if (num_classes < 1 || image_size < 4 || channels < 1) throw ConfigError("invalid synthetic dataset geometry");
  }

  SyntheticDataset(std::uint64_t seed, const DiTConfig& c)
      : SyntheticDataset(seed, c.num_classes, c.image_size, c.channels) {}

  std::uint64_t seed() const noexcept { return seed_; }
  int num_classes() const noexcept { return num_classes_; }

  std::pair<double, double> class_center(int y) const {
    const double mid = (image_size_ - 1) / 2.0;
    const double radius = 0.3 * image_size_;
    const double angle = 2.0 * std::numbers::pi * y / num_classes_;
    return {mid + radius * std::sin(angle), mid + radius * std::cos(angle)};
  }

  Item sample(std::uint64_t index) const {
    Rng rng = make_rng(seed_, index);
    Item item;
    item.y = static_cast<int>(std::uniform_int_distribution<int>(0, num_classes_ - 1)(rng));
    auto [cr, cc] = class_center(item.y);
    cr += uniform(rng, -0.5, 0.5);
    cc += uniform(rng, -0.5, 0.5);
    const double width = image_size_ / 10.0 * (1.0 + 0.25 * (item.y % 2)) * uniform(rng, 0.9, 1.1);
    const auto n = static_cast<std::size_t>(image_size_);
    item.x0 = Tensor({static_cast<std::size_t>(channels_), n, n});
    for (std::size_t ch = 0; ch < static_cast<std::size_t>(channels_); ++ch)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          const double d2 = (r - cr) * (r - cr) + (c - cc) * (c - cc);
          item.x0[(ch * n + r) * n + c] = 2.0 * std::exp(-d2 / (2.0 * width * width)) - 1.0;
        }
    return item;
  }

  /// Label whose blob center is nearest to the brightest pixel.
  int classify(const Tensor& x) const {
    const auto n = static_cast<std::size_t>(image_size_);
    std::size_t best = 0;
    for (std::size_t i = 1; i < n * n; ++i)
      if (x[i] > x[best]) best = i;
    const double r = static_cast<double>(best / n), c = static_cast<double>(best % n);
    int label = 0;
    double best_d = 1e300;
    for (int y = 0; y < num_classes_; ++y) {
      auto [cr, cc] = class_center(y);
      const double dd = (r - cr) * (r - cr) + (c - cc) * (c - cc);
      if (dd < best_d) best_d = dd, label = y;
    }
    return label;
  }

  std::vector<Tensor> images(std::size_t count, std::uint64_t offset = 0) const {
    std::vector<Tensor> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(sample(offset + i).x0);
    return out;
  }

 private:
  std::uint64_t seed_;
  int num_classes_;
  int image_size_;
  int channels_;
};

/// ||eps - eps_theta(x_t, t, y)||^2 on a graph, with x_t from q_sample.
template <class Hook>
Var diffusion_loss(Graph& g, const DiTModel& m, std::span<const Var> params, const Tensor& x0, int t,
                   const Tensor& eps, int y, const NoiseSchedule& s, Hook& hook) {
  const Tensor x_t = q_sample(x0, t, eps, s);
  Var pred = dit_forward(g, m, params, x_t, t, y, hook);
  return ops::squared_error(pred, g.constant(eps));
}

inline double diffusion_loss(const DiTModel& m, const Tensor& x0, int t, const Tensor& eps, int y,
                             const NoiseSchedule& s) {
  Graph g(false);
  auto params = bind_parameters(g, m, false);
  FullPrecisionHook hook;
  return diffusion_loss(g, m, params, x0, t, eps, y, s, hook).value()[0];
}

/// One (x_0, y, t, eps) training/validation draw.
struct DiffusionDraw {
  Tensor x0;
  int y = 0;
  int t = 0;
  Tensor eps;
};

inline DiffusionDraw draw_example(const SyntheticDataset& data, const NoiseSchedule& s, std::uint64_t seed,
                                  std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  DiffusionDraw d;
  auto item = data.sample(rng());
  d.x0 = std::move(item.x0);
  d.y = item.y;
  d.t = std::uniform_int_distribution<int>(0, s.steps() - 1)(rng);
  d.eps = randn(d.x0.shape(), rng);
  return d;
}

/// Mean per-element diffusion loss over `count` fixed draws.
inline double validation_loss(const DiTModel& m, const SyntheticDataset& data, const NoiseSchedule& s,
                              std::uint64_t seed, std::size_t count) {
  std::vector<double> losses(count);
  parallel_for(count, [&](std::size_t i) {
    const DiffusionDraw d = draw_example(data, s, seed, i);
    losses[i] = diffusion_loss(m, d.x0, d.t, d.eps, d.y, s) / static_cast<double>(d.x0.size());
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(count);
}

struct TrainOptions {
  int steps = 2000;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 100;
  std::size_t validation_samples = 128;
};

struct TrainLog {
  std::vector<std::pair<int, double>> curve;  // (step, mean batch loss)
  double initial_validation_loss = 0.0;
  double final_validation_loss = 0.0;
};

/// Trains a full-precision model with Adam on the per-element diffusion loss.
/// Per-sample gradients are summed in batch order, so the result does not
/// depend on the worker count. Parameters end rounded to float precision.
inline DiTModel train_fp(const DiTConfig& config, const NoiseSchedule& schedule, const SyntheticDataset& data,
                         const TrainOptions& opt, TrainLog* log = nullptr) {
  config.validate();
  if (schedule.steps() != config.timesteps) throw ConfigError("schedule length differs from model timesteps");
  if (opt.steps < 0 || opt.batch_size < 1 || !(opt.learning_rate > 0.0)) throw ConfigError("invalid training options");
  DiTModel model = DiTModel::init(config, opt.seed);
  const std::uint64_t val_seed = opt.seed ^ 0x5eed'0f'7a11ULL;
  TrainLog local;
  TrainLog& out = log ? *log : local;
  out.curve.clear();
  out.initial_validation_loss = validation_loss(model, data, schedule, val_seed, opt.validation_samples);

  auto& params = model.mutable_parameters();
  std::vector<std::size_t> offsets(params.size() + 1, 0);
  for (std::size_t i = 0; i < params.size(); ++i) offsets[i + 1] = offsets[i] + params[i].value.size();
  const std::size_t total = offsets.back();
  std::vector<double> m1(total, 0.0), m2(total, 0.0);
  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  const auto batch = static_cast<std::size_t>(opt.batch_size);
  std::vector<std::vector<double>> grads(batch, std::vector<double>(total));
  std::vector<double> losses(batch);

  for (int step = 0; step < opt.steps; ++step) {
    parallel_for(batch, [&](std::size_t i) {
      const DiffusionDraw d = draw_example(data, schedule, opt.seed, static_cast<std::uint64_t>(step) * batch + i);
      Graph g(true);
      auto vars = bind_parameters(g, model, true);
      FullPrecisionHook hook;
      Var loss = diffusion_loss(g, model, vars, d.x0, d.t, d.eps, d.y, schedule, hook);
      g.backward(loss);
      const double norm = 1.0 / static_cast<double>(d.x0.size());
      losses[i] = loss.value()[0] * norm;
      for (std::size_t p = 0; p < vars.size(); ++p) {
        const Tensor gp = g.grad(vars[p]);
        for (std::size_t k = 0; k < gp.size(); ++k) grads[i][offsets[p] + k] = gp[k] * norm;
      }
    });
    double mean_loss = 0.0;
    for (double l : losses) mean_loss += l;
    mean_loss /= static_cast<double>(batch);
    if (!std::isfinite(mean_loss)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(mean_loss) + ")");
    }
    if (opt.log_every > 0 && (step % opt.log_every == 0 || step + 1 == opt.steps)) out.curve.emplace_back(step, mean_loss);

    const double c1 = 1.0 - std::pow(b1, step + 1), c2 = 1.0 - std::pow(b2, step + 1);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto data_p = params[p].value.data();
      for (std::size_t k = 0; k < data_p.size(); ++k) {
        const std::size_t j = offsets[p] + k;
        double gsum = 0.0;
        for (std::size_t i = 0; i < batch; ++i) gsum += grads[i][j];
        const double gk = gsum / static_cast<double>(batch);
        m1[j] = b1 * m1[j] + (1.0 - b1) * gk;
        m2[j] = b2 * m2[j] + (1.0 - b2) * gk * gk;
        data_p[k] -= opt.learning_rate * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + adam_eps);
      }
    }
  }
  model.round_to_storage_precision();
  out.final_validation_loss = validation_loss(model, data, schedule, val_seed, opt.validation_samples);
  return model;
}

}  // namespace tqdit
