// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

namespace tqdit {
namespace {

Moments diagonal(std::vector<double> mean, std::vector<double> var) {
  Moments m{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mean.size())),
            Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(mean.size()), static_cast<Eigen::Index>(mean.size()))};
  for (std::size_t i = 0; i < mean.size(); ++i) {
    m.mean(static_cast<Eigen::Index>(i)) = mean[i];
    m.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = var[i];
  }
  return m;
}

TEST(Frechet, MeanOffsetOfUnitGaussians) {
  const Moments a = diagonal({0, 0, 0}, {1, 1, 1});
  const Moments b = diagonal({1, -2, 0.5}, {1, 1, 1});
  EXPECT_NEAR(frechet_distance(a, b), 1 + 4 + 0.25, 1e-10);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-12);
}

TEST(Frechet, DiagonalHandCase) {
  const Moments a = diagonal({0.5, -1.0}, {2.0, 0.25});
  const Moments b = diagonal({0.0, 1.0}, {0.5, 1.0});
  // Per coordinate: (mu_a - mu_b)^2 + (sqrt(va + r) - sqrt(vb + r))^2.
  double oracle = 0.0;
  const double r = kFrechetRegularization;
  const double ma[] = {0.5, -1.0}, mb[] = {0.0, 1.0}, va[] = {2.0, 0.25}, vb[] = {0.5, 1.0};
  for (int i = 0; i < 2; ++i) {
    const double d = std::sqrt(va[i] + r) - std::sqrt(vb[i] + r);
    oracle += (ma[i] - mb[i]) * (ma[i] - mb[i]) + d * d;
  }
  EXPECT_NEAR(frechet_distance(a, b), oracle, 1e-12);
  EXPECT_EQ(frechet_distance(a, b), frechet_distance(b, a));
  EXPECT_THROW(frechet_distance(a, diagonal({0}, {1})), DimensionError);
}

TEST(Frechet, MomentsAreUnbiased) {
  std::vector<Eigen::VectorXd> f;
  for (double v : {1.0, 2.0, 3.0, 6.0}) f.push_back(Eigen::VectorXd::Constant(1, v));
  const Moments m = moments(f);
  EXPECT_DOUBLE_EQ(m.mean(0), 3.0);
  EXPECT_DOUBLE_EQ(m.cov(0, 0), (4.0 + 1.0 + 0.0 + 9.0) / 3.0);
  EXPECT_THROW(moments({f.front()}), ContractError);
}

std::vector<Tensor> gaussian_images(std::size_t n, double shift, double scale, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor x = randn({1, 8, 8}, rng, scale);
    for (double& v : x.data()) v += shift;
    out.push_back(std::move(x));
  }
  return out;
}

TEST(ToyFrechet, IdentitySymmetryAndSensitivity) {
  const auto a = gaussian_images(128, 0.0, 1.0, 1);
  const auto b = gaussian_images(128, 0.0, 1.0, 2);
  const auto shifted = gaussian_images(128, 1.0, 1.0, 3);
  EXPECT_LE(toy_frechet(a, a, 5), 1e-8);
  EXPECT_EQ(toy_frechet(a, b, 5), toy_frechet(b, a, 5));
  EXPECT_GE(toy_frechet(a, b, 5), 0.0);
  EXPECT_GT(toy_frechet(a, shifted, 5), 10.0 * toy_frechet(a, b, 5));
  EXPECT_THROW(toy_frechet(gaussian_images(63, 0, 1, 1), b, 5), ContractError);
}

TEST(ToyFrechet, ConstantSetsStayFinite) {
  std::vector<Tensor> flat(64, Tensor(Shape{1, 8, 8}, 0.25));
  const double fd = toy_frechet(flat, flat, 5);
  EXPECT_TRUE(std::isfinite(fd));
  EXPECT_LE(fd, 1e-8);
}

TEST(Divergence, SelfIsZeroAndLengthT) {
  const DiTConfig c = testing::tiny_config();
  const NoiseSchedule s = testing::schedule_for(c);
  const DiTModel m = DiTModel::init(c, 3, Init::random);
  QuantizedModel qm(m);
  const auto curve = trajectory_divergence(m, qm, s, 3, 4);
  ASSERT_EQ(curve.size(), static_cast<std::size_t>(c.timesteps));
  for (double v : curve) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(trajectory_divergence(m, qm, make_schedule(5, 1e-4, 0.02), 2, 4), ConfigError);
  EXPECT_THROW(trajectory_divergence(m, qm, s, 0, 4), ContractError);
}

TEST(Divergence, MatchesDirectComputation) {
  const DiTConfig c = testing::tiny_config();
  const NoiseSchedule s = testing::schedule_for(c);
  const DiTModel m = DiTModel::init(c, 3, Init::random);
  const NoisePredictor fp = fp_predictor(m);
  const NoisePredictor shifted = [&](const Tensor& x, int t, int y) {
    Tensor e = fp(x, t, y);
    for (double& v : e.data()) v += 0.1 * (t + 1);
    return e;
  };
  const auto curve = trajectory_divergence(fp, shifted, s, c.image_shape(), c.num_classes, 2, 4);
  for (int t = 0; t < c.timesteps; ++t) EXPECT_NEAR(curve[t], 0.01 * (t + 1) * (t + 1), 1e-12);
}

TEST(Ablation, LadderAndValidation) {
  const auto ladder = AblationConfig::ladder(6, 6);
  ASSERT_EQ(ladder.size(), 4u);
  EXPECT_EQ(ladder[0].label, "baseline");
  EXPECT_FALSE(ladder[0].ho || ladder[0].mrq || ladder[0].tgq);
  EXPECT_TRUE(ladder[3].ho && ladder[3].mrq && ladder[3].tgq);
  EXPECT_THROW((AblationConfig{"bad", true, false, true, 6, 6}.validate()), ConfigError);
  const CalibrationOptions o = ladder[1].options(CalibrationOptions{});
  EXPECT_TRUE(o.hessian);
  EXPECT_FALSE(o.multi_region);
  EXPECT_EQ(o.weight_bits, 6);
}

TEST(Ablation, RowsSharedInputsAndDeterminism) {
  DiTConfig c = testing::tiny_config();
  const NoiseSchedule s = testing::schedule_for(c);
  const SyntheticDataset data(1, c);
  TrainOptions to;
  to.steps = 40;
  to.batch_size = 4;
  to.validation_samples = 4;
  const DiTModel m = train_fp(c, s, data, to);
  AblationSettings st;
  st.base.groups = 5;
  st.base.candidates = 10;
  st.base.rounds = 1;
  st.samples_per_group = 1;
  st.fd_samples = 64;
  st.reference_samples = 64;
  st.trajectories = 2;
  const auto configs = AblationConfig::ladder(6, 6);
  const auto r = run_ablation(m, s, data, configs, {1, 2}, st);
  ASSERT_EQ(r.rows.size(), 2u * 5u);
  EXPECT_EQ(r.rows[0].label, "FP");
  for (const auto& row : r.rows) {
    EXPECT_FALSE(row.failed) << row.label << ": " << row.error;
    EXPECT_TRUE(std::isfinite(row.toy_fd) && row.toy_fd >= 0.0);
    EXPECT_GE(row.mean_divergence, 0.0);
    EXPECT_EQ(row.mse_curve.size(), static_cast<std::size_t>(c.timesteps));
    EXPECT_EQ(row.inputs_digest, r.rows[row.seed == 1 ? 0 : 5].inputs_digest);
  }
  EXPECT_NE(r.rows[0].inputs_digest, r.rows[5].inputs_digest);
  EXPECT_EQ(r.means.size(), 5u);
  for (const auto& mean : r.means) EXPECT_EQ(mean.runs, 2u);
  const auto again = run_ablation(m, s, data, configs, {1, 2}, st);
  EXPECT_EQ(ablation_tables(r).csv, ablation_tables(again).csv);
  EXPECT_EQ(ablation_tables(r).json_text, ablation_tables(again).json_text);
}

TEST(Ablation, FailingConfigIsMarkedAndOthersProceed) {
  DiTConfig c = testing::tiny_config();
  const NoiseSchedule s = testing::schedule_for(c);
  const SyntheticDataset data(1, c);
  const DiTModel m = DiTModel::init(c, 1, Init::random);
  AblationSettings st;
  st.base.groups = 5;
  st.base.candidates = 4;
  st.base.rounds = 1;
  st.samples_per_group = 1;
  st.reference_samples = 64;
  st.trajectories = 1;
  // Zero candidates pass config validation here but make calibration throw.
  CalibrationOptions broken_base = st.base;
  broken_base.candidates = 0;
  st.base = broken_base;
  const auto r = run_ablation(m, s, data, AblationConfig::ladder(8, 8), {3}, st);
  ASSERT_EQ(r.rows.size(), 5u);
  EXPECT_FALSE(r.rows[0].failed);
  for (std::size_t i = 1; i < r.rows.size(); ++i) {
    EXPECT_TRUE(r.rows[i].failed);
    EXPECT_FALSE(r.rows[i].error.empty());
  }
  EXPECT_FALSE(r.ordering_holds);
}

}  // namespace
}  // namespace tqdit
