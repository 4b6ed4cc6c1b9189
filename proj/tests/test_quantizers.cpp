// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "quant_laws.hpp"
#include "support.hpp"

namespace tqdit {
namespace {

using testing::add_grid_probes;

TEST(MinMax, HandCases) {
  const std::vector<double> unit{0.0, 0.3, 1.0};
  const QuantParams a = init_minmax(unit, 8);
  EXPECT_DOUBLE_EQ(a.scale, 1.0 / 255);
  EXPECT_EQ(a.zero_point, 0);
  const std::vector<double> sym{-1.0, 0.2, 1.0};
  const QuantParams b = init_minmax(sym, 8);
  EXPECT_DOUBLE_EQ(b.scale, 2.0 / 255);
  EXPECT_EQ(b.zero_point, 128);  // -round(-127.5), ties to even
  const std::vector<double> flat{0.4, 0.4};
  const QuantParams c = init_minmax(flat, 8);
  EXPECT_TRUE(c.degenerate);
  EXPECT_EQ(c.scale, kDegenerateScale);
  EXPECT_EQ(c.zero_point, 0);
  EXPECT_THROW(init_minmax(std::vector<double>{}, 8), ContractError);
  EXPECT_THROW(init_minmax(unit, 1), ConfigError);
}

TEST(Uniform, HandCases) {
  const QuantParams p{1.0 / 3.0, 0, 2, false};
  EXPECT_DOUBLE_EQ(quantize_value(0.5, p), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(quantize_value(100.0, p), 1.0);
  EXPECT_DOUBLE_EQ(quantize_value(-100.0, p), 0.0);
  EXPECT_DOUBLE_EQ(quantize_value(2.0 / 3.0, p), 2.0 / 3.0);
  // Ties go to even codes.
  const QuantParams unit{1.0, 0, 4, false};
  EXPECT_EQ(quantize_value(2.5, unit), 2.0);
  EXPECT_EQ(quantize_value(3.5, unit), 4.0);
  EXPECT_THROW((QuantParams{0.0, 0, 4, false}.validate()), ConfigError);
  EXPECT_THROW((QuantParams{1.0, 16, 4, false}.validate()), ConfigError);
}

TEST(Uniform, LawsExhaustiveSmallBits) {
  for (int k = 2; k <= 4; ++k) {
    const std::int64_t n = std::int64_t{1} << k;
    for (std::int64_t z = 0; z < n; ++z)
      for (double s : {0.1, 1.0 / 3.0, 0.75, 2.0}) {
        const QuantParams p{s, z, k, false};
        std::vector<double> xs;
        add_grid_probes(xs, -s * static_cast<double>(z), s, n);
        const auto r = testing::uniform_laws(p, xs);
        EXPECT_EQ(r.violations, 0u) << r.first;
      }
  }
}

TEST(Uniform, LawsRandomWideBits) {
  Rng rng = make_rng(41, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = 5 + trial % 4;
    const double s = std::exp(uniform(rng, -6.0, 1.0));
    const QuantParams p{s, static_cast<std::int64_t>(uniform(rng, 0.0, std::ldexp(1.0, k))), k, false};
    std::vector<double> xs;
    for (int i = 0; i < 2000; ++i) xs.push_back(uniform(rng, -1.2, 1.2) * s * std::ldexp(1.0, k));
    const auto r = testing::uniform_laws(p, xs);
    EXPECT_EQ(r.violations, 0u) << r.first;
  }
}

TEST(Laws, CheckerRejectsBrokenMaps) {
  std::vector<double> xs;
  add_grid_probes(xs, 0.0, 0.25, 8);
  const std::vector<testing::Region> grid{{0.0, 1.75, 0.25}};
  // Off-grid outputs.
  EXPECT_GT(testing::check_laws([](double x) { return x; }, xs, grid, 8, "id").violations, 0u);
  // Non-monotone and too many levels.
  auto wrap = [](double x) { return 0.25 * std::fmod(std::round(std::abs(x) * 4.0), 9.0); };
  EXPECT_GT(testing::check_laws(wrap, xs, grid, 8, "wrap").violations, 0u);
  // Rounds to the wrong neighbour.
  EXPECT_GT(testing::check_laws([](double x) { return 0.25 * std::clamp(std::floor(x * 4.0), 0.0, 7.0); }, xs, grid,
                                8, "floor")
                .violations,
            0u);
}

TEST(MultiRegion, SoftmaxHandCases) {
  EXPECT_EQ(MultiRegionParams::softmax_coarse_step(8), 0.0078125);
  const auto p = MultiRegionParams::softmax(1.0 / 2048, 8);
  EXPECT_EQ(quantize_mrq_softmax_value(0.0, p), 0.0);
  EXPECT_EQ(quantize_mrq_softmax_value(0.9, p), 0.8984375);
  // Fine region keeps small probabilities that the coarse step would zero.
  EXPECT_EQ(quantize_mrq_softmax_value(3.0 / 2048, p), 3.0 / 2048);
  EXPECT_THROW(quantize_mrq_softmax(Tensor({1}, std::vector<double>{1.01}), p), ContractError);
  EXPECT_NO_THROW(quantize_mrq_softmax(Tensor({1}, std::vector<double>{1.0 + 5e-7}), p));
  EXPECT_THROW(MultiRegionParams::softmax(0.01, 8), ConfigError);  // boundary 1.28 > 1
  EXPECT_THROW((MultiRegionParams{RegionKind::post_softmax, 1e-3, 0.01, 8}.validate()), ConfigError);
}

TEST(MultiRegion, GeluHandCases) {
  const auto p = MultiRegionParams::gelu(0.17 / 32, 0.02, 6);
  EXPECT_EQ(quantize_mrq_gelu_value(0.0, p), 0.0);
  EXPECT_DOUBLE_EQ(quantize_mrq_gelu_value(5.0, p), 31 * 0.02);
  // The GELU minimum needs no clipping at s1 = 0.17 / 2^(k-1).
  EXPECT_LE(std::abs(quantize_mrq_gelu_value(kGeluMinimum, p) - kGeluMinimum), p.s1 / 2);
  EXPECT_THROW(quantize_mrq_gelu(Tensor({1}), MultiRegionParams::softmax(1e-3, 6)), ContractError);
}

TEST(MultiRegion, LawsExhaustiveSmallBits) {
  for (int k = 2; k <= 8; ++k) {
    const double s2 = MultiRegionParams::softmax_coarse_step(k);
    const std::int64_t half = std::int64_t{1} << (k - 1);
    for (double frac : {0.05, 0.3, 0.77, 1.0}) {
      const auto p = MultiRegionParams::softmax(frac * MultiRegionParams::softmax_max_s1(k), k);
      std::vector<double> xs;
      add_grid_probes(xs, 0.0, p.s1, half);
      add_grid_probes(xs, 0.0, s2, half);
      std::erase_if(xs, [](double v) { return v < 0.0 || v > 1.0; });
      const auto r = testing::softmax_laws(p, xs);
      EXPECT_EQ(r.violations, 0u) << r.first;
    }
    for (double s1 : {0.01, 0.17 / static_cast<double>(half)})
      for (double g2 : {0.05, 0.4}) {
        const auto p = MultiRegionParams::gelu(s1, g2, k);
        std::vector<double> xs;
        add_grid_probes(xs, -static_cast<double>(half) * s1, s1, half);
        add_grid_probes(xs, 0.0, g2, half);
        const auto r = testing::gelu_laws(p, xs);
        EXPECT_EQ(r.violations, 0u) << r.first;
      }
  }
}

TEST(MultiRegion, InitCoversObservedRange) {
  const std::vector<double> a{0.0, 0.01, 0.2, 0.6};
  const auto p = init_mrq_softmax(a, 8);
  EXPECT_DOUBLE_EQ(p.s1, 0.6 / 255);
  const std::vector<double> g{kGeluMinimum, 0.0, 3.1};
  const auto q = init_mrq_gelu(g, 6);
  EXPECT_DOUBLE_EQ(q.s1, -kGeluMinimum / 32);
  EXPECT_DOUBLE_EQ(q.s2, 3.1 / 31);
  EXPECT_DOUBLE_EQ(quantize_mrq_gelu_value(3.1, q), 3.1);
}

TEST(TimeGroups, Boundaries) {
  EXPECT_EQ(group_of(0, 100, 10), 0);
  EXPECT_EQ(group_of(37, 100, 10), 3);
  EXPECT_EQ(group_of(99, 100, 10), 9);
  EXPECT_EQ(group_of(10, 100, 10), 1);
  EXPECT_THROW(group_of(100, 100, 10), DomainError);
  EXPECT_THROW(group_of(-1, 100, 10), DomainError);
  EXPECT_THROW(group_of(0, 100, 7), ConfigError);
  // Every t lands in exactly one group of size T/G, in order.
  for (int G : {1, 2, 4, 5, 10, 20, 100}) {
    std::vector<int> size(static_cast<std::size_t>(G));
    int prev = 0;
    for (int t = 0; t < 100; ++t) {
      const int g = group_of(t, 100, G);
      EXPECT_GE(g, prev);
      prev = g;
      ++size[static_cast<std::size_t>(g)];
    }
    for (int s : size) EXPECT_EQ(s, 100 / G);
  }
}

TEST(TimeGroups, DispatchPerGroup) {
  const auto fine = MultiRegionParams::softmax(1.0 / 4096, 8);
  const auto coarse = MultiRegionParams::softmax(1.0 / 512, 8);
  const TimeGroupedParams one{100, 1, {fine}};
  const TimeGroupedParams two{100, 2, {fine, coarse}};
  Rng rng = make_rng(5, 0);
  Tensor a({64});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = uniform(rng, 0.0, 0.1);
  for (int t : {0, 49, 50, 99}) EXPECT_EQ(quantize_tgq(a, t, one), quantize_mrq_softmax(a, fine));
  EXPECT_EQ(quantize_tgq(a, 49, two), quantize_mrq_softmax(a, fine));
  EXPECT_EQ(quantize_tgq(a, 50, two), quantize_mrq_softmax(a, coarse));
  const TimeGroupedParams broken{100, 2, {fine}};
  EXPECT_THROW(quantize_tgq(a, 0, broken), ConfigError);
}

TEST(Weights, PerTensorAndPerChannel) {
  const Tensor w({2, 3}, std::vector<double>{0.1, -0.2, 0.33, 1.0, 2.0, -3.0});
  EXPECT_EQ(quantize_weight(w, WeightQuant{}), w);
  const QuantParams r0 = init_minmax(std::span(w.data()).subspan(0, 3), 4);
  const QuantParams r1 = init_minmax(std::span(w.data()).subspan(3, 3), 4);
  const Tensor q = quantize_weight(w, WeightQuant{{r0, r1}});
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(q[c], quantize_value(w[c], r0));
    EXPECT_EQ(q[3 + c], quantize_value(w[3 + c], r1));
  }
  EXPECT_THROW(quantize_weight(w, WeightQuant{{r0, r1, r0}}), DimensionError);
}

TEST(QuantizedModel, PredictorIsDeterministicAndPure) {
  const DiTConfig c = testing::tiny_config();
  const DiTModel m = DiTModel::init(c, 3, Init::random);
  QuantizedModel qm(m);
  for (std::size_t i = 0; i < m.sites().size(); ++i) {
    SiteQuant q;
    q.enabled = true;
    if (has_weight(m.site(i).kind)) q.weight.channels = {init_minmax(m.param(m.site(i).weight), 6)};
    q.a = QuantParams{0.05, 32, 6, false};
    if (!has_weight(m.site(i).kind)) q.b = QuantParams{0.05, 32, 6, false};
    qm.set(i, q);
  }
  Rng rng = make_rng(8, 0);
  const Tensor x = randn(c.image_shape(), rng);
  const Tensor a = qm.predict(x, 2, 1);
  EXPECT_TRUE(a.all_finite());
  EXPECT_EQ(qm.predict(x, 2, 1), a);
  EXPECT_NE(a, predict_noise(m, x, 2, 1));
}

}  // namespace
}  // namespace tqdit
