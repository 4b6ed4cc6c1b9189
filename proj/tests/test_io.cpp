// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "support.hpp"

namespace tqdit {
namespace {

TEST(Config, DefaultsParseFromEmptyObject) {
  const RunConfig c = parse_run_config("{}");
  EXPECT_EQ(c.schedule.timesteps, 100);
  EXPECT_EQ(c.calibration.groups, 10);
  EXPECT_EQ(c.model.timesteps, 100);
  EXPECT_EQ(c.train.seed, c.seeds.train);
}

TEST(Config, OverridesAreRead) {
  const RunConfig c = parse_run_config(R"({"calibration": {"groups": 5, "mode": "trajectory", "act_bits": 6},
                                           "ablation": {"seeds": [7, 9]}, "seeds": {"train": 42}})");
  EXPECT_EQ(c.calibration.groups, 5);
  EXPECT_EQ(c.calibration.mode, CalibrationMode::trajectory);
  EXPECT_EQ(c.calibration.act_bits, 6);
  EXPECT_EQ(c.ablation.seeds, (std::vector<std::uint64_t>{7, 9}));
  EXPECT_EQ(c.train.seed, 42u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_run_config("{"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"model": {"embed": 32}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"colour": 1})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"model": {"embed_dim": "wide"}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"calibration": {"groups": 7}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"calibration": {"weight_bits": 9}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"calibration": {"mode": "sideways"}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"calibration": {"multi_region": false}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"ablation": {"seeds": []}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"schedule": {"beta_end": 2.0}})"), ConfigError);
}

TEST(Config, ErrorNamesTheKeyPath) {
  try {
    parse_run_config(R"({"train": {"steps": true}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.steps"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RoundTripIsExactInFloat32) {
  const DiTConfig c = testing::tiny_config();
  const DiTModel m = DiTModel::init(c, 4, Init::random);
  const std::string bytes = checkpoint_bytes(m);
  const DiTModel back = parse_checkpoint(bytes);
  EXPECT_TRUE(back.config() == c);
  EXPECT_EQ(checkpoint_bytes(back), bytes);
  const auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    for (std::size_t k = 0; k < pa[i].value.size(); ++k)
      EXPECT_EQ(static_cast<double>(static_cast<float>(pa[i].value[k])), pb[i].value[k]);
  }
}

TEST(Checkpoint, CorruptionIsRejected) {
  const DiTModel m = DiTModel::init(testing::tiny_config(), 4, Init::random);
  const std::string bytes = checkpoint_bytes(m);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 4)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes + "xxxx"), FormatError);
  EXPECT_THROW(parse_checkpoint("hello\nend\n"), FormatError);
  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  EXPECT_THROW(parse_checkpoint(flipped), FormatError);
}

struct SidecarFixture : ::testing::Test {
  DiTConfig c = testing::tiny_config();
  NoiseSchedule s = testing::schedule_for(c);
  DiTModel m = DiTModel::init(c, 5, Init::random);
  std::string digest = sha256_hex(checkpoint_bytes(m));

  QuantSidecar make(int bits) const {
    const SyntheticDataset data(1, c);
    const CalibrationDataset ds = build_calib_dataset(m, s, data, 5, 1, CalibrationMode::forward_corruption, 3);
    CalibrationOptions o;
    o.weight_bits = o.act_bits = bits;
    o.groups = 5;
    o.rounds = 1;
    o.candidates = 8;
    const CalibrationResult r = calibrate(m, collect_layer_stats(m, ds), o);
    return QuantSidecar{digest, {ds.digest(), to_string(ds.mode), ds.groups, ds.per_group, 3, o}, r.quant, r.report};
  }
};

TEST_F(SidecarFixture, RoundTripReproducesOutputs) {
  const QuantSidecar sc = make(6);
  const std::string text = sidecar_text(m, sc);
  const QuantSidecar back = parse_sidecar(text, m, digest);
  EXPECT_EQ(sidecar_text(m, back), text);
  EXPECT_EQ(back.provenance.options.weight_bits, 6);
  const QuantizedModel a = make_quantized(m, sc.quant), b = make_quantized(m, back.quant);
  Rng rng = make_rng(9, 0);
  const Tensor x = randn(c.image_shape(), rng);
  for (int t : {0, 4, 9}) EXPECT_EQ(a.predict(x, t, 1).vec(), b.predict(x, t, 1).vec());
}

TEST_F(SidecarFixture, TamperingAndMismatchAreRejected) {
  const std::string text = sidecar_text(m, make(6));
  EXPECT_THROW(parse_sidecar(text, m, std::string(64, '0')), FormatError);
  std::string tampered = text;
  const auto pos = tampered.find("\"enabled\": true");
  ASSERT_NE(pos, std::string::npos);
  tampered.replace(pos, 15, "\"enabled\":false");
  EXPECT_THROW(parse_sidecar(tampered, m, digest), FormatError);
  EXPECT_THROW(parse_sidecar("not json", m, digest), FormatError);
  DiTConfig other = c;
  other.num_blocks = 2;
  const DiTModel deeper = DiTModel::init(other, 5, Init::random);
  EXPECT_THROW(parse_sidecar(text, deeper, digest), FormatError);
}

TEST_F(SidecarFixture, PrecisionChangesTheSidecar) {
  EXPECT_NE(sidecar_text(m, make(6)), sidecar_text(m, make(8)));
  EXPECT_EQ(sidecar_text(m, make(6)), sidecar_text(m, make(6)));
}

TEST(Archive, RoundTripAndCorruption) {
  Rng rng = make_rng(1, 0);
  std::vector<Tensor> xs;
  for (int i = 0; i < 3; ++i) xs.push_back(randn({1, 4, 4}, rng));
  const std::string bytes = archive_bytes(xs, {1, 4, 4});
  const auto back = parse_archive(bytes);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(back[i][k], static_cast<double>(static_cast<float>(xs[i][k])));
  EXPECT_EQ(archive_bytes(back, {1, 4, 4}), bytes);
  std::string flipped = bytes;
  flipped.back() ^= 1;
  EXPECT_THROW(parse_archive(flipped), FormatError);
  EXPECT_THROW(parse_archive(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(archive_bytes(xs, {1, 2, 8}), DimensionError);
  EXPECT_TRUE(parse_archive(archive_bytes({}, {1, 4, 4})).empty());
}

TEST(Preview, PgmHeaderAndClamping) {
  Tensor x({1, 2, 2});
  x[0] = -1.0, x[1] = 1.0, x[2] = 5.0, x[3] = 0.0;
  const std::string p = pgm_preview(x);
  ASSERT_EQ(p.substr(0, 11), "P5\n2 2\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(p[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(p[12]), 255);
  EXPECT_EQ(static_cast<unsigned char>(p[13]), 255);
  EXPECT_EQ(static_cast<unsigned char>(p[14]), 128);
}

}  // namespace
}  // namespace tqdit
