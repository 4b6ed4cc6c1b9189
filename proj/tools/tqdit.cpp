// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0
//
// tqdit: train, calibrate, generate, evaluate and ablate from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "tqdit/tqdit.hpp"

namespace {

using namespace tqdit;

enum Exit : int { kOk = 0, kFailure = 1, kBadConfig = 2, kDiverged = 3, kBadInput = 4 };

struct Flags {
  std::string config;
  std::string checkpoint;
  std::string sidecar;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string bits;
  std::optional<int> groups;
  std::optional<int> samples_per_group;
  std::optional<int> rounds;
  std::string mode;
  std::optional<std::size_t> samples;
  std::vector<std::string> archives;
};

std::pair<int, int> parse_bits(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ConfigError("--bits expects <kW>:<kA>, got '" + s + "'");
  try {
    std::size_t a = 0, b = 0;
    const int kw = std::stoi(s.substr(0, colon), &a);
    const int ka = std::stoi(s.substr(colon + 1), &b);
    if (a != colon || b != s.size() - colon - 1) throw std::invalid_argument("trailing");
    return {kw, ka};
  } catch (const std::logic_error&) {
    throw ConfigError("--bits expects <kW>:<kA>, got '" + s + "'");
  }
}

RunConfig load_config(const Flags& f) {
  RunConfig c = f.config.empty() ? parse_run_config("{}") : load_run_config(f.config);
  if (!f.out.empty()) c.output_dir = f.out;
  if (!f.bits.empty()) {
    auto [kw, ka] = parse_bits(f.bits);
    c.calibration.weight_bits = c.ablation.weight_bits = kw;
    c.calibration.act_bits = c.ablation.act_bits = ka;
  }
  if (f.groups) c.calibration.groups = *f.groups;
  if (f.samples_per_group) c.calibration.samples_per_group = c.ablation.samples_per_group = *f.samples_per_group;
  if (f.rounds) c.calibration.rounds = *f.rounds;
  if (!f.mode.empty()) c.calibration.mode = parse_mode(f.mode);
  if (f.samples) c.generate_samples = *f.samples;
  c.validate();
  return c;
}

fs::path out_dir(const RunConfig& c) {
  fs::path p(c.output_dir);
  fs::create_directories(p);
  return p;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw std::invalid_argument(std::string("missing required input ") + flag);
}

/// Loads the checkpoint named by --checkpoint and checks it against the config.
std::pair<DiTModel, std::string> load_model(const Flags& f, const RunConfig& c) {
  require(f.checkpoint, "--checkpoint");
  const std::string bytes = read_text(f.checkpoint);
  DiTModel model = parse_checkpoint(bytes);
  if (!(model.config() == c.model)) {
    throw ConfigError("checkpoint " + f.checkpoint + " does not match the config's model section");
  }
  return {std::move(model), sha256_hex(bytes)};
}

int cmd_train(const Flags& f) {
  RunConfig c = load_config(f);
  if (f.seed) c.train.seed = c.seeds.train = *f.seed;
  const fs::path dir = out_dir(c);
  TrainLog log;
  const DiTModel model = train_fp(c.model, c.make_noise_schedule(), c.dataset(), c.train, &log);
  save_checkpoint(dir / "model.ckpt", model);
  std::string csv = "step,loss\n";
  for (const auto& [step, loss] : log.curve) csv += std::to_string(step) + "," + fmt_double(loss) + "\n";
  write_text(dir / "train_log.csv", csv);
  std::printf("trained %zu parameters; validation loss %.6g -> %.6g\nwrote %s\n", model.parameter_count(),
              log.initial_validation_loss, log.final_validation_loss, (dir / "model.ckpt").c_str());
  return kOk;
}

int cmd_calibrate(const Flags& f) {
  RunConfig c = load_config(f);
  if (f.seed) c.seeds.calibration = *f.seed;
  auto [model, ckpt_digest] = load_model(f, c);
  const fs::path dir = out_dir(c);
  const NoiseSchedule schedule = c.make_noise_schedule();
  const CalibrationDataset ds = build_calib_dataset(model, schedule, c.dataset(), c.calibration.groups,
                                                    c.calibration.samples_per_group, c.calibration.mode,
                                                    c.seeds.calibration);
  const LayerStats stats = collect_layer_stats(model, ds);
  const CalibrationOptions opt = c.calibration.options();
  const CalibrationResult result = calibrate(model, stats, opt);
  QuantSidecar sc{ckpt_digest, {ds.digest(), to_string(ds.mode), ds.groups, ds.per_group, c.seeds.calibration, opt},
                  result.quant, result.report};
  write_text(dir / "quant.json", sidecar_text(model, sc));
  write_text(dir / "calibration_report.txt", calibration_report_text(model, result));
  std::printf("calibrated %zu sites at W%dA%d; mean objective %.6g\nwrote %s\n", result.quant.size(), opt.weight_bits,
              opt.act_bits, result.report.mean_ho_objective(), (dir / "quant.json").c_str());
  return kOk;
}

NoisePredictor predictor_for(const Flags& f, const DiTModel& model, const std::string& ckpt_digest,
                             std::optional<QuantizedModel>& holder) {
  if (f.sidecar.empty()) return fp_predictor(model);
  const QuantSidecar sc = parse_sidecar(read_text(f.sidecar), model, ckpt_digest);
  holder.emplace(make_quantized(model, sc.quant));
  return holder->predictor();
}

int cmd_generate(const Flags& f) {
  RunConfig c = load_config(f);
  if (f.seed) c.seeds.sampling = *f.seed;
  auto [model, ckpt_digest] = load_model(f, c);
  std::optional<QuantizedModel> qm;
  const NoisePredictor pred = predictor_for(f, model, ckpt_digest, qm);
  const fs::path dir = out_dir(c);
  const auto samples = generate_samples(pred, c.make_noise_schedule(), c.model.image_shape(), c.model.num_classes,
                                        c.generate_samples, c.seeds.sampling);
  write_text(dir / "samples.tqs", archive_bytes(samples, c.model.image_shape()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu.pgm", i);
    write_text(dir / "previews" / name, pgm_preview(samples[i]));
  }
  std::printf("generated %zu samples (%s)\nwrote %s\n", samples.size(), f.sidecar.empty() ? "full precision" : "quantized",
              (dir / "samples.tqs").c_str());
  return kOk;
}

int cmd_evaluate(const Flags& f) {
  RunConfig c = load_config(f);
  if (f.seed) c.seeds.sampling = *f.seed;
  if (f.archives.empty() && f.checkpoint.empty()) {
    throw std::invalid_argument("missing inputs: give --archive (one or two) and/or --checkpoint [--sidecar]");
  }
  if (f.archives.size() > 2) throw std::invalid_argument("at most two --archive inputs");
  const fs::path dir = out_dir(c);
  std::string csv = "metric,value\n", summary;
  json j = json::object();
  if (!f.archives.empty()) {
    const auto a = parse_archive(read_text(f.archives[0]));
    const auto b = f.archives.size() == 2 ? parse_archive(read_text(f.archives[1]))
                                          : c.dataset().images(c.ablation.reference_samples, 1'000'000);
    const double fd = toy_frechet(a, b, c.seeds.projection);
    csv += "toy_fd," + fmt_double(fd) + "\n";
    j["toy_fd"] = fd;
    j["reference"] = f.archives.size() == 2 ? "archive" : "dataset";
    summary += "toy_fd " + fmt_double(fd, 6) + (f.archives.size() == 2 ? " (archive vs archive)\n" : " (vs dataset)\n");
  }
  if (!f.checkpoint.empty()) {
    auto [model, ckpt_digest] = load_model(f, c);
    std::optional<QuantizedModel> qm;
    const NoisePredictor pred = predictor_for(f, model, ckpt_digest, qm);
    const NoiseSchedule schedule = c.make_noise_schedule();
    const auto curve = trajectory_divergence(fp_predictor(model), pred, schedule, c.model.image_shape(),
                                             c.model.num_classes, c.ablation.trajectories, c.seeds.sampling);
    csv += "mean_divergence," + fmt_double(mean_of(curve)) + "\n";
    j["mse_curve"] = curve;
    j["mean_divergence"] = mean_of(curve);
    summary += "mean trajectory divergence " + fmt_double(mean_of(curve), 6) + " over " +
               std::to_string(c.ablation.trajectories) + " trajectories\n";
  }
  write_text(dir / "metrics.csv", csv);
  write_text(dir / "metrics.json", j.dump(1) + "\n");
  write_text(dir / "summary.txt", summary);
  std::fputs(summary.c_str(), stdout);
  return kOk;
}

int cmd_ablate(const Flags& f) {
  RunConfig c = load_config(f);
  if (f.seed) {
    for (std::size_t i = 0; i < c.ablation.seeds.size(); ++i) c.ablation.seeds[i] = *f.seed + i;
  }
  auto [model, ckpt_digest] = load_model(f, c);
  const fs::path dir = out_dir(c);
  AblationSettings s;
  s.base = c.calibration.options();
  s.samples_per_group = c.ablation.samples_per_group;
  s.mode = c.calibration.mode;
  s.fd_samples = c.ablation.fd_samples;
  s.reference_samples = c.ablation.reference_samples;
  s.trajectories = c.ablation.trajectories;
  s.projection_seed = c.seeds.projection;
  const AblationResult r =
      run_ablation(model, c.make_noise_schedule(), c.dataset(),
                   AblationConfig::ladder(c.ablation.weight_bits, c.ablation.act_bits), c.ablation.seeds, s);
  const MetricTables t = ablation_tables(r);
  write_text(dir / "ablation.csv", t.csv);
  write_text(dir / "ablation.json", t.json_text);
  write_text(dir / "curves.csv", t.curves_csv);
  write_text(dir / "summary.txt", t.summary);
  std::fputs(t.summary.c_str(), stdout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-aware post-training quantization for small diffusion transformers"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "Run config (JSON)");
    sub->add_option("--out", f.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", f.seed, "Seed for this command's randomness");
  };
  auto calib_flags = [&](CLI::App* sub) {
    sub->add_option("--bits", f.bits, "Bit widths <kW>:<kA>");
    sub->add_option("--groups", f.groups, "Timestep groups G (must divide T)");
    sub->add_option("--samples-per-group", f.samples_per_group, "Calibration samples per group");
    sub->add_option("--rounds", f.rounds, "Alternation rounds R");
    sub->add_option("--mode", f.mode, "Calibration set mode")->check(CLI::IsMember({"forward", "trajectory"}));
  };

  auto* train = app.add_subcommand("train", "Train a full-precision model");
  common(train);
  auto* calibrate = app.add_subcommand("calibrate", "Calibrate quantizers and write a sidecar");
  common(calibrate);
  calib_flags(calibrate);
  calibrate->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
  auto* generate = app.add_subcommand("generate", "Sample images (quantized when --sidecar is given)");
  common(generate);
  generate->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
  generate->add_option("--sidecar", f.sidecar, "Quantizer sidecar");
  generate->add_option("--samples", f.samples, "Number of samples");
  auto* evaluate = app.add_subcommand("evaluate", "toy-FD of archives and trajectory divergence of a quantized model");
  common(evaluate);
  evaluate->add_option("--archive", f.archives, "Sample archive (give two to compare them)");
  evaluate->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  evaluate->add_option("--sidecar", f.sidecar, "Quantizer sidecar");
  auto* ablate = app.add_subcommand("ablate", "Run the baseline/+HO/+HO+MRQ/+HO+MRQ+TGQ ladder");
  common(ablate);
  calib_flags(ablate);
  ablate->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(f);
    if (*calibrate) return cmd_calibrate(f);
    if (*generate) return cmd_generate(f);
    if (*evaluate) return cmd_evaluate(f);
    if (*ablate) return cmd_ablate(f);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kBadConfig;
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return kDiverged;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "bad input: %s\n", e.what());
    return kBadInput;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kBadInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
