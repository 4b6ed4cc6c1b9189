// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqdit/evaluation.hpp"

namespace tqdit {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- run config

struct SeedConfig {
  std::uint64_t dataset = 1;
  std::uint64_t train = 2;
  std::uint64_t calibration = 3;
  std::uint64_t sampling = 4;
  std::uint64_t projection = 5;
};

struct ScheduleConfig {
  int timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct CalibrationConfig {
  int groups = 10;
  int samples_per_group = 32;
  CalibrationMode mode = CalibrationMode::forward_corruption;
  int weight_bits = 8;
  int act_bits = 8;
  int rounds = 3;
  int candidates = 100;
  bool hessian = true;
  bool multi_region = true;
  bool time_grouping = true;
  bool per_channel_weights = false;
  bool quantize_head = true;

  CalibrationOptions options() const {
    CalibrationOptions o;
    o.weight_bits = weight_bits;
    o.act_bits = act_bits;
    o.rounds = rounds;
    o.candidates = candidates;
    o.hessian = hessian;
    o.multi_region = multi_region;
    o.time_grouping = time_grouping;
    o.groups = groups;
    o.per_channel_weights = per_channel_weights;
    o.quantize_head = quantize_head;
    return o;
  }
};

struct AblationRunConfig {
  std::vector<std::uint64_t> seeds{11, 12, 13, 14, 15};
  int weight_bits = 6;
  int act_bits = 6;
  int samples_per_group = 8;
  std::size_t fd_samples = 64;
  std::size_t reference_samples = 256;
  std::size_t trajectories = 10;
};

struct RunConfig {
  DiTConfig model;
  ScheduleConfig schedule;
  TrainOptions train;
  CalibrationConfig calibration;
  AblationRunConfig ablation;
  std::size_t generate_samples = 64;
  SeedConfig seeds;
  std::string output_dir = "runs/default";

  NoiseSchedule make_noise_schedule() const {
    return make_schedule(schedule.timesteps, schedule.beta_start, schedule.beta_end);
  }
  SyntheticDataset dataset() const { return SyntheticDataset(seeds.dataset, model); }

  /// Checks cross-field rules: bit widths in 2..8, G | T, model geometry.
  void validate() const {
    if (model.timesteps != schedule.timesteps) throw ConfigError("model and schedule timesteps differ");
    model.validate();
    make_noise_schedule();
    auto bits = [](const char* key, int k) {
      if (k < 2 || k > 8) throw ConfigError(std::string(key) + " must be in 2..8, got " + std::to_string(k));
    };
    bits("calibration.weight_bits", calibration.weight_bits);
    bits("calibration.act_bits", calibration.act_bits);
    bits("ablation.weight_bits", ablation.weight_bits);
    bits("ablation.act_bits", ablation.act_bits);
    if (calibration.groups < 1 || schedule.timesteps % calibration.groups != 0) {
      throw ConfigError("calibration.groups = " + std::to_string(calibration.groups) + " does not divide timesteps " +
                        std::to_string(schedule.timesteps));
    }
    if (calibration.samples_per_group < 1) throw ConfigError("calibration.samples_per_group must be at least 1");
    if (ablation.samples_per_group < 1) throw ConfigError("ablation.samples_per_group must be at least 1");
    if (calibration.rounds < 1) throw ConfigError("calibration.rounds must be at least 1");
    if (calibration.candidates < 1) throw ConfigError("calibration.candidates must be positive");
    if (calibration.time_grouping && !calibration.multi_region) {
      throw ConfigError("calibration.time_grouping requires calibration.multi_region");
    }
    if (ablation.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
    if (ablation.fd_samples < kMinFrechetSamples || ablation.reference_samples < kMinFrechetSamples) {
      throw ConfigError("ablation sample counts must be at least " + std::to_string(kMinFrechetSamples));
    }
    if (ablation.trajectories < 1) throw ConfigError("ablation.trajectories must be at least 1");
  }
};

inline CalibrationMode parse_mode(const std::string& s) {
  if (s == "forward") return CalibrationMode::forward_corruption;
  if (s == "trajectory") return CalibrationMode::trajectory;
  throw ConfigError("mode must be 'forward' or 'trajectory', got '" + s + "'");
}

namespace detail {

/// Reads known keys from a JSON object, rejecting unknown keys and wrong types by path.
class ConfigReader {
 public:
  ConfigReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + display() + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.emplace_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string name = join(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError("key '" + name + "' must be a boolean");
      out = it->get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError("key '" + name + "' must be a string");
      out = it->get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError("key '" + name + "' must be a number");
      out = it->get<double>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) throw ConfigError("key '" + name + "' must be a non-negative integer");
      out = static_cast<T>(it->get<std::uint64_t>());
    } else {
      if (!it->is_number_integer()) throw ConfigError("key '" + name + "' must be an integer");
      const auto v = it->get<std::int64_t>();
      if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        throw ConfigError("key '" + name + "' is out of range");
      }
      out = static_cast<T>(v);
    }
  }

  void read_seeds(const char* key, std::vector<std::uint64_t>& out) {
    seen_.emplace_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string name = join(key);
    if (!it->is_array()) throw ConfigError("key '" + name + "' must be an array of seeds");
    out.clear();
    for (const auto& v : *it) {
      if (!v.is_number_unsigned()) throw ConfigError("key '" + name + "' must contain non-negative integers");
      out.push_back(v.get<std::uint64_t>());
    }
  }

  ConfigReader child(const char* key) {
    seen_.emplace_back(key);
    auto it = j_.find(key);
    static const json empty = json::object();
    return ConfigReader(it == j_.end() ? empty : *it, join(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw ConfigError("unknown key '" + join(it.key()) + "'");
      }
    }
  }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  detail::ConfigReader root(j, "");

  auto m = root.child("model");
  m.read("image_size", c.model.image_size);
  m.read("channels", c.model.channels);
  m.read("patch_size", c.model.patch_size);
  m.read("embed_dim", c.model.embed_dim);
  m.read("num_blocks", c.model.num_blocks);
  m.read("num_heads", c.model.num_heads);
  m.read("num_classes", c.model.num_classes);
  m.read("mlp_ratio", c.model.mlp_ratio);
  m.finish();

  auto s = root.child("schedule");
  s.read("timesteps", c.schedule.timesteps);
  s.read("beta_start", c.schedule.beta_start);
  s.read("beta_end", c.schedule.beta_end);
  s.finish();
  c.model.timesteps = c.schedule.timesteps;

  auto t = root.child("train");
  t.read("steps", c.train.steps);
  t.read("batch_size", c.train.batch_size);
  t.read("learning_rate", c.train.learning_rate);
  t.read("log_every", c.train.log_every);
  t.read("validation_samples", c.train.validation_samples);
  t.finish();

  auto cal = root.child("calibration");
  std::string mode = "forward";
  cal.read("groups", c.calibration.groups);
  cal.read("samples_per_group", c.calibration.samples_per_group);
  cal.read("mode", mode);
  cal.read("weight_bits", c.calibration.weight_bits);
  cal.read("act_bits", c.calibration.act_bits);
  cal.read("rounds", c.calibration.rounds);
  cal.read("candidates", c.calibration.candidates);
  cal.read("hessian", c.calibration.hessian);
  cal.read("multi_region", c.calibration.multi_region);
  cal.read("time_grouping", c.calibration.time_grouping);
  cal.read("per_channel_weights", c.calibration.per_channel_weights);
  cal.read("quantize_head", c.calibration.quantize_head);
  cal.finish();
  c.calibration.mode = parse_mode(mode);

  auto a = root.child("ablation");
  a.read_seeds("seeds", c.ablation.seeds);
  a.read("weight_bits", c.ablation.weight_bits);
  a.read("act_bits", c.ablation.act_bits);
  a.read("samples_per_group", c.ablation.samples_per_group);
  a.read("fd_samples", c.ablation.fd_samples);
  a.read("reference_samples", c.ablation.reference_samples);
  a.read("trajectories", c.ablation.trajectories);
  a.finish();

  auto g = root.child("generate");
  g.read("samples", c.generate_samples);
  g.finish();

  auto sd = root.child("seeds");
  sd.read("dataset", c.seeds.dataset);
  sd.read("train", c.seeds.train);
  sd.read("calibration", c.seeds.calibration);
  sd.read("sampling", c.seeds.sampling);
  sd.read("projection", c.seeds.projection);
  sd.finish();

  root.read("output_dir", c.output_dir);
  root.finish();
  c.train.seed = c.seeds.train;
  c.validate();
  return c;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, std::string_view text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw FormatError("write failed for " + p.string());
}

inline RunConfig load_run_config(const fs::path& p) { return parse_run_config(read_text(p)); }

// -------------------------------------------------------------- float payload

namespace detail {

inline void append_f32le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline double read_f32le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape_token(const std::string& tok) {
  Shape s;
  std::stringstream ss(tok);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("bad shape '" + tok + "'");
    }
    s.push_back(static_cast<std::size_t>(std::stoull(part)));
  }
  if (s.empty()) throw FormatError("empty shape");
  return s;
}

/// Splits "header...end\n<payload>" at the first line equal to "end".
inline std::pair<std::vector<std::string>, std::string_view> split_manifest(std::string_view bytes) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) break;
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    if (line == "end") return {lines, bytes.substr(pos)};
    lines.push_back(std::move(line));
  }
  throw FormatError("manifest is not terminated by 'end'");
}

inline std::vector<std::string> words(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> w;
  for (std::string s; ss >> s;) w.push_back(s);
  return w;
}

inline std::string config_line(const DiTConfig& c) {
  return "config image_size=" + std::to_string(c.image_size) + " channels=" + std::to_string(c.channels) +
         " patch_size=" + std::to_string(c.patch_size) + " embed_dim=" + std::to_string(c.embed_dim) +
         " num_blocks=" + std::to_string(c.num_blocks) + " num_heads=" + std::to_string(c.num_heads) +
         " num_classes=" + std::to_string(c.num_classes) + " mlp_ratio=" + std::to_string(c.mlp_ratio) +
         " timesteps=" + std::to_string(c.timesteps);
}

inline DiTConfig parse_config_line(const std::vector<std::string>& w) {
  if (w.empty() || w[0] != "config") throw FormatError("expected config line");
  DiTConfig c;
  std::vector<std::pair<std::string, int*>> fields{
      {"image_size", &c.image_size}, {"channels", &c.channels},       {"patch_size", &c.patch_size},
      {"embed_dim", &c.embed_dim},   {"num_blocks", &c.num_blocks},   {"num_heads", &c.num_heads},
      {"num_classes", &c.num_classes}, {"mlp_ratio", &c.mlp_ratio}, {"timesteps", &c.timesteps}};
  if (w.size() != fields.size() + 1) throw FormatError("config line has " + std::to_string(w.size() - 1) + " fields");
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const std::string expect = fields[i].first + "=";
    if (w[i + 1].rfind(expect, 0) != 0) throw FormatError("config field '" + w[i + 1] + "' out of order");
    try {
      *fields[i].second = std::stoi(w[i + 1].substr(expect.size()));
    } catch (const std::exception&) {
      throw FormatError("config field '" + w[i + 1] + "' is not an integer");
    }
  }
  return c;
}

inline std::uint64_t parse_u64(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError(std::string("bad ") + what + " '" + s + "'");
  }
  return std::stoull(s);
}

}  // namespace detail

// ----------------------------------------------------------------- checkpoint

inline constexpr const char* kCheckpointMagic = "tqdit-checkpoint 1";

/// Text manifest, "end" line, then the little-endian float32 payload.
inline std::string checkpoint_bytes(const DiTModel& model) {
  std::string payload;
  std::string dir;
  std::size_t offset = 0;
  for (const Parameter& p : model.parameters()) {
    for (double v : p.value.data()) detail::append_f32le(payload, v);
    const std::size_t nbytes = p.value.size() * 4;
    dir += "tensor " + p.name + " f32le " + detail::shape_token(p.value.shape()) + " " + std::to_string(offset) + " " +
           std::to_string(nbytes) + "\n";
    offset += nbytes;
  }
  std::string out = std::string(kCheckpointMagic) + "\n" + detail::config_line(model.config()) + "\n";
  out += "tensors " + std::to_string(model.parameters().size()) + "\n" + dir;
  out += "payload_bytes " + std::to_string(payload.size()) + "\n";
  out += "sha256 " + sha256_hex(payload) + "\n";
  out += "end\n";
  return out + payload;
}

inline DiTModel parse_checkpoint(std::string_view bytes) {
  auto [lines, payload] = detail::split_manifest(bytes);
  if (lines.size() < 3 || lines[0] != kCheckpointMagic) throw FormatError("not a tqdit checkpoint (bad header)");
  const DiTConfig config = detail::parse_config_line(detail::words(lines[1]));
  auto count_words = detail::words(lines[2]);
  if (count_words.size() != 2 || count_words[0] != "tensors") throw FormatError("expected tensor count");
  const std::size_t count = detail::parse_u64(count_words[1], "tensor count");
  if (lines.size() != 3 + count + 2) throw FormatError("manifest line count does not match tensor count");
  std::vector<Parameter> params;
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < count; ++i) {
    auto w = detail::words(lines[3 + i]);
    if (w.size() != 6 || w[0] != "tensor") throw FormatError("bad tensor entry: " + lines[3 + i]);
    if (w[2] != "f32le") throw FormatError("unsupported dtype " + w[2]);
    const Shape shape = detail::parse_shape_token(w[3]);
    const std::size_t off = detail::parse_u64(w[4], "offset"), nbytes = detail::parse_u64(w[5], "byte count");
    if (off != expected_offset) throw FormatError("tensor " + w[1] + " offset overlaps or leaves a gap");
    if (nbytes != shape_size(shape) * 4) throw FormatError("tensor " + w[1] + " byte count does not match its shape");
    if (off + nbytes > payload.size()) throw FormatError("tensor " + w[1] + " extends past the payload");
    std::vector<double> values(shape_size(shape));
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = detail::read_f32le(payload.data() + off + 4 * k);
    params.push_back({w[1], Tensor(shape, std::move(values))});
    expected_offset = off + nbytes;
  }
  auto pb = detail::words(lines[3 + count]);
  if (pb.size() != 2 || pb[0] != "payload_bytes") throw FormatError("expected payload_bytes");
  const std::size_t declared = detail::parse_u64(pb[1], "payload size");
  if (declared != expected_offset || payload.size() != declared) {
    throw FormatError("payload length " + std::to_string(payload.size()) + " does not match manifest");
  }
  auto dg = detail::words(lines[4 + count]);
  if (dg.size() != 2 || dg[0] != "sha256") throw FormatError("expected sha256 line");
  if (sha256_hex(payload) != dg[1]) throw FormatError("checkpoint payload digest mismatch");
  try {
    return DiTModel::from_parameters(config, std::move(params));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint does not describe a valid model: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("checkpoint does not describe a valid model: ") + e.what());
  }
}

inline void save_checkpoint(const fs::path& p, const DiTModel& model) { write_text(p, checkpoint_bytes(model)); }
inline DiTModel load_checkpoint(const fs::path& p) { return parse_checkpoint(read_text(p)); }

// -------------------------------------------------------------------- sidecar

namespace detail {

inline json uniform_json(const QuantParams& q) {
  return {{"scale", q.scale}, {"zero_point", q.zero_point}, {"bits", q.bits}, {"degenerate", q.degenerate}};
}

inline QuantParams uniform_from_json(const json& j) {
  QuantParams q{j.at("scale").get<double>(), j.at("zero_point").get<std::int64_t>(), j.at("bits").get<int>(),
                j.at("degenerate").get<bool>()};
  q.validate();
  return q;
}

inline json mrq_json(const MultiRegionParams& p) {
  return {{"region", to_string(p.kind)}, {"s1", p.s1}, {"s2", p.s2}, {"bits", p.bits}};
}

inline MultiRegionParams mrq_from_json(const json& j) {
  const std::string region = j.at("region").get<std::string>();
  MultiRegionParams p;
  if (region == "post-softmax") p.kind = RegionKind::post_softmax;
  else if (region == "post-gelu") p.kind = RegionKind::post_gelu;
  else throw FormatError("unknown region kind " + region);
  p.s1 = j.at("s1").get<double>();
  p.s2 = j.at("s2").get<double>();
  p.bits = j.at("bits").get<int>();
  p.validate();
  return p;
}

inline json act_json(const ActQuant& q) {
  return std::visit(
      [](const auto& p) -> json {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, std::monostate>) return {{"type", "full-precision"}};
        else if constexpr (std::is_same_v<P, QuantParams>) {
          json j = uniform_json(p);
          j["type"] = "uniform";
          return j;
        } else if constexpr (std::is_same_v<P, MultiRegionParams>) {
          json j = mrq_json(p);
          j["type"] = "multi-region";
          return j;
        } else {
          json groups = json::array();
          for (const auto& g : p.groups) groups.push_back(mrq_json(g));
          return {{"type", "time-grouped"}, {"timesteps", p.timesteps}, {"group_count", p.group_count}, {"groups", groups}};
        }
      },
      q);
}

inline ActQuant act_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "full-precision") return std::monostate{};
  if (type == "uniform") return uniform_from_json(j);
  if (type == "multi-region") return mrq_from_json(j);
  if (type == "time-grouped") {
    TimeGroupedParams p;
    p.timesteps = j.at("timesteps").get<int>();
    p.group_count = j.at("group_count").get<int>();
    for (const auto& g : j.at("groups")) p.groups.push_back(mrq_from_json(g));
    if (p.groups.size() != static_cast<std::size_t>(p.group_count)) throw FormatError("time-grouped entry count mismatch");
    group_of(0, p.timesteps, p.group_count);
    return p;
  }
  throw FormatError("unknown quantizer type " + type);
}

}  // namespace detail

/// Calibration inputs recorded alongside the quantizers.
struct SidecarProvenance {
  std::string dataset_digest;
  std::string mode = "forward";
  int groups = 0;
  int samples_per_group = 0;
  std::uint64_t seed = 0;
  CalibrationOptions options;
};

struct QuantSidecar {
  std::string checkpoint_sha256;
  SidecarProvenance provenance;
  std::vector<SiteQuant> quant;
  CalibrationReport report;
};

inline std::string sidecar_text(const DiTModel& model, const QuantSidecar& sc) {
  if (sc.quant.size() != model.sites().size() || sc.report.sites.size() != model.sites().size()) {
    throw ContractError("sidecar must cover every site");
  }
  const auto& o = sc.provenance.options;
  json j;
  j["format"] = "tqdit-sidecar";
  j["version"] = 1;
  j["checkpoint_sha256"] = sc.checkpoint_sha256;
  j["provenance"] = {{"dataset_digest", sc.provenance.dataset_digest},
                     {"mode", sc.provenance.mode},
                     {"groups", sc.provenance.groups},
                     {"samples_per_group", sc.provenance.samples_per_group},
                     {"seed", sc.provenance.seed},
                     {"weight_bits", o.weight_bits},
                     {"act_bits", o.act_bits},
                     {"rounds", o.rounds},
                     {"candidates", o.candidates},
                     {"candidate_scheme", "linear-sweep-0.2-1.2"},
                     {"hessian", o.hessian},
                     {"multi_region", o.multi_region},
                     {"time_grouping", o.time_grouping},
                     {"per_channel_weights", o.per_channel_weights},
                     {"quantize_head", o.quantize_head}};
  json sites = json::array();
  for (std::size_t i = 0; i < sc.quant.size(); ++i) {
    const Site& s = model.site(i);
    const SiteQuant& q = sc.quant[i];
    const SiteReport& r = sc.report.sites[i];
    if (r.id != s.id) throw ContractError("report order does not match site order at " + s.id);
    json w = json::array();
    for (const auto& c : q.weight.channels) w.push_back(detail::uniform_json(c));
    sites.push_back({{"id", s.id},
                     {"kind", to_string(s.kind)},
                     {"enabled", q.enabled},
                     {"weight", w},
                     {"a", detail::act_json(q.a)},
                     {"b", detail::act_json(q.b)},
                     {"objective_init", r.objective_init},
                     {"objective_final", r.objective_final},
                     {"ho_objective", r.ho_objective},
                     {"trace", r.trace}});
  }
  j["sites"] = sites;
  j["digest"] = sha256_hex(j.dump());
  return j.dump(1) + "\n";
}

/// Parses a sidecar and checks its self-digest, its checkpoint digest and that
/// it names exactly the model's sites in order.
inline QuantSidecar parse_sidecar(const std::string& text, const DiTModel& model, const std::string& checkpoint_sha256) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("sidecar is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "tqdit-sidecar" || j.at("version").get<int>() != 1) {
      throw FormatError("not a tqdit sidecar");
    }
    const std::string digest = j.at("digest").get<std::string>();
    json body = j;
    body.erase("digest");
    if (sha256_hex(body.dump()) != digest) throw FormatError("sidecar digest mismatch (file altered or corrupt)");
    QuantSidecar sc;
    sc.checkpoint_sha256 = j.at("checkpoint_sha256").get<std::string>();
    if (sc.checkpoint_sha256 != checkpoint_sha256) throw FormatError("sidecar was calibrated for a different checkpoint");
    const json& p = j.at("provenance");
    sc.provenance.dataset_digest = p.at("dataset_digest").get<std::string>();
    sc.provenance.mode = p.at("mode").get<std::string>();
    sc.provenance.groups = p.at("groups").get<int>();
    sc.provenance.samples_per_group = p.at("samples_per_group").get<int>();
    sc.provenance.seed = p.at("seed").get<std::uint64_t>();
    auto& o = sc.provenance.options;
    o.weight_bits = p.at("weight_bits").get<int>();
    o.act_bits = p.at("act_bits").get<int>();
    o.rounds = p.at("rounds").get<int>();
    o.candidates = p.at("candidates").get<int>();
    o.hessian = p.at("hessian").get<bool>();
    o.multi_region = p.at("multi_region").get<bool>();
    o.time_grouping = p.at("time_grouping").get<bool>();
    o.per_channel_weights = p.at("per_channel_weights").get<bool>();
    o.quantize_head = p.at("quantize_head").get<bool>();
    o.groups = sc.provenance.groups;
    const json& sites = j.at("sites");
    if (sites.size() != model.sites().size()) throw FormatError("sidecar does not cover every site");
    for (std::size_t i = 0; i < sites.size(); ++i) {
      const json& s = sites[i];
      if (s.at("id").get<std::string>() != model.site(i).id) {
        throw FormatError("sidecar site " + std::to_string(i) + " is " + s.at("id").get<std::string>() + ", expected " +
                          model.site(i).id);
      }
      SiteQuant q;
      q.enabled = s.at("enabled").get<bool>();
      for (const auto& c : s.at("weight")) q.weight.channels.push_back(detail::uniform_from_json(c));
      q.a = detail::act_from_json(s.at("a"));
      q.b = detail::act_from_json(s.at("b"));
      sc.quant.push_back(std::move(q));
      SiteReport r;
      r.id = model.site(i).id;
      r.kind = model.site(i).kind;
      r.calibrated = sc.quant.back().enabled;
      r.objective_init = s.at("objective_init").get<double>();
      r.objective_final = s.at("objective_final").get<double>();
      r.ho_objective = s.at("ho_objective").get<double>();
      r.trace = s.at("trace").get<std::vector<double>>();
      sc.report.sites.push_back(std::move(r));
    }
    return sc;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed sidecar: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("sidecar holds invalid quantizer parameters: ") + e.what());
  }
}

// ----------------------------------------------------------------- formatting

inline std::string fmt_double(double v, int digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

namespace detail {

inline std::string describe(const QuantParams& q) {
  return "s=" + fmt_double(q.scale) + " z=" + std::to_string(q.zero_point) + " k=" + std::to_string(q.bits);
}

inline std::string describe(const ActQuant& q) {
  return std::visit(
      [](const auto& p) -> std::string {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, std::monostate>) return "fp";
        else if constexpr (std::is_same_v<P, QuantParams>) return "uniform(" + describe(p) + ")";
        else if constexpr (std::is_same_v<P, MultiRegionParams>)
          return std::string("mrq-") + to_string(p.kind) + "(s1=" + fmt_double(p.s1) + " s2=" + fmt_double(p.s2) +
                 " k=" + std::to_string(p.bits) + ")";
        else {
          std::string out = "tgq(";
          for (std::size_t g = 0; g < p.groups.size(); ++g) out += (g ? " " : "") + fmt_double(p.groups[g].s1);
          return out + ")";
        }
      },
      q);
}

}  // namespace detail

/// One record per site: id, kind, winning parameters, objectives and trace.
inline std::string calibration_report_text(const DiTModel& model, const CalibrationResult& r) {
  std::string out = "# tqdit calibration report\n";
  for (std::size_t i = 0; i < r.quant.size(); ++i) {
    const SiteReport& s = r.report.sites[i];
    const SiteQuant& q = r.quant[i];
    out += "site " + s.id + "\n  kind " + to_string(model.site(i).kind) + "\n";
    if (!s.calibrated) {
      out += "  full-precision\n";
      continue;
    }
    if (!q.weight.channels.empty()) {
      out += "  weight ";
      if (q.weight.channels.size() == 1) out += "uniform(" + detail::describe(q.weight.channels.front()) + ")\n";
      else out += "per-channel(" + std::to_string(q.weight.channels.size()) + " rows)\n";
    }
    out += "  a " + detail::describe(q.a) + "\n";
    if (!is_full_precision(q.b)) out += "  b " + detail::describe(q.b) + "\n";
    out += "  objective_init " + fmt_double(s.objective_init) + "\n";
    out += "  objective_final " + fmt_double(s.objective_final) + "\n";
    out += "  ho_objective " + fmt_double(s.ho_objective) + "\n";
    out += "  trace";
    for (double v : s.trace) out += " " + fmt_double(v);
    out += "\n";
  }
  out += "mean_ho_objective " + fmt_double(r.report.mean_ho_objective()) + "\n";
  return out;
}

// ------------------------------------------------------------ sample archive

inline constexpr const char* kArchiveMagic = "tqdit-samples 1";

inline std::string archive_bytes(const std::vector<Tensor>& samples, const Shape& shape) {
  std::string payload;
  for (const auto& s : samples) {
    if (s.shape() != shape) throw DimensionError("archive sample shape mismatch");
    for (double v : s.data()) detail::append_f32le(payload, v);
  }
  std::string out = std::string(kArchiveMagic) + "\ncount " + std::to_string(samples.size()) + "\nshape " +
                    detail::shape_token(shape) + "\nsha256 " + sha256_hex(payload) + "\nend\n";
  return out + payload;
}

inline std::vector<Tensor> parse_archive(std::string_view bytes) {
  auto [lines, payload] = detail::split_manifest(bytes);
  if (lines.size() != 4 || lines[0] != kArchiveMagic) throw FormatError("not a tqdit sample archive");
  auto cw = detail::words(lines[1]), sw = detail::words(lines[2]), dw = detail::words(lines[3]);
  if (cw.size() != 2 || cw[0] != "count" || sw.size() != 2 || sw[0] != "shape" || dw.size() != 2 || dw[0] != "sha256") {
    throw FormatError("malformed sample archive header");
  }
  const std::size_t count = detail::parse_u64(cw[1], "count");
  const Shape shape = detail::parse_shape_token(sw[1]);
  const std::size_t n = shape_size(shape);
  if (payload.size() != count * n * 4) throw FormatError("sample archive payload length mismatch");
  if (sha256_hex(payload) != dw[1]) throw FormatError("sample archive digest mismatch");
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(n);
    for (std::size_t k = 0; k < n; ++k) v[k] = detail::read_f32le(payload.data() + 4 * (i * n + k));
    out.emplace_back(shape, std::move(v));
  }
  return out;
}

/// Binary 8-bit PGM of the first channel, [-1, 1] mapped to [0, 255].
inline std::string pgm_preview(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("preview expects [C, H, W]");
  const std::size_t h = x.dim(1), w = x.dim(2);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp((x[i] + 1.0) * 127.5, 0.0, 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
  }
  return out;
}

// -------------------------------------------------------------- metric tables

struct MetricTables {
  std::string csv;
  std::string json_text;
  std::string summary;
  std::string curves_csv;
};

inline MetricTables ablation_tables(const AblationResult& r) {
  MetricTables t;
  t.csv = "seed,config,toy_fd,mean_divergence,calibration_objective,status\n";
  t.curves_csv = "seed,config,t,mse\n";
  json rows = json::array();
  for (const auto& m : r.rows) {
    t.csv += std::to_string(m.seed) + "," + m.label + "," + fmt_double(m.toy_fd) + "," + fmt_double(m.mean_divergence) +
             "," + fmt_double(m.calibration_objective) + "," + (m.failed ? "failed" : "ok") + "\n";
    for (std::size_t k = 0; k < m.mse_curve.size(); ++k)
      t.curves_csv += std::to_string(m.seed) + "," + m.label + "," + std::to_string(k) + "," + fmt_double(m.mse_curve[k]) + "\n";
    json row = {{"seed", m.seed},
                {"config", m.label},
                {"toy_fd", m.toy_fd},
                {"mean_divergence", m.mean_divergence},
                {"calibration_objective", m.calibration_objective},
                {"mse_curve", m.mse_curve},
                {"inputs_digest", m.inputs_digest},
                {"status", m.failed ? "failed" : "ok"}};
    if (m.failed) row["error"] = m.error;
    rows.push_back(row);
  }
  json means = json::array();
  t.csv += "\nmean,config,toy_fd,mean_divergence,calibration_objective,runs\n";
  t.summary = "config          toy_fd        divergence    objective     runs\n";
  for (const auto& m : r.means) {
    t.csv += "mean," + m.label + "," + fmt_double(m.toy_fd) + "," + fmt_double(m.mean_divergence) + "," +
             fmt_double(m.calibration_objective) + "," + std::to_string(m.runs) + "\n";
    means.push_back({{"config", m.label},
                     {"toy_fd", m.toy_fd},
                     {"mean_divergence", m.mean_divergence},
                     {"calibration_objective", m.calibration_objective},
                     {"runs", m.runs}});
    char line[160];
    std::snprintf(line, sizeof line, "%-15s %-13.6g %-13.6g %-13.6g %zu\n", m.label.c_str(), m.toy_fd, m.mean_divergence,
                  m.calibration_objective, m.runs);
    t.summary += line;
  }
  t.summary += std::string("ordering ") + (r.ordering_holds ? "holds" : "violated") +
               ": calibration objective along the ladder\n";
  t.summary += "toy_fd improvement of last config over first: " + fmt_double(100.0 * r.fd_improvement, 6) + "%\n";
  json j = {{"rows", rows}, {"means", means}, {"ordering_holds", r.ordering_holds}, {"fd_improvement", r.fd_improvement}};
  t.json_text = j.dump(1) + "\n";
  return t;
}

}  // namespace tqdit
