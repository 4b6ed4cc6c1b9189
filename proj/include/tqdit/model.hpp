// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tqdit/autodiff.hpp"
#include "tqdit/rng.hpp"

namespace tqdit {

struct DiTConfig {
  int image_size = 16;
  int channels = 1;
  int patch_size = 4;
  int embed_dim = 32;
  int num_blocks = 2;
  int num_heads = 2;
  int num_classes = 8;
  int mlp_ratio = 4;
  int timesteps = 100;

  void validate() const {
    if (image_size <= 0 || channels <= 0 || patch_size <= 0 || embed_dim <= 0 || num_blocks <= 0 ||
        num_heads <= 0 || num_classes <= 0 || mlp_ratio <= 0 || timesteps <= 0) {
      throw ConfigError("model config values must be positive");
    }
    if (image_size % patch_size != 0) throw ConfigError("image_size must be divisible by patch_size");
    if (embed_dim % num_heads != 0) throw ConfigError("embed_dim must be divisible by num_heads");
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be a multiple of 4 (2-D positional features)");
  }

  std::size_t grid() const { return static_cast<std::size_t>(image_size / patch_size); }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return static_cast<std::size_t>(channels * patch_size * patch_size); }
  std::size_t dim() const { return static_cast<std::size_t>(embed_dim); }
  std::size_t head_dim() const { return dim() / static_cast<std::size_t>(num_heads); }
  std::size_t hidden_dim() const { return dim() * static_cast<std::size_t>(mlp_ratio); }
  Shape image_shape() const {
    return {static_cast<std::size_t>(channels), static_cast<std::size_t>(image_size),
            static_cast<std::size_t>(image_size)};
  }

  friend bool operator==(const DiTConfig&, const DiTConfig&) = default;
};

enum class SiteKind { linear, post_gelu_linear, matmul, post_softmax_matmul };

inline const char* to_string(SiteKind k) {
  switch (k) {
    case SiteKind::linear: return "weight-linear";
    case SiteKind::post_gelu_linear: return "post-gelu-linear";
    case SiteKind::matmul: return "generic-matmul";
    case SiteKind::post_softmax_matmul: return "post-softmax-matmul";
  }
  return "?";
}

inline bool has_weight(SiteKind k) { return k == SiteKind::linear || k == SiteKind::post_gelu_linear; }

/// One quantization site. Linear sites own a weight/bias parameter pair and
/// quantize their input activation; matmul sites quantize both operands.
struct Site {
  std::string id;
  SiteKind kind = SiteKind::linear;
  int block = -1;  // -1 outside the transformer blocks
  std::size_t index = 0;  // position in the registry
  std::size_t weight = 0;
  std::size_t bias = 0;
  bool is_head = false;  // the final noise-prediction projection
};

struct Parameter {
  std::string name;
  Tensor value;
};

enum class Init {
  adaln_zero,  // modulation and output projections start at zero (identity blocks)
  random,      // every parameter random; used for gradient checks
};

class DiTModel {
 public:
  struct LinearLayer {
    std::size_t weight, bias, site;
  };
  struct Block {
    LinearLayer ada, qkv, proj, fc1, fc2;
    std::size_t qk_site, av_site;
  };

  DiTModel() = default;

  /// Fresh model with deterministic initialization from `seed`.
  static DiTModel init(const DiTConfig& config, std::uint64_t seed, Init mode = Init::adaln_zero) {
    config.validate();
    DiTModel m;
    m.config_ = config;
    m.build_layout();
    Rng rng = make_rng(seed, 0x1417);
    const bool random = mode == Init::random;
    for (Parameter& p : m.params_) {
      const bool is_bias = p.name.ends_with(".bias");
      const bool zero_group = p.name.starts_with("final.") || p.name.find(".adaLN.") != std::string::npos;
      if (zero_group) {
        if (random) p.value = randn(p.value.shape(), rng, 0.1);
      } else if (is_bias) {
        if (random) p.value = randn(p.value.shape(), rng, 0.1);
      } else if (p.name == "class_table" || p.name.starts_with("t_embed.")) {
        p.value = randn(p.value.shape(), rng, 0.02);
      } else {
        const double bound = std::sqrt(6.0 / static_cast<double>(p.value.dim(0) + p.value.dim(1)));
        for (double& v : p.value.data()) v = uniform(rng, -bound, bound);
      }
    }
    m.round_to_storage_precision();
    return m;
  }

  /// Model with the given parameter values (shapes must match the config).
  static DiTModel from_parameters(const DiTConfig& config, std::vector<Parameter> params) {
    config.validate();
    DiTModel m;
    m.config_ = config;
    m.build_layout();
    if (params.size() != m.params_.size()) throw FormatError("parameter count does not match model config");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name != m.params_[i].name || params[i].value.shape() != m.params_[i].value.shape()) {
        throw FormatError("parameter '" + params[i].name + "' does not match expected '" + m.params_[i].name +
                          "' " + shape_str(m.params_[i].value.shape()));
      }
      params[i].value.require_finite("parameter " + params[i].name);
    }
    m.params_ = std::move(params);
    return m;
  }

  const DiTConfig& config() const noexcept { return config_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::vector<Parameter>& mutable_parameters() noexcept { return params_; }
  const Tensor& param(std::size_t i) const { return params_.at(i).value; }

  /// Ordered quantization sites, in forward execution order.
  const std::vector<Site>& sites() const noexcept { return sites_; }
  const Site& site(std::size_t i) const { return sites_.at(i); }

  const LinearLayer& t_fc1() const { return t_fc1_; }
  const LinearLayer& t_fc2() const { return t_fc2_; }
  const LinearLayer& patch_embed() const { return patch_; }
  const LinearLayer& final_ada() const { return final_ada_; }
  const LinearLayer& final_out() const { return final_out_; }
  std::size_t class_table() const { return class_table_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Rounds every parameter to the nearest float (the storage precision).
  void round_to_storage_precision() {
    for (Parameter& p : params_)
      for (double& v : p.value.data()) v = static_cast<double>(static_cast<float>(v));
  }

 private:
  std::size_t add_param(std::string name, Shape shape) {
    params_.push_back(Parameter{std::move(name), Tensor(std::move(shape))});
    return params_.size() - 1;
  }

  LinearLayer add_linear(const std::string& name, std::size_t in, std::size_t out, SiteKind kind, int block,
                         bool is_head = false) {
    LinearLayer l{};
    l.weight = add_param(name + ".weight", {out, in});
    l.bias = add_param(name + ".bias", {out});
    l.site = sites_.size();
    sites_.push_back(Site{name, kind, block, sites_.size(), l.weight, l.bias, is_head});
    return l;
  }

  std::size_t add_matmul(const std::string& name, SiteKind kind, int block) {
    sites_.push_back(Site{name, kind, block, sites_.size(), 0, 0, false});
    return sites_.size() - 1;
  }

  void build_layout() {
    params_.clear();
    sites_.clear();
    blocks_.clear();
    const std::size_t d = config_.dim();
    t_fc1_ = add_linear("t_embed.fc1", d, d, SiteKind::linear, -1);
    t_fc2_ = add_linear("t_embed.fc2", d, d, SiteKind::linear, -1);
    class_table_ = add_param("class_table", {static_cast<std::size_t>(config_.num_classes), d});
    patch_ = add_linear("patch_embed", config_.patch_dim(), d, SiteKind::linear, -1);
    for (int b = 0; b < config_.num_blocks; ++b) {
      const std::string p = "blocks." + std::to_string(b);
      Block blk{};
      blk.ada = add_linear(p + ".adaLN.mod", d, 6 * d, SiteKind::linear, b);
      blk.qkv = add_linear(p + ".attn.qkv", d, 3 * d, SiteKind::linear, b);
      blk.qk_site = add_matmul(p + ".attn.qk", SiteKind::matmul, b);
      blk.av_site = add_matmul(p + ".attn.av", SiteKind::post_softmax_matmul, b);
      blk.proj = add_linear(p + ".attn.proj", d, d, SiteKind::linear, b);
      blk.fc1 = add_linear(p + ".mlp.fc1", d, config_.hidden_dim(), SiteKind::linear, b);
      blk.fc2 = add_linear(p + ".mlp.fc2", config_.hidden_dim(), d, SiteKind::post_gelu_linear, b);
      blocks_.push_back(blk);
    }
    final_ada_ = add_linear("final.adaLN.mod", d, 2 * d, SiteKind::linear, -1);
    final_out_ = add_linear("final.linear", d, config_.patch_dim(), SiteKind::linear, -1, true);
  }

  DiTConfig config_;
  std::vector<Parameter> params_;
  std::vector<Site> sites_;
  LinearLayer t_fc1_{}, t_fc2_{}, patch_{}, final_ada_{}, final_out_{};
  std::size_t class_table_ = 0;
  std::vector<Block> blocks_;
};

/// Puts every parameter on the graph, as trainable leaves or as constants.
inline std::vector<Var> bind_parameters(Graph& g, const DiTModel& m, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(m.parameters().size());
  for (const Parameter& p : m.parameters()) vars.push_back(trainable ? g.parameter(p.value) : g.constant(p.value));
  return vars;
}

/// Hook that runs every site at full precision.
struct FullPrecisionHook {
  Var linear(const Site&, Var x, Var w, Var b, int) { return ops::linear(x, w, b); }
  Var matmul(const Site&, Var a, Var b, int) { return ops::matmul(a, b); }
  void observe(const std::string&, Var) {}
};

/// Sinusoidal timestep features [1, dim]: cosines then sines.
inline Tensor timestep_features(int t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor f({1, dim});
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    f[i] = std::cos(t * freq);
    f[half + i] = std::sin(t * freq);
  }
  return f;
}

/// Fixed 2-D sine-cosine position features [grid*grid, dim].
inline Tensor position_features(std::size_t grid, std::size_t dim) {
  Tensor pe({grid * grid, dim});
  const std::size_t quarter = dim / 4;
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c) {
      const std::size_t tok = r * grid + c;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        pe[tok * dim + i] = std::sin(r * freq);
        pe[tok * dim + quarter + i] = std::cos(r * freq);
        pe[tok * dim + 2 * quarter + i] = std::sin(c * freq);
        pe[tok * dim + 3 * quarter + i] = std::cos(c * freq);
      }
    }
  return pe;
}

namespace detail {

/// Gather map between an image [C, H, W] and its patch tokens [P, C*p*p].
/// Entry i is the image index of token element i.
inline std::shared_ptr<std::vector<std::size_t>> patch_index(const DiTConfig& c) {
  const std::size_t p = static_cast<std::size_t>(c.patch_size), g = c.grid();
  const std::size_t hw = static_cast<std::size_t>(c.image_size);
  auto idx = std::make_shared<std::vector<std::size_t>>(c.tokens() * c.patch_dim());
  for (std::size_t gi = 0; gi < g; ++gi)
    for (std::size_t gj = 0; gj < g; ++gj)
      for (std::size_t ch = 0; ch < static_cast<std::size_t>(c.channels); ++ch)
        for (std::size_t pi = 0; pi < p; ++pi)
          for (std::size_t pj = 0; pj < p; ++pj) {
            const std::size_t tok = gi * g + gj;
            const std::size_t e = ch * p * p + pi * p + pj;
            (*idx)[tok * c.patch_dim() + e] = (ch * hw + gi * p + pi) * hw + gj * p + pj;
          }
  return idx;
}

inline std::shared_ptr<std::vector<std::size_t>> invert(const std::vector<std::size_t>& idx) {
  auto inv = std::make_shared<std::vector<std::size_t>>(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) (*inv)[idx[i]] = i;
  return inv;
}

inline Var modulate(Var x, Var shift, Var scale) {
  return ops::add_row(ops::mul_row(x, ops::add_scalar(scale, 1.0)), shift);
}

}  // namespace detail

inline void check_forward_inputs(const DiTConfig& c, const Tensor& x_t, int t, int y) {
  if (t < 0 || t >= c.timesteps) throw DomainError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(c.timesteps) + ")");
  if (y < 0 || y >= c.num_classes) throw DomainError("class " + std::to_string(y) + " outside [0, " + std::to_string(c.num_classes) + ")");
  if (x_t.shape() != c.image_shape()) throw DimensionError("input shape " + shape_str(x_t.shape()) + " expected " + shape_str(c.image_shape()));
  x_t.require_finite("model input");
}

/// Noise prediction eps_theta(x_t, t, y) with the image shape of x_t.
///
/// `params` comes from bind_parameters. Every linear layer and attention
/// matmul is routed through `hook`, which may record or quantize it.
template <class Hook>
Var dit_forward(Graph& g, const DiTModel& m, std::span<const Var> params, const Tensor& x_t, int t, int y,
                Hook& hook) {
  const DiTConfig& c = m.config();
  check_forward_inputs(c, x_t, t, y);
  const std::size_t d = c.dim();
  auto lin = [&](const DiTModel::LinearLayer& l, Var x) {
    return hook.linear(m.site(l.site), x, params[l.weight], params[l.bias], t);
  };

  auto pidx = detail::patch_index(c);
  Var x_img = g.constant(x_t.reshaped({x_t.size()}));
  Var tokens = ops::gather(x_img, pidx, {c.tokens(), c.patch_dim()});
  Var h = ops::add(lin(m.patch_embed(), tokens), g.constant(position_features(c.grid(), d)));

  Var temb = lin(m.t_fc2(), ops::silu(lin(m.t_fc1(), g.constant(timestep_features(t, d)))));
  Var cond = ops::silu(ops::add(temb, ops::row(params[m.class_table()], static_cast<std::size_t>(y))));
  hook.observe("cond", cond);

  const double logit_scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim()));
  for (std::size_t bi = 0; bi < m.blocks().size(); ++bi) {
    const auto& blk = m.blocks()[bi];
    const std::string name = "blocks." + std::to_string(bi);
    hook.observe(name + ".in", h);
    Var mod = lin(blk.ada, cond);
    Var shift_msa = ops::slice_cols(mod, 0, d), scale_msa = ops::slice_cols(mod, d, 2 * d);
    Var gate_msa = ops::slice_cols(mod, 2 * d, 3 * d), shift_mlp = ops::slice_cols(mod, 3 * d, 4 * d);
    Var scale_mlp = ops::slice_cols(mod, 4 * d, 5 * d), gate_mlp = ops::slice_cols(mod, 5 * d, 6 * d);
    hook.observe(name + ".gate_msa", gate_msa);

    Var a_in = detail::modulate(ops::layer_norm(h), shift_msa, scale_msa);
    Var qkv = lin(blk.qkv, a_in);
    Var q = ops::split_heads(ops::slice_cols(qkv, 0, d), static_cast<std::size_t>(c.num_heads));
    Var k = ops::split_heads(ops::slice_cols(qkv, d, 2 * d), static_cast<std::size_t>(c.num_heads));
    Var v = ops::split_heads(ops::slice_cols(qkv, 2 * d, 3 * d), static_cast<std::size_t>(c.num_heads));
    Var logits = ops::scale(hook.matmul(m.site(blk.qk_site), q, ops::transpose_last2(k), t), logit_scale);
    Var attn = ops::softmax(logits);
    hook.observe(name + ".attn", attn);
    Var o = ops::merge_heads(hook.matmul(m.site(blk.av_site), attn, v, t));
    h = ops::add(h, ops::mul_row(lin(blk.proj, o), gate_msa));

    Var f_in = detail::modulate(ops::layer_norm(h), shift_mlp, scale_mlp);
    Var f = ops::gelu(lin(blk.fc1, f_in));
    hook.observe(name + ".gelu", f);
    h = ops::add(h, ops::mul_row(lin(blk.fc2, f), gate_mlp));
    hook.observe(name + ".out", h);
  }

  Var fmod = lin(m.final_ada(), cond);
  Var out_in = detail::modulate(ops::layer_norm(h), ops::slice_cols(fmod, 0, d), ops::slice_cols(fmod, d, 2 * d));
  Var patches = lin(m.final_out(), out_in);
  return ops::gather(patches, detail::invert(*pidx), c.image_shape());
}

/// Full-precision inference without a tape.
inline Tensor predict_noise(const DiTModel& m, const Tensor& x_t, int t, int y) {
  Graph g(false);
  auto params = bind_parameters(g, m, false);
  FullPrecisionHook hook;
  return dit_forward(g, m, params, x_t, t, y, hook).value();
}

}  // namespace tqdit
