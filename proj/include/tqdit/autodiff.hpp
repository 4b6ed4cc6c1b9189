// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tqdit/tensor.hpp"

namespace tqdit {

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// valid topological order for backward. A graph constructed with
/// `record = false` keeps forward values only (inference mode).
///
/// Taps name nodes whose value and gradient the caller wants to read back.
/// Tapping marks the node as requiring a gradient; it never changes any
/// forward value. A node must be tapped before anything consumes it.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(std::move(value), false, {}, {}); }

  /// Leaf that receives a gradient when the graph records.
  Var parameter(Tensor value) { return push(std::move(value), record_, {}, {}); }

  /// Appends an op result. `fn` is kept only if some input needs a gradient.
  Var emit(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    }
    if (!needs) return push(std::move(value), false, {}, {});
    return push(std::move(value), true, std::move(inputs), std::move(fn));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient of the last backward() loss with respect to node `id`
  /// (zeros when the node did not influence the loss).
  Tensor grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }
  Tensor grad(Var v) const { return grad(v.id); }

  /// Gradient accumulator of an input, or nullptr if it needs none.
  Tensor* grad_slot(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  const Tensor& upstream(std::size_t self) const { return nodes_.at(self).grad; }
  std::size_t input(std::size_t self, std::size_t k) const { return nodes_.at(self).inputs.at(k); }

  void tap(const std::string& name, Var v) {
    if (v.graph != this || v.id >= nodes_.size()) throw ContractError("tap refers to a foreign or missing node: " + name);
    if (record_) nodes_[v.id].requires_grad = true;
    taps_.emplace_back(name, v.id);
  }

  std::optional<Var> find_tap(const std::string& name) {
    for (const auto& [n, id] : taps_) {
      if (n == name) return Var{this, id};
    }
    return std::nullopt;
  }

  const std::vector<std::pair<std::string, std::size_t>>& taps() const noexcept { return taps_; }

  /// Reverse sweep from a scalar loss.
  void backward(Var loss) {
    if (!record_) throw ContractError("backward on a graph built without recording");
    if (value(loss.id).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), 1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, std::vector<std::size_t> inputs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(inputs), std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> taps_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace ops {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_row(const Tensor& x, const Tensor& r, const char* op) {
  if (r.size() != x.shape().back()) {
    throw DimensionError(std::string(op) + " row of size " + std::to_string(r.size()) +
                         " cannot broadcast over " + shape_str(x.shape()));
  }
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.graph->emit(std::move(y), {a.id, b.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* gx = g.grad_slot(g.input(self, k))) {
        for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
      }
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.graph->emit(std::move(y), {a.id, b.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const std::size_t ia = g.input(self, 0), ib = g.input(self, 1);
    if (Tensor* ga = g.grad_slot(ia)) {
      const Tensor& bv = g.value(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * bv[i];
    }
    if (Tensor* gb = g.grad_slot(ib)) {
      const Tensor& av = g.value(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] += gy[i] * av[i];
    }
  });
}

/// x + r with r broadcast along the last axis.
inline Var add_row(Var x, Var r) {
  detail::require_row(x.value(), r.value(), "add_row");
  Tensor y = x.value();
  const std::size_t n = r.value().size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += r.value()[i % n];
  return x.graph->emit(std::move(y), {x.id, r.id}, [n](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
    }
    if (Tensor* gr = g.grad_slot(g.input(self, 1))) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*gr)[i % n] += gy[i];
    }
  });
}

/// x * r with r broadcast along the last axis.
inline Var mul_row(Var x, Var r) {
  detail::require_row(x.value(), r.value(), "mul_row");
  Tensor y = x.value();
  const std::size_t n = r.value().size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= r.value()[i % n];
  return x.graph->emit(std::move(y), {x.id, r.id}, [n](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const std::size_t ix = g.input(self, 0), ir = g.input(self, 1);
    if (Tensor* gx = g.grad_slot(ix)) {
      const Tensor& rv = g.value(ir);
      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * rv[i % n];
    }
    if (Tensor* gr = g.grad_slot(ir)) {
      const Tensor& xv = g.value(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) (*gr)[i % n] += gy[i] * xv[i];
    }
  });
}

inline Var scale(Var x, double c) {
  Tensor y = detail::map(x.value(), [c](double v) { return v * c; });
  return x.graph->emit(std::move(y), {x.id}, [c](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * c;
    }
  });
}

inline Var add_scalar(Var x, double c) {
  Tensor y = detail::map(x.value(), [c](double v) { return v + c; });
  return x.graph->emit(std::move(y), {x.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
    }
  });
}

/// Matrix product, 2-D or batched 3-D.
inline Var matmul(Var a, Var b) {
  Tensor y = kernels::matmul(a.value(), b.value());
  return a.graph->emit(std::move(y), {a.id, b.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const std::size_t ia = g.input(self, 0), ib = g.input(self, 1);
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    const auto d = kernels::matmul_dims(av.shape(), bv.shape());
    if (Tensor* ga = g.grad_slot(ia)) {
      for (std::size_t bi = 0; bi < d.batch; ++bi)
        for (std::size_t i = 0; i < d.m; ++i)
          for (std::size_t k = 0; k < d.k; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d.n; ++j)
              acc += gy[(bi * d.m + i) * d.n + j] * bv[(bi * d.k + k) * d.n + j];
            (*ga)[(bi * d.m + i) * d.k + k] += acc;
          }
    }
    if (Tensor* gb = g.grad_slot(ib)) {
      for (std::size_t bi = 0; bi < d.batch; ++bi)
        for (std::size_t i = 0; i < d.m; ++i)
          for (std::size_t k = 0; k < d.k; ++k) {
            const double a_ik = av[(bi * d.m + i) * d.k + k];
            double* grow = gb->data().data() + (bi * d.k + k) * d.n;
            const double* gyrow = gy.data().data() + (bi * d.m + i) * d.n;
            for (std::size_t j = 0; j < d.n; ++j) grow[j] += a_ik * gyrow[j];
          }
    }
  });
}

/// x W^T + b with W stored [out, in].
inline Var linear(Var x, Var w, Var b) {
  Tensor y = kernels::linear(x.value(), w.value(), b.value());
  return x.graph->emit(std::move(y), {x.id, w.id, b.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const std::size_t ix = g.input(self, 0), iw = g.input(self, 1), ib = g.input(self, 2);
    const Tensor& xv = g.value(ix);
    const Tensor& wv = g.value(iw);
    const std::size_t m = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
    if (Tensor* gx = g.grad_slot(ix)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < out; ++j) {
          const double gij = gy[i * out + j];
          for (std::size_t k = 0; k < in; ++k) (*gx)[i * in + k] += gij * wv[j * in + k];
        }
    }
    if (Tensor* gw = g.grad_slot(iw)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < out; ++j) {
          const double gij = gy[i * out + j];
          for (std::size_t k = 0; k < in; ++k) (*gw)[j * in + k] += gij * xv[i * in + k];
        }
    }
    if (Tensor* gb = g.grad_slot(ib)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < out; ++j) (*gb)[j] += gy[i * out + j];
    }
  });
}

/// Softmax over the last axis.
inline Var softmax(Var x) {
  Tensor y = kernels::softmax(x.value());
  return x.graph->emit(std::move(y), {x.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const Tensor& yv = g.value(self);
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      const std::size_t n = yv.shape().back();
      for (std::size_t r = 0; r < yv.size() / n; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[r * n + j] * yv[r * n + j];
        for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += yv[r * n + j] * (gy[r * n + j] - dot);
      }
    }
  });
}

/// Exact GELU, x * Phi(x).
inline Var gelu(Var x) {
  Tensor y = detail::map(x.value(), kernels::gelu);
  return x.graph->emit(std::move(y), {x.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const std::size_t ix = g.input(self, 0);
    if (Tensor* gx = g.grad_slot(ix)) {
      const Tensor& xv = g.value(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * kernels::gelu_grad(xv[i]);
    }
  });
}

inline Var silu(Var x) {
  Tensor y = detail::map(x.value(), [](double v) { return v * kernels::sigmoid(v); });
  return x.graph->emit(std::move(y), {x.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const std::size_t ix = g.input(self, 0);
    if (Tensor* gx = g.grad_slot(ix)) {
      const Tensor& xv = g.value(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double s = kernels::sigmoid(xv[i]);
        (*gx)[i] += gy[i] * s * (1.0 + xv[i] * (1.0 - s));
      }
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the last axis to zero mean and unit variance (no affine).
/// `eps` is added to the variance, so constant rows map to zeros.
inline Var layer_norm(Var x, double eps = kLayerNormEps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor y(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv[r * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv[r * n + j] - mean) * (xv[r * n + j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = (xv[r * n + j] - mean) * is;
  }
  return x.graph->emit(std::move(y), {x.id}, [inv_std, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    const Tensor& yv = g.value(self);
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      for (std::size_t r = 0; r < yv.size() / n; ++r) {
        double mg = 0.0, mgy = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          mg += gy[r * n + j];
          mgy += gy[r * n + j] * yv[r * n + j];
        }
        mg /= static_cast<double>(n);
        mgy /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
          (*gx)[r * n + j] += (*inv_std)[r] * (gy[r * n + j] - mg - yv[r * n + j] * mgy);
      }
    }
  });
}

/// Layer norm followed by a per-feature affine map.
inline Var layer_norm(Var x, Var scale_row, Var shift_row, double eps = kLayerNormEps) {
  return add_row(mul_row(layer_norm(x, eps), scale_row), shift_row);
}

using Index = std::shared_ptr<const std::vector<std::size_t>>;

/// out[i] = x[index[i]]; the workhorse for every reshuffle (slices,
/// transposes, head splits, table lookups).
inline Var gather(Var x, Index index, Shape out_shape) {
  const Tensor& xv = x.value();
  Tensor y(std::move(out_shape));
  if (index->size() != y.size()) throw DimensionError("gather index length does not match output shape");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[(*index)[i]];
  return x.graph->emit(std::move(y), {x.id}, [index](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[(*index)[i]] += gy[i];
    }
  });
}

/// Columns [begin, end) of a 2-D tensor.
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (s.size() != 2 || begin >= end || end > s[1]) throw DimensionError("slice_cols out of range for " + shape_str(s));
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(s[0] * (end - begin));
  for (std::size_t r = 0; r < s[0]; ++r)
    for (std::size_t c = begin; c < end; ++c) idx->push_back(r * s[1] + c);
  return gather(x, idx, {s[0], end - begin});
}

/// Row r of a 2-D tensor as a [1, n] tensor.
inline Var row(Var x, std::size_t r) {
  const Shape& s = x.shape();
  if (s.size() != 2 || r >= s[0]) throw DomainError("row index out of range for " + shape_str(s));
  auto idx = std::make_shared<std::vector<std::size_t>>(s[1]);
  for (std::size_t c = 0; c < s[1]; ++c) (*idx)[c] = r * s[1] + c;
  return gather(x, idx, {1, s[1]});
}

/// Swaps the last two axes of a 2-D or 3-D tensor.
inline Var transpose_last2(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw DimensionError("transpose expects rank 2 or 3");
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t m = s[s.size() - 2], n = s.back();
  auto idx = std::make_shared<std::vector<std::size_t>>(batch * m * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < m; ++i) (*idx)[(b * n + j) * m + i] = (b * m + i) * n + j;
  Shape out = s.size() == 3 ? Shape{batch, n, m} : Shape{n, m};
  return gather(x, idx, out);
}

/// [tokens, heads*head_dim] -> [heads, tokens, head_dim].
inline Var split_heads(Var x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 2 || heads == 0 || s[1] % heads != 0) {
    throw DimensionError("cannot split " + shape_str(s) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t p = s[0], d = s[1], hd = d / heads;
  auto idx = std::make_shared<std::vector<std::size_t>>(p * d);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < p; ++t)
      for (std::size_t j = 0; j < hd; ++j) (*idx)[(h * p + t) * hd + j] = t * d + h * hd + j;
  return gather(x, idx, {heads, p, hd});
}

/// [heads, tokens, head_dim] -> [tokens, heads*head_dim].
inline Var merge_heads(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("merge_heads expects rank 3");
  const std::size_t heads = s[0], p = s[1], hd = s[2], d = heads * hd;
  auto idx = std::make_shared<std::vector<std::size_t>>(p * d);
  for (std::size_t t = 0; t < p; ++t)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < hd; ++j) (*idx)[t * d + h * hd + j] = (h * p + t) * hd + j;
  return gather(x, idx, {p, d});
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.graph->emit(Tensor::scalar(s), {x.id}, [](Graph& g, std::size_t self) {
    const double gy = g.upstream(self)[0];
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += gy;
    }
  });
}

/// Scalar sum of squared differences.
inline Var squared_error(Var pred, Var target) {
  detail::require_same_shape(pred.value(), target.value(), "squared_error");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.value().size(); ++i) {
    const double d = pred.value()[i] - target.value()[i];
    s += d * d;
  }
  return pred.graph->emit(Tensor::scalar(s), {pred.id, target.id}, [](Graph& g, std::size_t self) {
    const double gy = g.upstream(self)[0];
    const std::size_t ip = g.input(self, 0), it = g.input(self, 1);
    const Tensor& pv = g.value(ip);
    const Tensor& tv = g.value(it);
    if (Tensor* gp = g.grad_slot(ip)) {
      for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] += 2.0 * gy * (pv[i] - tv[i]);
    }
    if (Tensor* gt = g.grad_slot(it)) {
      for (std::size_t i = 0; i < pv.size(); ++i) (*gt)[i] -= 2.0 * gy * (pv[i] - tv[i]);
    }
  });
}

/// Replaces x's value by `quantized`; the gradient passes straight through.
inline Var fake_quant(Var x, Tensor quantized) {
  detail::require_same_shape(x.value(), quantized, "fake_quant");
  return x.graph->emit(std::move(quantized), {x.id}, [](Graph& g, std::size_t self) {
    const Tensor& gy = g.upstream(self);
    if (Tensor* gx = g.grad_slot(g.input(self, 0))) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
    }
  });
}

}  // namespace ops
}  // namespace tqdit
