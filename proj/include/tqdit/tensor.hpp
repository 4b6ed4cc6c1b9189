// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tqdit/errors.hpp"

namespace tqdit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
///
/// Every dimension is positive and the element count equals the product of
/// the shape. Values handed to the model (inputs, parameters) are checked for
/// finiteness with `require_finite`.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }

  /// Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool all_finite() const noexcept {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  const Tensor& require_finite(const std::string& what) const {
    if (!all_finite()) throw ContractError(what + " contains non-finite values");
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Plain (untaped) kernels shared by the autodiff graph and by calibration,
/// so that a value recomputed from recorded inputs matches the graph value
/// bit for bit.
namespace kernels {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct MatmulDims {
  std::size_t batch, m, k, n;
};

inline MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() == 2 && b.size() == 2 && a[1] == b[0]) return {1, a[0], a[1], b[1]};
  if (a.size() == 3 && b.size() == 3 && a[0] == b[0] && a[2] == b[1]) return {a[0], a[1], a[2], b[2]};
  throw DimensionError("matmul shape mismatch " + shape_str(a) + " x " + shape_str(b));
}

/// (Batched) matrix product. Each output entry sums over k in ascending order.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto d = matmul_dims(a.shape(), b.shape());
  Shape out_shape = a.rank() == 2 ? Shape{d.m, d.n} : Shape{d.batch, d.m, d.n};
  Tensor out(out_shape);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const double* ab = pa + bi * d.m * d.k;
    const double* bb = pb + bi * d.k * d.n;
    double* ob = po + bi * d.m * d.n;
    for (std::size_t i = 0; i < d.m; ++i) {
      double* row = ob + i * d.n;
      for (std::size_t kk = 0; kk < d.k; ++kk) {
        const double av = ab[i * d.k + kk];
        const double* brow = bb + kk * d.n;
        for (std::size_t j = 0; j < d.n; ++j) row[j] += av * brow[j];
      }
    }
  }
  return out;
}

/// W^T laid out [in, out] for linear_t.
inline std::vector<double> transpose_weight(const Tensor& w) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  std::vector<double> wt(in * out);
  const double* pw = w.data().data();
  for (std::size_t j = 0; j < out; ++j)
    for (std::size_t k = 0; k < in; ++k) wt[k * out + j] = pw[j * in + k];
  return wt;
}

/// x W^T + b given wt = transpose_weight(W). Each output sums its products in
/// ascending k, then adds the bias.
inline Tensor linear_t(const Tensor& x, std::span<const double> wt, const Tensor& b) {
  const std::size_t m = x.dim(0), in = x.dim(1), out = b.size();
  if (wt.size() != in * out) throw DimensionError("linear_t: transposed weight does not match input and bias");
  Tensor y({m, out});
  const double* px = x.data().data();
  double* py = y.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = py + i * out;
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = px[i * in + k];
      const double* wr = wt.data() + k * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xv * wr[j];
    }
    for (std::size_t j = 0; j < out; ++j) yr[j] += pb[j];
  }
  return y;
}

/// x W^T + b with x [m, in], W [out, in], b [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.size() != w.dim(0)) {
    throw DimensionError("linear shape mismatch x" + shape_str(x.shape()) + " W" +
                         shape_str(w.shape()) + " b" + shape_str(b.shape()));
  }
  return linear_t(x, transpose_weight(w), b);
}

/// Softmax over the last axis with max subtraction.
inline Tensor softmax(const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * n;
    double* yr = y.data().data() + r * n;
    double mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
  }
  return y;
}

}  // namespace kernels
}  // namespace tqdit
