#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stalemp/parallel.hpp"

namespace stalemp {

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed input files and snapshots.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NodeId = std::uint32_t;
using LabelVector = std::vector<int>;

/// Dense row-major matrix of doubles. Vectors are stored as n x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("tensor: value count does not match shape");
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor column(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(n, 1, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("tensor: item() on non-scalar");
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "[" << t.rows() << "x" << t.cols() << "]";
  return os.str();
}

inline void require_shape(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

inline double row_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double frobenius_norm(const Tensor& t) { return row_norm(t.values()); }

/// Value-only numeric kernels. The taped ops and the full-batch oracle both call
/// these, so a taped forward and an untaped one agree bit for bit.
namespace kernels {

inline constexpr double kLeakySlope = 0.2;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double leaky_relu(double x, double slope = kLeakySlope) { return x > 0.0 ? x : slope * x; }

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Tensor out(a.rows(), b.cols());
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  parallel_for(a.rows(), [&](std::size_t i) {
    double* o = &out(i, 0);
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double av = a(i, k);
      const double* br = &b(k, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  });
  return out;
}

/// out[r] = src[idx[r]]
inline Tensor gather_rows(const Tensor& src, std::span<const std::uint32_t> idx) {
  Tensor out(idx.size(), src.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto s = src.row(idx[r]);
    std::copy(s.begin(), s.end(), out.row(r).begin());
  }
  return out;
}

/// Softmax within each segment [offsets[s], offsets[s+1]) of a column vector.
inline Tensor segmented_softmax(const Tensor& scores, std::span<const std::size_t> offsets) {
  Tensor out(scores.rows(), 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = b; k < e; ++k) mx = std::max(mx, scores[k]);
    double z = 0.0;
    for (std::size_t k = b; k < e; ++k) {
      out[k] = std::exp(scores[k] - mx);
      z += out[k];
    }
    for (std::size_t k = b; k < e; ++k) out[k] /= z;
  }
  return out;
}

/// log(sum(exp)) per segment; empty segments yield -inf.
inline Tensor segment_logsumexp(const Tensor& scores, std::span<const std::size_t> offsets) {
  const std::size_t nseg = offsets.empty() ? 0 : offsets.size() - 1;
  Tensor out(nseg, 1, -std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < nseg; ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = b; k < e; ++k) mx = std::max(mx, scores[k]);
    double z = 0.0;
    for (std::size_t k = b; k < e; ++k) z += std::exp(scores[k] - mx);
    out[s] = mx + std::log(z);
  }
  return out;
}

/// out[s] = sum_{k in segment s} weight[k] * src[idx[k]]
inline Tensor segment_weighted_sum(const Tensor& weight, std::span<const std::uint32_t> idx,
                                   const Tensor& src, std::span<const std::size_t> offsets) {
  const std::size_t nseg = offsets.empty() ? 0 : offsets.size() - 1;
  Tensor out(nseg, src.cols());
  const std::size_t f = src.cols();
  parallel_for(nseg, [&](std::size_t s) {
    double* o = &out(s, 0);
    for (std::size_t k = offsets[s]; k < offsets[s + 1]; ++k) {
      const double w = weight[k];
      const double* r = &src(idx[k], 0);
      for (std::size_t j = 0; j < f; ++j) o[j] += w * r[j];
    }
  });
  return out;
}

}  // namespace kernels
}  // namespace stalemp
