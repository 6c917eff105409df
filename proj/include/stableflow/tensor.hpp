#ifndef STABLEFLOW_TENSOR_HPP
#define STABLEFLOW_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace stableflow {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Dense 2-D array of doubles in row-major order. Value type, freely copyable.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows_ * cols_ != data_.size())
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }
  static Tensor scalar(double v) { return Tensor(1, 1, {v}); }
  static Tensor row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor column(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor(n, 1, std::move(v));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Tensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Value of a 1x1 tensor.
  double value() const {
    if (size() != 1) throw ContractError("Tensor::value: not a scalar, shape " + shape_str());
    return data_[0];
  }

  bool operator==(const Tensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// FNV-1a over the raw bytes. Used by freeze-contract and reproducibility checks.
inline std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
  std::size_t n = t.size() * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  h ^= t.rows();
  h *= 1099511628211ull;
  return h;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

/// Frobenius norm with compensated accumulation.
inline double frob_norm(const Tensor& a) {
  double s = 0.0, c = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    double y = a[k] * a[k] - c;
    double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return std::sqrt(s);
}

}  // namespace stableflow

#endif
