#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace pmdet {

// Dense row-major tensor of doubles. Deliberately minimal: contiguous
// storage, explicit shapes, no views. Everything numeric in the project runs
// in 64-bit arithmetic.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (std::size_t d : shape_) n *= d;
    data_.assign(n, 0.0);
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  const std::vector<std::size_t>& shape() const { return shape_; }

  // 2-d helpers (ndim()==1 is treated as a single row).
  std::size_t rows() const { return ndim() <= 1 ? 1 : shape_[0]; }
  std::size_t cols() const {
    if (shape_.empty()) return 0;
    if (ndim() == 1) return shape_[0];
    std::size_t n = 1;
    for (std::size_t i = 1; i < shape_.size(); ++i) n *= shape_[i];
    return n;
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at2(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at2(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  void fill(double v) {
    for (double& x : data_) x = v;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::fabs(x));
    return m;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + ")";
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace pmdet
