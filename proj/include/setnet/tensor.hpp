#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "setnet/errors.hpp"

namespace setnet {

// Dense row-major tensor of 64-bit floats, rank 0..3. Copies are deep and
// explicit; moves are cheap. Allocation is uninitialized on purpose (large
// activations are always fully written by the producing op).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    if (shape_.size() > 3) throw dim_error("tensor rank > 3");
    size_ = 1;
    for (int64_t d : shape_) {
      if (d < 0) throw dim_error("negative dimension");
      size_ *= d;
    }
    data_ = std::make_unique<double[]>(static_cast<size_t>(size_));
  }

  static Tensor zeros(std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    std::memset(t.data(), 0, static_cast<size_t>(t.size_) * sizeof(double));
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size_; ++i) t.data_[i] = v;
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t(std::vector<int64_t>{});
    t.data_[0] = v;
    return t;
  }

  static Tensor from(std::vector<int64_t> shape,
                     std::initializer_list<double> values) {
    Tensor t(std::move(shape));
    if (static_cast<int64_t>(values.size()) != t.size_)
      throw dim_error("initializer length does not match shape");
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  Tensor(const Tensor& other) : shape_(other.shape_), size_(other.size_) {
    if (other.data_) {
      data_ = std::make_unique<double[]>(static_cast<size_t>(size_));
      std::memcpy(data_.get(), other.data_.get(),
                  static_cast<size_t>(size_) * sizeof(double));
    }
  }
  Tensor& operator=(const Tensor& other) {
    if (this != &other) *this = Tensor(other);
    return *this;
  }
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(Tensor&&) noexcept = default;

  bool defined() const { return data_ != nullptr; }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return size_; }

  double* data() { return data_.get(); }
  const double* data() const { return data_.get(); }

  double& operator[](int64_t i) { return data_[i]; }
  double operator[](int64_t i) const { return data_[i]; }

  double& at(int64_t i, int64_t j) { return data_[i * shape_[1] + j]; }
  double at(int64_t i, int64_t j) const { return data_[i * shape_[1] + j]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Number of trailing-dim rows; a rank-2 m x k tensor has m rows of k, a
  // rank-3 n x m x k tensor has n*m rows of k.
  int64_t rows() const { return rank() == 0 ? 1 : size_ / shape_.back(); }
  int64_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int64_t> shape_;
  int64_t size_ = 0;
  std::unique_ptr<double[]> data_;
  bool requires_grad_ = false;
};

// Validity mask for a batch of zero-padded sets (true = real element).
class Mask {
 public:
  Mask() = default;
  Mask(int64_t sets, int64_t elems, std::vector<uint8_t> valid)
      : sets_(sets), elems_(elems), valid_(std::move(valid)) {
    if (static_cast<int64_t>(valid_.size()) != sets_ * elems_)
      throw dim_error("mask size mismatch");
    counts_.resize(static_cast<size_t>(sets_), 0);
    for (int64_t n = 0; n < sets_; ++n) {
      for (int64_t i = 0; i < elems_; ++i)
        if (valid_[static_cast<size_t>(n * elems_ + i)]) ++counts_[static_cast<size_t>(n)];
      if (counts_[static_cast<size_t>(n)] == 0)
        throw degenerate_input_error("set " + std::to_string(n) +
                                     " has no valid elements");
    }
  }

  static Mask all_valid(int64_t sets, int64_t elems) {
    return Mask(sets, elems, std::vector<uint8_t>(
                                 static_cast<size_t>(sets * elems), 1));
  }

  int64_t sets() const { return sets_; }
  int64_t elems() const { return elems_; }
  bool valid(int64_t n, int64_t i) const {
    return valid_[static_cast<size_t>(n * elems_ + i)] != 0;
  }
  int64_t count(int64_t n) const { return counts_[static_cast<size_t>(n)]; }
  const uint8_t* row(int64_t n) const {
    return valid_.data() + n * elems_;
  }

 private:
  int64_t sets_ = 0;
  int64_t elems_ = 0;
  std::vector<uint8_t> valid_;
  std::vector<int64_t> counts_;
};

// Compensated (Neumaier) accumulator. Statistics over a set must not move
// when its elements are reordered beyond ~1e-15, so plain left-to-right
// summation is not enough.
class KahanSum {
 public:
  void add(double v) {
    double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v))
      comp_ += (sum_ - t) + v;
    else
      comp_ += (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace setnet
