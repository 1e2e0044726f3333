#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prefrank::nk {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not conform for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a kernel produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
  static Tensor row(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view: rank-1 tensors are treated as a single row.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() == 1) return 1;
    bad_matrix_view();
  }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    bad_matrix_view();
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;
  bool all_finite() const;
  void fill(double v);

  bool requires_grad = false;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  [[noreturn]] void bad_matrix_view() const;
  Shape shape_;
  std::vector<double> data_;
};

/// Flat, name-ordered collection of parameter tensors.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t, bool requires_grad = true);
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  std::map<std::string, Tensor>& tensors() { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  std::size_t numel() const;

  /// Same names and shapes, every value zero.
  ParamSet zeros_like() const;
  void merge(const ParamSet& other, const std::string& prefix = "");

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.tensors_ == b.tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
};

// Raw row-major kernels shared by the autodiff graph and the inference paths.
// out[m,n] (+)= a[m,k] * b[k,n]  (or b^T when b is [n,k]).
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
          std::size_t k, std::size_t n, bool trans_a, bool trans_b, bool accumulate);

}  // namespace prefrank::nk
