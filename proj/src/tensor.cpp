#include "prefrank/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace prefrank::nk {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
std::size_t numel_of(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor: empty shape");
  std::size_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel_of(shape_) != data_.size()) {
    throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

void Tensor::bad_matrix_view() const {
  throw ShapeError("tensor: matrix view requires rank <= 2, got " + shape_str(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("tensor: item() on non-scalar " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& ParamSet::add(const std::string& name, Tensor t, bool requires_grad) {
  t.requires_grad = requires_grad;
  auto [it, inserted] = tensors_.insert_or_assign(name, std::move(t));
  return it->second;
}

Tensor& ParamSet::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("param set: no tensor named '" + name + "'");
  return it->second;
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("param set: no tensor named '" + name + "'");
  return it->second;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) out.add(name, Tensor(t.shape(), 0.0), t.requires_grad);
  return out;
}

void ParamSet::merge(const ParamSet& other, const std::string& prefix) {
  for (const auto& [name, t] : other.tensors_) add(prefix + name, t, t.requires_grad);
}

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
          std::size_t k, std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  if (!accumulate) std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0);
  const double* A = a.data();
  const double* B = b.data();
  double* C = out.data();
  // A transposed B is copied to [k, n] so every case runs the row-update
  // kernel below, which vectorises over j; each C entry is still summed over
  // p in ascending order.
  thread_local std::vector<double> bt;
  if (trans_b) {
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
    B = bt.data();
  }
  if (!trans_a) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else {
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = B + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double api = A[p * m + i];
        if (api == 0.0) continue;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
      }
    }
  }
}

}  // namespace prefrank::nk
