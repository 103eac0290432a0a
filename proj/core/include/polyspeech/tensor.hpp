#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace polyspeech {

/// Dense row-major array of doubles. Every op in this library treats a tensor
/// as a matrix: rank-1 tensors are a single row, higher ranks fold all
/// trailing dimensions into the column count.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::vector<std::size_t> dims, std::vector<double> values);

  static Tensor vector(std::vector<double> values);
  static Tensor zeros_like(const Tensor& other);

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool same_shape(const Tensor& other) const noexcept { return dims_ == other.dims_; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  void fill(double v);
  bool all_finite() const;
  std::string shape_string() const;

 private:
  void fold();

  std::vector<std::size_t> dims_;
  std::vector<double> values_;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
};

// Raw kernels. Each output row is computed from the matching input row alone,
// with a fixed accumulation order, so results never depend on how many rows
// are processed together.

/// out = a * b  (a: n×k, b: k×m)
void matmul_into(const Tensor& a, const Tensor& b, Tensor& out);
/// out = a * bᵀ  (a: n×k, b: m×k)
void matmul_nt_into(const Tensor& a, const Tensor& b, Tensor& out);
/// out += aᵀ * b  (a: k×n, b: k×m)
void matmul_tn_accumulate(const Tensor& a, const Tensor& b, Tensor& out);

Tensor matmul(const Tensor& a, const Tensor& b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
double squared_distance(std::span<const double> a, std::span<const double> b);

}  // namespace polyspeech
