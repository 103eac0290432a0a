#include "polyspeech/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "polyspeech/error.hpp"

namespace polyspeech {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : dims_{rows, cols}, values_(rows * cols, fill) {
  require(rows > 0 && cols > 0, "Tensor: dims must be positive");
  fold();
}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> values)
    : dims_(std::move(dims)), values_(std::move(values)) {
  require(!dims_.empty(), "Tensor: rank must be at least 1");
  std::size_t n = 1;
  for (std::size_t d : dims_) {
    require(d > 0, "Tensor: dims must be positive");
    n *= d;
  }
  require(n == values_.size(), "Tensor: product(dims) != number of values");
  fold();
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::zeros_like(const Tensor& other) {
  return Tensor(other.dims_, std::vector<double>(other.size(), 0.0));
}

void Tensor::fold() {
  rows_ = dims_.size() >= 2 ? dims_[0] : 1;
  cols_ = rows_ == 0 ? 0 : values_.size() / rows_;
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

void matmul_into(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul: inner dims differ " + a.shape_string() + " x " + b.shape_string());
  require(out.rows() == n && out.cols() == m, "matmul: bad output shape");
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = po + i * m;
    for (std::size_t j = 0; j < m; ++j) orow[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

void matmul_nt_into(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  require(b.cols() == k, "matmul_nt: inner dims differ");
  require(out.rows() == n && out.cols() == m, "matmul_nt: bad output shape");
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
}

void matmul_tn_accumulate(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul_tn: inner dims differ");
  require(out.rows() == n && out.cols() == m, "matmul_tn: bad output shape");
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * n;
    const double* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  matmul_into(a, b, out);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "squared_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace polyspeech
