#include "mdeq/tensor.hpp"

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <numeric>

#include "mdeq/errors.hpp"

namespace mdeq {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

void check_extents(const std::vector<std::size_t>& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + mdeq::shape_string(shape));
  }
}

}  // namespace

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != product(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     mdeq::shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, std::vector<double>{value}); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::column(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n, 1}, std::move(values));
}

Tensor Tensor::row(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.size() < 2) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return shape_[0];
  return data_.size() / shape_[0];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + mdeq::shape_string(shape_));
  return data_[0];
}

Tensor Tensor::transposed() const {
  const auto r = rows(), c = cols();
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_string() const { return mdeq::shape_string(shape_); }

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const Tensor& t) { return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                                                 static_cast<Eigen::Index>(t.cols())); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rows() != a.cols()) {
    throw ShapeError("matmul shape mismatch " + a.shape_string() + " * " + b.shape_string());
  }
  Tensor out({a.rows(), b.cols()});
  MutMap(out.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(b.cols())).noalias() =
      view(a) * view(b);
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (b.rows() != a.rows()) {
    throw ShapeError("matmul_tn shape mismatch " + a.shape_string() + " * " + b.shape_string());
  }
  Tensor out({a.cols(), b.cols()});
  MutMap(out.data().data(), static_cast<Eigen::Index>(a.cols()), static_cast<Eigen::Index>(b.cols())).noalias() =
      view(a).transpose() * view(b);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (b.cols() != a.cols()) {
    throw ShapeError("matmul_nt shape mismatch " + a.shape_string() + " * " + b.shape_string());
  }
  Tensor out({a.rows(), b.rows()});
  MutMap(out.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(b.rows())).noalias() =
      view(a) * view(b).transpose();
  return out;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("tensor add size mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("tensor sub size mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.storage()) v *= s;
  return out;
}

double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s = std::max(s, std::abs(v));
  return s;
}

}  // namespace mdeq
