#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "mdeq/dual.hpp"
#include "mdeq/errors.hpp"
#include "mdeq/tensor.hpp"

/// Small dense linear algebra: Cholesky, cyclic Jacobi eigensolver and the
/// principal square root of SPD matrices. Kernels used on the manifold maps
/// are templated on the scalar so they run on Dual numbers for forward-mode
/// directional derivatives.
namespace mdeq::linalg {

template <class T>
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, T(0.0)) {}
  T& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1.0);
    return m;
  }
};

template <class T>
Mat<T> mul(const Mat<T>& x, const Mat<T>& y) {
  Mat<T> out(x.rows, y.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t p = 0; p < x.cols; ++p)
      for (std::size_t j = 0; j < y.cols; ++j) out(i, j) += x(i, p) * y(p, j);
  return out;
}

/// x^T y
template <class T>
Mat<T> mul_tn(const Mat<T>& x, const Mat<T>& y) {
  Mat<T> out(x.cols, y.cols);
  for (std::size_t p = 0; p < x.rows; ++p)
    for (std::size_t i = 0; i < x.cols; ++i)
      for (std::size_t j = 0; j < y.cols; ++j) out(i, j) += x(p, i) * y(p, j);
  return out;
}

/// x y^T
template <class T>
Mat<T> mul_nt(const Mat<T>& x, const Mat<T>& y) {
  Mat<T> out(x.rows, y.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < y.rows; ++j)
      for (std::size_t p = 0; p < x.cols; ++p) out(i, j) += x(i, p) * y(j, p);
  return out;
}

template <class T>
Mat<T> transpose(const Mat<T>& x) {
  Mat<T> out(x.cols, x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
  return out;
}

/// Lower Cholesky factor of a symmetric positive-definite matrix; only the
/// lower triangle is read.
template <class T>
Mat<T> cholesky_lower(const Mat<T>& p) {
  const std::size_t n = p.rows;
  Mat<T> l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    T s = p(j, j);
    for (std::size_t k = 0; k < j; ++k) s -= l(j, k) * l(j, k);
    if (!(value_of(s) > 0.0)) {
      throw NotPositiveDefinite("non-positive pivot " + std::to_string(value_of(s)) + " at column " +
                                std::to_string(j));
    }
    using std::sqrt;
    const T d = sqrt(s);
    l(j, j) = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      T t = p(i, j);
      for (std::size_t k = 0; k < j; ++k) t -= l(i, k) * l(j, k);
      l(i, j) = t / d;
    }
  }
  return l;
}

struct EigenDecomposition {
  std::vector<double> values;  // ascending
  Mat<double> vectors;         // columns are eigenvectors
  int sweeps = 0;
};

/// Cyclic Jacobi eigensolver for symmetric matrices. Stops when the
/// off-diagonal Frobenius norm drops below 1e-12 (relative to the matrix
/// norm once that exceeds one).
EigenDecomposition jacobi_eigen(Mat<double> a);

/// Principal square root and its inverse for SPD input.
std::pair<Mat<double>, Mat<double>> sqrt_and_inverse(const Mat<double>& s);
/// Dual version: value via Jacobi, derivative from the Sylvester equation
/// B dB + dB B = dS solved in the eigenbasis.
std::pair<Mat<Dual>, Mat<Dual>> sqrt_and_inverse(const Mat<Dual>& s);

Mat<double> to_mat(const Tensor& t);
Tensor to_tensor(const Mat<double>& m);

// Tensor-level API ----------------------------------------------------------

/// Lower-triangular L with L L^T = P. Requires P symmetric within 1e-10.
Tensor cholesky(const Tensor& p);
/// Cholesky factor without the symmetry check (reads the lower triangle).
Tensor cholesky_factor(const Tensor& p);
/// Solves L L^T X = B for X.
Tensor cholesky_solve(const Tensor& l, const Tensor& b);
/// Symmetric positive-definite B with B B = P, via Jacobi eigendecomposition.
Tensor symmetric_sqrt(const Tensor& p);
/// log det of an SPD matrix through its Cholesky factor.
double log_det_spd(const Tensor& p);
double determinant(const Tensor& a);

}  // namespace mdeq::linalg
