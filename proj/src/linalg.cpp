#include "mdeq/linalg.hpp"

#include <algorithm>
#include <numeric>

namespace mdeq::linalg {

namespace {

double off_diagonal_norm(const Mat<double>& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

double frobenius(const Mat<double>& a) {
  double s = 0.0;
  for (double v : a.a) s += v * v;
  return std::sqrt(s);
}

void require_square(const Tensor& t, const char* what) {
  if (t.rows() != t.cols()) throw ShapeError(std::string(what) + " needs a square matrix, got " + t.shape_string());
}

void require_symmetric(const Tensor& t, const char* what) {
  const auto n = t.rows();
  const double scale = std::max(1.0, max_abs(t));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(t(i, j) - t(j, i)) > 1e-10 * scale) {
        throw Error(std::string(what) + ": input is not symmetric");
      }
}

}  // namespace

EigenDecomposition jacobi_eigen(Mat<double> a) {
  const std::size_t n = a.rows;
  EigenDecomposition out;
  out.vectors = Mat<double>::identity(n);
  const double tol = 1e-12 * std::max(1.0, frobenius(a));
  constexpr int kMaxSweeps = 100;
  while (off_diagonal_norm(a) >= tol && out.sweeps < kMaxSweeps) {
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = out.vectors(k, p), vkq = out.vectors(k, q);
          out.vectors(k, p) = c * vkp - s * vkq;
          out.vectors(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) < a(j, j); });
  Mat<double> vecs(n, n);
  out.values.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) vecs(i, k) = out.vectors(i, order[k]);
  }
  out.vectors = std::move(vecs);
  return out;
}

namespace {

struct SqrtParts {
  EigenDecomposition eig;
  std::vector<double> roots;
  Mat<double> root;
  Mat<double> inverse;
};

SqrtParts sqrt_parts(const Mat<double>& s) {
  SqrtParts out;
  out.eig = jacobi_eigen(s);
  const std::size_t n = s.rows;
  out.roots.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double lam = out.eig.values[k];
    if (lam < -1e-10) throw Error("symmetric_sqrt: negative eigenvalue " + std::to_string(lam));
    if (!(lam > 0.0)) throw RankDeficient("symmetric_sqrt: singular matrix");
    out.roots[k] = std::sqrt(lam);
  }
  out.root = Mat<double>(n, n);
  out.inverse = Mat<double>(n, n);
  const auto& v = out.eig.vectors;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double b = 0.0, bi = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        b += v(i, k) * out.roots[k] * v(j, k);
        bi += v(i, k) / out.roots[k] * v(j, k);
      }
      out.root(i, j) = b;
      out.inverse(i, j) = bi;
    }
  return out;
}

}  // namespace

std::pair<Mat<double>, Mat<double>> sqrt_and_inverse(const Mat<double>& s) {
  auto parts = sqrt_parts(s);
  return {std::move(parts.root), std::move(parts.inverse)};
}

std::pair<Mat<Dual>, Mat<Dual>> sqrt_and_inverse(const Mat<Dual>& s) {
  const std::size_t n = s.rows;
  Mat<double> val(n, n), der(n, n);
  for (std::size_t i = 0; i < s.a.size(); ++i) {
    val.a[i] = s.a[i].v;
    der.a[i] = s.a[i].d;
  }
  const auto parts = sqrt_parts(val);
  const auto& v = parts.eig.vectors;
  // dB = V [ (V^T dS V)_ij / (sqrt(l_i) + sqrt(l_j)) ] V^T
  Mat<double> rot = mul(mul_tn(v, der), v);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) rot(i, j) /= parts.roots[i] + parts.roots[j];
  const Mat<double> d_root = mul_nt(mul(v, rot), v);
  const Mat<double> d_inv = mul(mul(parts.inverse, d_root), parts.inverse);
  Mat<Dual> root(n, n), inverse(n, n);
  for (std::size_t i = 0; i < n * n; ++i) {
    root.a[i] = Dual(parts.root.a[i], d_root.a[i]);
    inverse.a[i] = Dual(parts.inverse.a[i], -d_inv.a[i]);
  }
  return {std::move(root), std::move(inverse)};
}

Mat<double> to_mat(const Tensor& t) {
  Mat<double> m(t.rows(), t.cols());
  std::copy(t.data().begin(), t.data().end(), m.a.begin());
  return m;
}

Tensor to_tensor(const Mat<double>& m) { return Tensor({m.rows, m.cols}, m.a); }

Tensor cholesky(const Tensor& p) {
  require_square(p, "cholesky");
  require_symmetric(p, "cholesky");
  return to_tensor(cholesky_lower(to_mat(p)));
}

Tensor cholesky_factor(const Tensor& p) {
  require_square(p, "cholesky");
  return to_tensor(cholesky_lower(to_mat(p)));
}

Tensor cholesky_solve(const Tensor& l, const Tensor& b) {
  const auto n = l.rows(), k = b.cols();
  if (b.rows() != n) throw ShapeError("cholesky_solve: right-hand side has wrong row count");
  Tensor x = b.reshaped({n, k});
  // Forward substitution L y = b, then L^T x = y.
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t j = 0; j < i; ++j) s -= l(i, j) * x(j, c);
      x(i, c) = s / l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = x(i, c);
      for (std::size_t j = i + 1; j < n; ++j) s -= l(j, i) * x(j, c);
      x(i, c) = s / l(i, i);
    }
  }
  return x;
}

Tensor symmetric_sqrt(const Tensor& p) {
  require_square(p, "symmetric_sqrt");
  require_symmetric(p, "symmetric_sqrt");
  return to_tensor(sqrt_and_inverse(to_mat(p)).first);
}

double log_det_spd(const Tensor& p) {
  const Tensor l = cholesky_factor(p);
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

double determinant(const Tensor& a) {
  require_square(a, "determinant");
  const auto n = a.rows();
  Mat<double> m = to_mat(a);
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m(r, c)) > std::abs(m(piv, c))) piv = r;
    if (m(piv, c) == 0.0) return 0.0;
    if (piv != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(c, j), m(piv, j));
      det = -det;
    }
    det *= m(c, c);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m(r, c) / m(c, c);
      for (std::size_t j = c; j < n; ++j) m(r, j) -= f * m(c, j);
    }
  }
  return det;
}

}  // namespace mdeq::linalg
