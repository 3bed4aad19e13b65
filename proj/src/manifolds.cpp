#include "mdeq/manifolds.hpp"

#include <algorithm>
#include <cmath>

namespace mdeq {

std::size_t Manifold::embed_dim() const noexcept {
  switch (kind) {
    case ManifoldKind::Sphere:
      return m;
    case ManifoldKind::Torus:
      return 2 * m;
    case ManifoldKind::Stiefel:
    case ManifoldKind::Orthogonal:
    case ManifoldKind::SpecialOrthogonal:
      return n * p;
    case ManifoldKind::Integer:
      return 1;
  }
  return 0;
}

std::string Manifold::name() const {
  switch (kind) {
    case ManifoldKind::Sphere:
      return "Sphere(" + std::to_string(m) + ")";
    case ManifoldKind::Torus:
      return "Torus(" + std::to_string(m) + ")";
    case ManifoldKind::Stiefel:
      return "Stiefel(" + std::to_string(n) + "," + std::to_string(p) + ")";
    case ManifoldKind::Orthogonal:
      return "Orthogonal(" + std::to_string(n) + ")";
    case ManifoldKind::SpecialOrthogonal:
      return "SpecialOrthogonal(" + std::to_string(n) + ")";
    case ManifoldKind::Integer:
      return "Integer";
  }
  return "?";
}

ManifoldPoint ManifoldPoint::make(Manifold manifold, std::vector<double> coords) {
  if (coords.size() != manifold.embed_dim())
    throw ShapeError(manifold.name() + " expects " + std::to_string(manifold.embed_dim()) + " coordinates, got " +
                     std::to_string(coords.size()));
  const std::size_t d = coords.size();
  return {manifold, Tensor({1, d}, std::move(coords))};
}

Tensor ManifoldPoint::as_matrix() const {
  if (!manifold.is_matrix()) throw ShapeError("as_matrix on non-matrix manifold " + manifold.name());
  return coords.reshaped({manifold.n, manifold.p});
}

std::int64_t ManifoldPoint::as_integer() const {
  if (manifold.kind != ManifoldKind::Integer) throw ShapeError("as_integer on " + manifold.name());
  return static_cast<std::int64_t>(std::llround(coords[0]));
}

namespace {

void require_valid(const ManifoldPoint& p, const char* what) {
  const double res = constraint_check(p);
  if (!(res < kConstraintTolerance))
    throw ConstraintViolation(std::string(what) + ": point off " + p.manifold.name() + " (residual " +
                              std::to_string(res) + ")");
}

double wrap_angle(double a) {
  double y = std::fmod(a, kTwoPi);
  if (y < 0) y += kTwoPi;
  if (y >= kTwoPi) y -= kTwoPi;
  return y;
}

}  // namespace

// Sphere ---------------------------------------------------------------------

CoordinateSplit sphere_split(const Tensor& x) {
  const std::size_t m = x.size();
  if (m < 1) throw ShapeError("sphere_split: empty input");
  double r2 = 0.0;
  for (double v : x.data()) r2 += v * v;
  const double r = std::sqrt(r2);
  if (!(r >= kNearOrigin)) throw NearOrigin("sphere_split: |x| below 1e-12");
  std::vector<double> s(m);
  for (std::size_t i = 0; i < m; ++i) s[i] = x[i] / r;
  CoordinateSplit out{ManifoldPoint::make(Manifold::sphere(m), std::move(s)), PositiveRadius{r},
                      -static_cast<double>(m - 1) * std::log(r)};
  return out;
}

Tensor sphere_join(const ManifoldPoint& s, const PositiveRadius& r) {
  if (s.manifold.kind != ManifoldKind::Sphere) throw ConstraintViolation("sphere_join: not a sphere point");
  require_valid(s, "sphere_join");
  if (!(r.r > 0.0)) throw OutOfSupport("sphere_join: radius must be positive");
  Tensor x = s.coords;
  for (double& v : x.data()) v *= r.r;
  return x;
}

// Torus ----------------------------------------------------------------------

CoordinateSplit torus_split(const Tensor& x) {
  if (x.size() % 2 != 0 || x.size() == 0) throw ShapeError("torus_split: needs an even number of coordinates");
  const std::size_t m = x.size() / 2;
  std::vector<double> s(2 * m);
  RadiusVector radii{std::vector<double>(m)};
  double log_j = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double r = std::hypot(x[2 * i], x[2 * i + 1]);
    if (!(r >= kNearOrigin)) throw NearOrigin("torus_split: pair " + std::to_string(i) + " below 1e-12");
    s[2 * i] = x[2 * i] / r;
    s[2 * i + 1] = x[2 * i + 1] / r;
    radii.r[i] = r;
    log_j -= std::log(r);
  }
  return {ManifoldPoint::make(Manifold::torus(m), std::move(s)), std::move(radii), log_j};
}

Tensor torus_join(const ManifoldPoint& s, const RadiusVector& r) {
  if (s.manifold.kind != ManifoldKind::Torus) throw ConstraintViolation("torus_join: not a torus point");
  require_valid(s, "torus_join");
  const std::size_t m = s.manifold.m;
  if (r.r.size() != m) throw ShapeError("torus_join: radius count mismatch");
  Tensor x = s.coords;
  for (std::size_t i = 0; i < m; ++i) {
    if (!(r.r[i] > 0.0)) throw OutOfSupport("torus_join: radius must be positive");
    x[2 * i] *= r.r[i];
    x[2 * i + 1] *= r.r[i];
  }
  return x;
}

std::vector<double> torus_angles(const ManifoldPoint& p) {
  if (p.manifold.kind != ManifoldKind::Torus) throw ShapeError("torus_angles: not a torus point");
  std::vector<double> a(p.manifold.m);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = wrap_angle(std::atan2(p.coords[2 * i + 1], p.coords[2 * i]));
  return a;
}

ManifoldPoint torus_from_angles(std::span<const double> angles) {
  std::vector<double> c(2 * angles.size());
  for (std::size_t i = 0; i < angles.size(); ++i) {
    c[2 * i] = std::cos(angles[i]);
    c[2 * i + 1] = std::sin(angles[i]);
  }
  return ManifoldPoint::make(Manifold::torus(angles.size()), std::move(c));
}

// Stiefel --------------------------------------------------------------------

std::vector<double> tri_free_entries(const Tensor& l) {
  const std::size_t p = l.rows();
  std::vector<double> out;
  out.reserve(tri_size(p));
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j <= i; ++j) out.push_back(l(i, j));
  return out;
}

Tensor tri_from_free(std::span<const double> free, std::size_t p) {
  if (free.size() != tri_size(p)) throw ShapeError("tri_from_free: wrong entry count");
  Tensor l({p, p});
  std::size_t k = 0;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j <= i; ++j) l(i, j) = free[k++];
  return l;
}

namespace {

void require_full_rank(const Tensor& m) {
  if (m.rows() < m.cols()) throw RankDeficient("cholesky_polar_split: more columns than rows");
  const auto gram = linalg::mul_tn(linalg::to_mat(m), linalg::to_mat(m));
  const auto eig = linalg::jacobi_eigen(gram);
  if (!(eig.values.front() >= kRankTolerance))
    throw RankDeficient("cholesky_polar_split: smallest eigenvalue of M^T M is " + std::to_string(eig.values.front()));
}

}  // namespace

CoordinateSplit cholesky_polar_split(const Tensor& m) {
  require_full_rank(m);
  const std::size_t n = m.rows(), p = m.cols();
  const auto f = cholesky_polar(linalg::to_mat(m));
  const Manifold man = n == p ? Manifold::orthogonal(n) : Manifold::stiefel(n, p);
  CoordinateSplit out{ManifoldPoint::make(man, f.o.a), TriPlus{linalg::to_tensor(f.l)}, 0.0};
  out.log_gram_jacobian = stiefel_log_gram_det(m);
  return out;
}

Tensor cholesky_polar_join(const ManifoldPoint& o, const TriPlus& l) {
  if (!o.manifold.is_matrix()) throw ConstraintViolation("cholesky_polar_join: not a matrix-manifold point");
  require_valid(o, "cholesky_polar_join");
  const std::size_t p = o.manifold.p;
  if (l.l.rows() != p || l.l.cols() != p) throw ShapeError("cholesky_polar_join: L has wrong shape");
  for (std::size_t i = 0; i < p; ++i) {
    if (!(l.l(i, i) > 0.0)) throw OutOfSupport("cholesky_polar_join: diag(L) must be positive");
    for (std::size_t j = i + 1; j < p; ++j)
      if (l.l(i, j) != 0.0) throw OutOfSupport("cholesky_polar_join: L is not lower-triangular");
  }
  return matmul(o.as_matrix(), matmul(l.l, l.l.transposed()));
}

double stiefel_log_gram_det(const Tensor& m, JvpMode mode) {
  const std::size_t n = m.rows(), p = m.cols();
  require_full_rank(m);
  auto fn = [n, p](const auto& flat) { return cholesky_polar_map(flat, n, p); };
  return log_gram_det(fn, m.data(), mode);
}

double orthogonal_log_gram_det(const Tensor& l, Tensor* grad) {
  const std::size_t n = l.rows();
  if (l.cols() != n) throw ShapeError("orthogonal_log_gram_det: L must be square");
  const auto lm = linalg::to_mat(l);
  const auto eig = linalg::jacobi_eigen(linalg::mul_nt(lm, lm));
  const auto& lam = eig.values;
  const double ln2 = std::log(2.0);
  double s = static_cast<double>(n) * ln2 + static_cast<double>(n * (n - 1)) / 4.0 * ln2;
  std::vector<double> c(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(l(i, i) > 0.0)) throw OutOfSupport("orthogonal_log_gram_det: diag(L) must be positive");
    s += static_cast<double>(n - i) * std::log(l(i, i));
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double pair = lam[i] + lam[j];
      if (!(pair > 0.0)) throw NumericalError("orthogonal_log_gram_det: singular L");
      if (j > i) s += std::log(pair / 2.0);
      c[i] += 1.0 / pair;
    }
  }
  if (grad != nullptr) {
    // d/dL of sum_{i<j} log(l_i + l_j) is 2 G L with G = V diag(c) V^T.
    linalg::Mat<double> g(n, n);
    const auto& v = eig.vectors;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) g(i, j) += v(i, k) * c[k] * v(j, k);
    const auto gl = linalg::mul(g, lm);
    *grad = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) (*grad)(i, j) = -2.0 * gl(i, j);
      (*grad)(i, i) -= static_cast<double>(n - i) / l(i, i);
    }
  }
  return -s;
}

// SO(n) ----------------------------------------------------------------------

Tensor default_reflection(std::size_t n) {
  Tensor r = Tensor::identity(n);
  r(0, 0) = -1.0;
  return r;
}

SpecialOrthogonalSplit so_n_split(const ManifoldPoint& q, const Tensor& reflection) {
  const auto kind = q.manifold.kind;
  if (kind != ManifoldKind::Orthogonal && kind != ManifoldKind::SpecialOrthogonal)
    throw ConstraintViolation("so_n_split: expects an orthogonal matrix");
  const std::size_t n = q.manifold.n;
  if (reflection.rows() != n || reflection.cols() != n) throw ShapeError("so_n_split: reflection has wrong shape");
  const ManifoldPoint as_o{Manifold::orthogonal(n), q.coords};
  require_valid(as_o, "so_n_split");
  const ManifoldPoint r_point{Manifold::orthogonal(n), reflection.reshaped({1, n * n})};
  if (!(constraint_check(r_point) < kConstraintTolerance) ||
      std::abs(linalg::determinant(reflection) + 1.0) > kConstraintTolerance)
    throw ConstraintViolation("so_n_split: R is not a reflection");
  const Tensor m = q.as_matrix();
  const bool reflected = linalg::determinant(m) < 0.0;
  const Tensor out = reflected ? matmul(reflection, m) : m;
  return {ManifoldPoint{Manifold::special_orthogonal(n), out.reshaped({1, n * n})}, ReflectionBit{reflected}};
}

// Integers and modulus -------------------------------------------------------

CoordinateSplit integer_split(double x) {
  if (!std::isfinite(x)) throw NumericalError("integer_split: non-finite input");
  const double n = std::floor(x);
  double u = x - n;
  if (u >= 1.0) u = std::nextafter(1.0, 0.0);
  return {ManifoldPoint::make(Manifold::integer(), {n}), UnitInterval{u}, 0.0};
}

double integer_join(std::int64_t n, double u) {
  if (!(u >= 0.0 && u < 1.0)) throw OutOfSupport("integer_join: u outside [0,1)");
  return static_cast<double>(n) + u;
}

ModulusSplit modulus_split(std::span<const double> x) {
  ModulusSplit out;
  out.angles.resize(x.size());
  out.winding.k.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw NumericalError("modulus_split: non-finite input");
    auto k = static_cast<std::int64_t>(std::floor(x[i] / kTwoPi));
    double y = x[i] - kTwoPi * static_cast<double>(k);
    if (y < 0.0) {
      y += kTwoPi;
      --k;
    }
    if (y >= kTwoPi) {
      y -= kTwoPi;
      ++k;
    }
    out.angles[i] = y;
    out.winding.k[i] = k;
  }
  return out;
}

// Validation -----------------------------------------------------------------

double constraint_check(const ManifoldPoint& p) {
  const auto& c = p.coords;
  switch (p.manifold.kind) {
    case ManifoldKind::Sphere: {
      double s = 0.0;
      for (double v : c.data()) s += v * v;
      return std::abs(s - 1.0);
    }
    case ManifoldKind::Torus: {
      double worst = 0.0;
      for (std::size_t i = 0; i < p.manifold.m; ++i)
        worst = std::max(worst, std::abs(c[2 * i] * c[2 * i] + c[2 * i + 1] * c[2 * i + 1] - 1.0));
      return worst;
    }
    case ManifoldKind::Stiefel:
    case ManifoldKind::Orthogonal:
    case ManifoldKind::SpecialOrthogonal: {
      const Tensor m = p.as_matrix();
      const Tensor g = matmul(m.transposed(), m) - Tensor::identity(p.manifold.p);
      double worst = max_abs(g);
      if (p.manifold.kind == ManifoldKind::SpecialOrthogonal)
        worst = std::max(worst, std::abs(linalg::determinant(m) - 1.0));
      return worst;
    }
    case ManifoldKind::Integer:
      return std::abs(c[0] - std::round(c[0]));
  }
  return 0.0;
}

}  // namespace mdeq
