#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "mdeq/dual.hpp"
#include "mdeq/jvp.hpp"
#include "mdeq/linalg.hpp"
#include "mdeq/tensor.hpp"

/// Change-of-variables maps G : R^m -> Y x Z for each supported manifold,
/// their inverses, log Gram-Jacobians and embedding-constraint validators.
namespace mdeq {

enum class ManifoldKind { Sphere, Torus, Stiefel, Orthogonal, SpecialOrthogonal, Integer };

/// Manifold together with its natural embedding.
///
/// Sphere(m): S^{m-1} in R^m. Torus(m): T^m as m unit circles in R^{2m}.
/// Stiefel(n, p), Orthogonal(n), SpecialOrthogonal(n): n x p (n x n)
/// matrices flattened row-major. Integer: a single integer.
struct Manifold {
  ManifoldKind kind = ManifoldKind::Sphere;
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t p = 0;

  static Manifold sphere(std::size_t m) { return {ManifoldKind::Sphere, m, 0, 0}; }
  static Manifold torus(std::size_t m) { return {ManifoldKind::Torus, m, 0, 0}; }
  static Manifold stiefel(std::size_t n, std::size_t p) { return {ManifoldKind::Stiefel, 0, n, p}; }
  static Manifold orthogonal(std::size_t n) { return {ManifoldKind::Orthogonal, 0, n, n}; }
  static Manifold special_orthogonal(std::size_t n) { return {ManifoldKind::SpecialOrthogonal, 0, n, n}; }
  static Manifold integer() { return {ManifoldKind::Integer, 1, 0, 0}; }

  /// Dimension of the ambient Euclidean space.
  std::size_t embed_dim() const noexcept;
  bool is_matrix() const noexcept {
    return kind == ManifoldKind::Stiefel || kind == ManifoldKind::Orthogonal ||
           kind == ManifoldKind::SpecialOrthogonal;
  }
  std::string name() const;

  friend bool operator==(const Manifold&, const Manifold&) = default;
};

/// A point in the natural embedding of its manifold.
struct ManifoldPoint {
  Manifold manifold;
  Tensor coords;  // 1 x embed_dim (matrices flattened row-major)

  static ManifoldPoint make(Manifold manifold, std::vector<double> coords);
  Tensor as_matrix() const;  // n x p for matrix manifolds
  std::int64_t as_integer() const;
};

struct PositiveRadius {
  double r = 1.0;
};
struct RadiusVector {
  std::vector<double> r;
};
/// Lower-triangular p x p matrix with positive diagonal.
struct TriPlus {
  Tensor l;
};
struct UnitInterval {
  double u = 0.0;
};
struct WindingIndex {
  std::vector<std::int64_t> k;
};
struct ReflectionBit {
  bool reflected = false;
};

using AuxiliaryCoordinate =
    std::variant<PositiveRadius, RadiusVector, TriPlus, UnitInterval, WindingIndex, ReflectionBit>;

struct CoordinateSplit {
  ManifoldPoint y;
  AuxiliaryCoordinate z;
  /// log sqrt(det(dG^T dG)) of G at the preimage x.
  double log_gram_jacobian = 0.0;
};

/// Inputs closer than this to the origin (or rank-deficient by this margin)
/// are rejected instead of clamped.
inline constexpr double kNearOrigin = 1e-12;
inline constexpr double kRankTolerance = 1e-10;
inline constexpr double kConstraintTolerance = 1e-8;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Sphere --------------------------------------------------------------------

CoordinateSplit sphere_split(const Tensor& x);
Tensor sphere_join(const ManifoldPoint& s, const PositiveRadius& r);

// Torus (Clifford embedding) --------------------------------------------------

CoordinateSplit torus_split(const Tensor& x);
Tensor torus_join(const ManifoldPoint& s, const RadiusVector& r);

// Stiefel / orthogonal group --------------------------------------------------

/// M -> (O, L) with P = sqrt(M^T M), O = M P^{-1}, L = chol(P).
CoordinateSplit cholesky_polar_split(const Tensor& m);
Tensor cholesky_polar_join(const ManifoldPoint& o, const TriPlus& l);
/// Generic Gram route: Jacobian of the Cholesky polar map into
/// R^{np} x R^{p(p+1)/2}, assembled column by column via jvp.
double stiefel_log_gram_det(const Tensor& m, JvpMode mode = JvpMode::Forward);
/// Closed form of the same quantity for square matrices, as a function of the
/// Cholesky factor L alone (the value is invariant to the orthogonal factor).
/// Optionally writes d/dL (full p x p, zero above the diagonal).
double orthogonal_log_gram_det(const Tensor& l, Tensor* grad = nullptr);

/// Number of free entries of a p x p lower-triangular matrix.
constexpr std::size_t tri_size(std::size_t p) { return p * (p + 1) / 2; }
/// Row-major lower-triangle entries <-> full matrix.
std::vector<double> tri_free_entries(const Tensor& l);
Tensor tri_from_free(std::span<const double> free, std::size_t p);

/// Sign-based partition of O(n) into SO(n) and R SO(n).
struct SpecialOrthogonalSplit {
  ManifoldPoint point;
  ReflectionBit bit;
};
Tensor default_reflection(std::size_t n);
SpecialOrthogonalSplit so_n_split(const ManifoldPoint& q, const Tensor& reflection);

// Integers and modulus --------------------------------------------------------

/// x -> (floor x, x - floor x); unit Jacobian.
CoordinateSplit integer_split(double x);
double integer_join(std::int64_t n, double u);

struct ModulusSplit {
  std::vector<double> angles;  // each in [0, 2 pi)
  WindingIndex winding;
  double log_gram_jacobian = 0.0;
};
/// x_i -> (k_i, y_i) with x_i = y_i + 2 pi k_i.
ModulusSplit modulus_split(std::span<const double> x);

// Validation ------------------------------------------------------------------

/// Max-norm of the manifold's constraint function; zero for valid points.
double constraint_check(const ManifoldPoint& p);
/// Angles in [0, 2 pi) of a Clifford-torus point.
std::vector<double> torus_angles(const ManifoldPoint& p);
ManifoldPoint torus_from_angles(std::span<const double> angles);

// Differentiable map bodies (generic over double / Dual) -----------------------

template <class T>
std::vector<T> sphere_map(const std::vector<T>& x) {
  using std::sqrt;
  T r2(0.0);
  for (const auto& v : x) r2 += v * v;
  const T r = sqrt(r2);
  std::vector<T> out;
  out.reserve(x.size() + 1);
  for (const auto& v : x) out.push_back(v / r);
  out.push_back(r);
  return out;
}

template <class T>
std::vector<T> torus_map(const std::vector<T>& x) {
  using std::sqrt;
  const std::size_t m = x.size() / 2;
  std::vector<T> out(x.size() + m);
  for (std::size_t i = 0; i < m; ++i) {
    const T r = sqrt(x[2 * i] * x[2 * i] + x[2 * i + 1] * x[2 * i + 1]);
    out[2 * i] = x[2 * i] / r;
    out[2 * i + 1] = x[2 * i + 1] / r;
    out[2 * m + i] = r;
  }
  return out;
}

/// Inverse torus map on (s_1..s_m in R^2 each, r_1..r_m) -> R^{2m}.
template <class T>
std::vector<T> torus_join_map(const std::vector<T>& sr) {
  const std::size_t m = sr.size() / 3;
  std::vector<T> out(2 * m);
  for (std::size_t i = 0; i < m; ++i) {
    out[2 * i] = sr[2 * m + i] * sr[2 * i];
    out[2 * i + 1] = sr[2 * m + i] * sr[2 * i + 1];
  }
  return out;
}

template <class T>
struct PolarFactors {
  linalg::Mat<T> o;
  linalg::Mat<T> l;
};

template <class T>
PolarFactors<T> cholesky_polar(const linalg::Mat<T>& m) {
  const linalg::Mat<T> gram = linalg::mul_tn(m, m);
  auto [root, inverse] = linalg::sqrt_and_inverse(gram);
  PolarFactors<T> out;
  out.o = linalg::mul(m, inverse);
  out.l = linalg::cholesky_lower(root);
  return out;
}

/// Cholesky polar map on a flattened n x p matrix into (vec O, tri(L)).
template <class T>
std::vector<T> cholesky_polar_map(const std::vector<T>& flat, std::size_t n, std::size_t p) {
  linalg::Mat<T> m(n, p);
  for (std::size_t i = 0; i < flat.size(); ++i) m.a[i] = flat[i];
  const auto f = cholesky_polar(m);
  std::vector<T> out(f.o.a.begin(), f.o.a.end());
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j <= i; ++j) out.push_back(f.l(i, j));
  return out;
}

}  // namespace mdeq
