#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mdeq/dual.hpp"
#include "mdeq/errors.hpp"
#include "mdeq/linalg.hpp"
#include "mdeq/tensor.hpp"

namespace mdeq {

enum class JvpMode { Forward, CentralDifference };

struct JvpResult {
  std::vector<double> value;
  JvpMode mode = JvpMode::Forward;
};

/// Directional derivative of `fn` at `x` along `v`.
///
/// `fn` is a generic callable taking `const std::vector<T>&` and returning
/// `std::vector<T>`, instantiated with T = Dual (forward mode) or T = double
/// (central difference with step h * (1 + max|x_i|)).
template <class F>
JvpResult jvp(F&& fn, std::span<const double> x, std::span<const double> v, JvpMode mode = JvpMode::Forward,
              double h = 1e-6) {
  if (x.size() != v.size()) throw ShapeError("jvp: direction and point differ in size");
  JvpResult out;
  out.mode = mode;
  if (mode == JvpMode::Forward) {
    std::vector<Dual> xd(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) xd[i] = Dual(x[i], v[i]);
    const std::vector<Dual> y = fn(xd);
    out.value.resize(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out.value[i] = y[i].d;
  } else {
    double scale = 0.0;
    for (double xi : x) scale = std::max(scale, std::abs(xi));
    const double t = h * (1.0 + scale);
    std::vector<double> xp(x.begin(), x.end()), xm(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
      xp[i] += t * v[i];
      xm[i] -= t * v[i];
    }
    const std::vector<double> yp = fn(xp);
    const std::vector<double> ym = fn(xm);
    out.value.resize(yp.size());
    for (std::size_t i = 0; i < yp.size(); ++i) out.value[i] = (yp[i] - ym[i]) / (2.0 * t);
  }
  for (double d : out.value)
    if (!std::isfinite(d)) throw NumericalError("jvp produced a non-finite derivative");
  return out;
}

/// Full Jacobian (outputs x inputs) assembled column by column from jvp.
template <class F>
Tensor jacobian(F&& fn, std::span<const double> x, JvpMode mode = JvpMode::Forward) {
  std::vector<double> e(x.size(), 0.0);
  std::vector<std::vector<double>> columns;
  columns.reserve(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    e[j] = 1.0;
    columns.push_back(jvp(fn, x, e, mode).value);
    e[j] = 0.0;
  }
  const std::size_t m = columns.front().size();
  Tensor jac({m, x.size()});
  for (std::size_t j = 0; j < x.size(); ++j)
    for (std::size_t i = 0; i < m; ++i) jac(i, j) = columns[j][i];
  return jac;
}

/// log sqrt(det(J^T J)) of the map `fn` at `x`: the log volume change of an
/// injective map into a higher-dimensional embedding.
template <class F>
double log_gram_det(F&& fn, std::span<const double> x, JvpMode mode = JvpMode::Forward) {
  const Tensor jac = jacobian(fn, x, mode);
  const Tensor gram = matmul(jac.transposed(), jac);
  return 0.5 * linalg::log_det_spd(gram);
}

}  // namespace mdeq
