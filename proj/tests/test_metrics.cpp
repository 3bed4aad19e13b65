#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "mdeq/metrics.hpp"

using namespace mdeq;

namespace {

ManifoldPoint vec(std::vector<double> v) {
  const std::size_t d = v.size();
  return ManifoldPoint{Manifold::sphere(d), Tensor({1, d}, std::move(v))};
}

struct SphereReference {
  double z;
  double mean_lu;   // uniform average of log_unnorm
  double z2;        // integral of exp(2 log_unnorm)
  double p_mean_lu; // average of log_unnorm under the target
};

// Integrals over S^2 in spherical coordinates, adaptive Gauss-Kronrod in both angles.
SphereReference sphere_reference(const TargetSpec& t) {
  using gk = boost::math::quadrature::gauss_kronrod<double, 31>;
  auto integrate = [&](auto g) {
    return gk::integrate(
        [&](double th) {
          return std::sin(th) * gk::integrate(
                                    [&](double ph) {
                                      const auto y = ManifoldPoint::make(
                                          Manifold::sphere(3),
                                          {std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)});
                                      return g(target_log_unnorm(t, y));
                                    },
                                    0.0, 2.0 * std::numbers::pi, 10, 1e-13);
        },
        0.0, std::numbers::pi, 10, 1e-13);
  };
  SphereReference r;
  r.z = integrate([](double lu) { return std::exp(lu); });
  r.mean_lu = integrate([](double lu) { return lu; }) / (4.0 * std::numbers::pi);
  r.z2 = integrate([](double lu) { return std::exp(2.0 * lu); });
  r.p_mean_lu = integrate([](double lu) { return lu * std::exp(lu); }) / r.z;
  return r;
}

}  // namespace

TEST_CASE("moment errors are norms") {
  std::vector<ManifoldPoint> a(10, vec({0.0, 0.0})), b(10, vec({3.0, 4.0}));
  const auto e = moment_errors(a, b);
  CHECK(e.mean_error == 5.0);
  CHECK(e.cov_error == 0.0);
  const auto same = moment_errors(b, b);
  CHECK(same.mean_error == 0.0);
  CHECK(same.cov_error == 0.0);
  CHECK_THROWS_AS(moment_errors(a, {vec({1.0, 2.0, 3.0})}), ShapeError);
  CHECK_THROWS_AS(moment_errors({}, a), ConfigError);
}

TEST_CASE("moment errors of Gaussian samples match the closed form") {
  Rng rng(1);
  const std::size_t n = 10000;
  std::vector<ManifoldPoint> a, b;
  for (std::size_t i = 0; i < n; ++i) {
    a.push_back(vec({rng.normal(), rng.normal()}));
    b.push_back(vec({0.3 + rng.normal(), 0.4 + rng.normal()}));
  }
  const auto e = moment_errors(a, b);
  const double nn = static_cast<double>(n);
  CHECK(std::abs(e.mean_error - 0.5) < 3.0 * std::sqrt(2.0 / nn));
  // E|dC|_F^2 = 12/n for two independent 2-D standard normal sample covariances.
  CHECK(e.cov_error < 3.0 * std::sqrt(12.0 / nn));
  const auto r = moment_errors(b, a);
  CHECK(r.mean_error == e.mean_error);
  CHECK(r.cov_error == e.cov_error);
}

TEST_CASE("relative ESS edge cases") {
  CHECK(relative_ess_from_weights(std::vector<double>(17, 0.3)) == 1.0);
  std::vector<double> one(20, 0.0);
  one[7] = 2.5;
  CHECK(relative_ess_from_weights(one) == 1.0 / 20.0);
  CHECK(relative_ess_from_log_weights(std::vector<double>(9, -1234.5)) == 1.0);
  CHECK_THROWS_AS(relative_ess_from_weights(std::vector<double>(3, 0.0)), NumericalError);
  CHECK_THROWS_AS(relative_ess_from_weights({1.0, std::nan("")}), NumericalError);
  CHECK_THROWS_AS(relative_ess_from_log_weights({-std::numeric_limits<double>::infinity()}), NumericalError);
}

TEST_CASE("relative ESS is invariant to weight scale") {
  Rng rng(2);
  std::vector<double> w(1000), lw(1000);
  for (std::size_t i = 0; i < w.size(); ++i) {
    lw[i] = 2.0 * rng.normal();
    w[i] = std::exp(lw[i]);
  }
  const double base = relative_ess_from_weights(w);
  for (double c : {0.125, 4.0, 1024.0}) {
    auto s = w;
    for (double& v : s) v *= c;
    CHECK(relative_ess_from_weights(s) == base);
  }
  for (double c : {0.37, 19.0, 1e-200}) {
    auto s = w;
    for (double& v : s) v *= c;
    CHECK(relative_ess_from_weights(s) == doctest::Approx(base).epsilon(1e-13));
  }
  for (double c : {-700.0, 0.0, 700.0}) {
    auto s = lw;
    for (double& v : s) v += c;
    CHECK(relative_ess_from_log_weights(s) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("uniform model against a constant target recovers the sphere area") {
  const auto z = normalizing_constant(uniform_density(Manifold::sphere(3)), constant_target(Manifold::sphere(3), 0.0),
                                      100000, 3);
  CHECK(std::abs(z.z_hat / (4.0 * std::numbers::pi) - 1.0) < 0.01);
  CHECK(z.relative_se == 0.0);
}

TEST_CASE("a model equal to the target has unit normalizer and zero KL") {
  const auto t = make_target("sphere4");
  DensityModel exact;
  exact.name = "exact";
  exact.manifold = t.manifold;
  exact.sample = [t](Rng& rng, std::size_t n) { return rejection_sample(t, n, rng.next()).points; };
  exact.log_density = [t](const std::vector<ManifoldPoint>& pts) {
    std::vector<double> out;
    for (const auto& p : pts) out.push_back(target_log_unnorm(t, p));
    return out;
  };
  const auto z = normalizing_constant(exact, t, 2000, 4);
  CHECK(z.z_hat == 1.0);
  CHECK(z.relative_se == 0.0);
  const auto kl = kl_divergences(exact, t, 2000, 5);
  CHECK(kl.kl_q_p == 0.0);
  CHECK(kl.kl_p_q == 0.0);
  const auto r = evaluate_metrics(exact, t, 2000, 6);
  CHECK(r.relative_ess == 1.0);
  CHECK(r.z_hat == 1.0);
  CHECK(r.mean_mse < 0.1);
}

TEST_CASE("uniform model against sphere4 matches quadrature") {
  const auto t = make_target("sphere4");
  const auto ref = sphere_reference(t);
  const double log_q = -std::log(4.0 * std::numbers::pi);
  const auto u = uniform_density(t.manifold);
  const std::size_t n = 200000;

  const auto z = normalizing_constant(u, t, n, 7);
  CHECK(std::abs(z.z_hat / ref.z - 1.0) < 0.005);
  CHECK(std::abs(z.z_hat / ref.z - 1.0) < 3.0 * z.relative_se);

  const auto kl = kl_divergences(u, t, n, 8);
  const double fwd = log_q - ref.mean_lu + std::log(ref.z);
  const double rev = ref.p_mean_lu - std::log(ref.z) - log_q;
  CHECK(std::abs(kl.kl_q_p / fwd - 1.0) < 0.02);
  CHECK(std::abs(kl.kl_p_q / rev - 1.0) < 0.02);
  CHECK(kl.kl_q_p > -3.0 * kl.se_q_p);
  CHECK(kl.kl_p_q > -3.0 * kl.se_p_q);

  const double ess = ref.z * ref.z / (4.0 * std::numbers::pi * ref.z2);
  CHECK(std::abs(relative_ess(u, t, n, 9) / ess - 1.0) < 0.02);
}

TEST_CASE("forward KL is invariant to a constant shift of the target") {
  Rng rng(10);
  std::vector<double> lq(500), lu(500), tq(500), tu(500);
  for (std::size_t i = 0; i < lq.size(); ++i) {
    lq[i] = rng.normal();
    lu[i] = rng.normal();
    tq[i] = rng.normal();
    tu[i] = rng.normal();
  }
  auto kl_for = [&](double c) {
    auto su = lu, st = tu;
    for (double& v : su) v += c;
    for (double& v : st) v += c;
    std::vector<double> lw(lq.size());
    for (std::size_t i = 0; i < lw.size(); ++i) lw[i] = su[i] - lq[i];
    return kl_from_log_values(lq, su, tq, st, std::log(normalizer_from_log_weights(lw).z_hat));
  };
  const auto a = kl_for(0.0);
  for (double c : {-50.0, 3.7, 400.0}) {
    const auto b = kl_for(c);
    CHECK(std::abs(b.kl_q_p - a.kl_q_p) < 1e-10);
    CHECK(std::abs(b.kl_p_q - a.kl_p_q) < 1e-10);
  }
}

TEST_CASE("dequantized densities integrate to one against the uniform measure") {
  // E_uniform[q(y) / u(y)] = 1; the importance-sampled q is unbiased.
  for (const auto& manifold : {Manifold::sphere(3), Manifold::torus(2), Manifold::special_orthogonal(3)}) {
    CAPTURE(manifold.name());
    Rng rng(11);
    const auto model = make_model(manifold, ModelSpec{}, rng);
    const auto pts = uniform_density(manifold).sample(rng, 4000);
    const auto lq = marginal_log_density(model, pts, 16, 12);
    std::vector<double> lw(lq.size());
    for (std::size_t i = 0; i < lw.size(); ++i) lw[i] = lq[i] - uniform_log_density(manifold);
    const auto z = normalizer_from_log_weights(lw);
    if (manifold.kind == ManifoldKind::Torus) {
      // Radial weights on the torus have infinite variance, so the SE understates the error.
      CHECK(std::abs(z.z_hat - 1.0) < 0.03);
    } else {
      CHECK(std::abs(z.z_hat - 1.0) < 4.0 * z.relative_se);
      CHECK(z.relative_se < 0.1);
    }
  }
}

TEST_CASE("metrics report JSON has the fixed fields") {
  MetricsReport r{0.1, 0.2, 0.3, 0.4, 0.5, 12.25, 100};
  const auto text = r.to_json();
  CHECK(text ==
        "{\n  \"mean_mse\": 0.1,\n  \"cov_mse\": 0.2,\n  \"kl_q_p\": 0.3,\n  \"kl_p_q\": 0.4,\n  \"relative_ess\": 0.5,\n"
        "  \"z_hat\": 12.25,\n  \"n_samples\": 100\n}");
  CHECK(MetricsReport::from_json(text) == r);
}

TEST_CASE("evaluate_metrics on a fresh model is finite and in range") {
  const auto t = make_target("torus_unimodal");
  Rng rng(13);
  const auto model = make_model(t.manifold, ModelSpec{}, rng);
  const auto r = evaluate_metrics(dequantized_density(model, 8, 14), t, 500, 15);
  CHECK(std::isfinite(r.mean_mse));
  CHECK(std::isfinite(r.kl_q_p));
  CHECK(std::isfinite(r.kl_p_q));
  CHECK(r.relative_ess > 0.0);
  CHECK(r.relative_ess <= 1.0);
  CHECK(r.z_hat > 0.0);
  CHECK(r.n_samples == 500);
  const auto again = evaluate_metrics(dequantized_density(model, 8, 14), t, 500, 15);
  CHECK(again == r);
  CHECK_THROWS_AS(evaluate_metrics(uniform_density(Manifold::sphere(3)), t, 10, 1), FamilyMismatch);
}
