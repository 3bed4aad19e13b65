#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <json.hpp>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "mdeq/targets.hpp"

using namespace mdeq;

namespace {

std::vector<double> mean_of(const std::vector<ManifoldPoint>& pts) {
  std::vector<double> m(pts.front().coords.size(), 0.0);
  for (const auto& p : pts)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += p.coords[i];
  for (double& v : m) v /= static_cast<double>(pts.size());
  return m;
}

std::vector<double> var_of(const std::vector<ManifoldPoint>& pts) {
  const auto m = mean_of(pts);
  std::vector<double> v(m.size(), 0.0);
  for (const auto& p : pts)
    for (std::size_t i = 0; i < m.size(); ++i) v[i] += (p.coords[i] - m[i]) * (p.coords[i] - m[i]);
  for (double& x : v) x /= static_cast<double>(pts.size() - 1);
  return v;
}

}  // namespace

TEST_CASE("target constants match the printed values") {
  CHECK(target_constants_sha256() == "dff793c521239d87946fb812a1dcc97beff777f111910c80e82afd77a7317248");
  const auto s = make_target("sphere4");
  CHECK(s.manifold == Manifold::sphere(3));
  CHECK(s.kappa == 10.0);
  const std::vector<std::vector<double>> mu = {
      {0.763, 0.643, 0.071}, {0.455, -0.708, 0.540}, {0.396, 0.271, 0.878}, {-0.579, 0.488, -0.654}};
  CHECK(s.modes == mu);
  CHECK(s.log_upper_bound == doctest::Approx(std::log(4.0) + 10.0));
  const auto h = make_target("s3mix");
  const std::vector<std::vector<double>> mu3 = {{-0.129, 0.070, 0.659, -0.738},
                                                {-0.990, -0.076, 0.118, -0.017},
                                                {0.825, -0.484, 0.061, 0.285},
                                                {-0.801, 0.592, -0.024, 0.081}};
  CHECK(h.modes == mu3);
  CHECK(h.manifold == Manifold::sphere(4));
  CHECK(make_target("torus_unimodal").modes == std::vector<std::vector<double>>{{4.18, 5.96}});
  CHECK(make_target("torus_multimodal").modes ==
        std::vector<std::vector<double>>{{0.21, 2.85}, {1.89, 6.18}, {3.77, 1.56}});
  CHECK(make_target("torus_multimodal").log_upper_bound == doctest::Approx(std::log(3.0) + 2.0));
  CHECK(make_target("torus_unimodal").log_upper_bound == 2.0);
  const auto c = make_target("torus_correlated");
  CHECK(c.shift == 1.94);
  CHECK(c.log_upper_bound == 1.0);
  const auto so = make_target("so3_multimodal");
  CHECK(so.sigma == 0.5);
  CHECK(so.modes.size() == 3);
  CHECK(so.modes[1] == std::vector<double>{-1, 0, 0, 0, -1, 0, 0, 0, 1});
  CHECK(so.modes[2] == std::vector<double>{-1, 0, 0, 0, 1, 0, 0, 0, -1});
  CHECK(so.log_upper_bound == doctest::Approx(std::log(3.0)));
  const auto pr = make_target("procrustes");
  CHECK(pr.a.shape() == std::vector<std::size_t>{3, 10});
  CHECK(pr.b.shape() == std::vector<std::size_t>{3, 10});
  CHECK(pr.sigma == 1.0);
  CHECK(pr.log_upper_bound == 0.0);
  CHECK_THROWS_AS(make_target("sphere5"), ConfigError);
}

TEST_CASE("target values at known points") {
  const auto c = make_target("torus_correlated");
  CHECK(target_log_unnorm(c, torus_from_angles(std::vector<double>{1.94, 0.0})) == doctest::Approx(1.0).epsilon(1e-14));

  auto pr = make_target("procrustes");
  Rng rng(3);
  const auto o = haar_orthogonal(3, rng);
  pr.b = matmul(o.as_matrix(), pr.a);
  CHECK(std::abs(target_log_unnorm(pr, o)) < 1e-24);

  const auto so = make_target("so3_multimodal");
  const auto id = ManifoldPoint::make(Manifold::special_orthogonal(3), {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(target_log_unnorm(so, id) == doctest::Approx(std::log1p(2.0 * std::exp(-16.0))).epsilon(1e-12));
  CHECK(target_log_unnorm(so, id) == doctest::Approx(2.25e-7).epsilon(1e-2));

  const auto s = make_target("sphere4");
  CHECK_THROWS_AS(target_log_unnorm(s, id), FamilyMismatch);
  const auto u = make_target("torus_unimodal");
  CHECK(target_log_unnorm(u, torus_from_angles(std::vector<double>{4.18, 5.96})) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("procrustes fixture is reproducible") {
  const auto a = procrustes_fixture(20200917, 3, 10, 0.5, 0.3);
  const auto b = procrustes_fixture(20200917, 3, 10, 0.5, 0.3);
  CHECK(a.a == b.a);
  CHECK(a.b == b.b);
  const auto t = make_target("procrustes");
  CHECK(t.a == a.a);
  CHECK(t.b == a.b);
  CHECK(max_abs(matmul(a.o_star.transposed(), a.o_star) - Tensor::identity(3)) < 1e-12);
}

TEST_CASE("uniform sphere draws") {
  Rng rng(5);
  std::vector<ManifoldPoint> pts;
  for (int i = 0; i < 100000; ++i) pts.push_back(uniform_sphere(3, rng));
  for (const auto& p : pts) {
    double n = 0.0;
    for (double v : p.coords.data()) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-12);
  }
  const double sd = 1.0 / std::sqrt(3.0);
  for (double m : mean_of(pts)) CHECK(std::abs(m) < 3.0 * sd / std::sqrt(1e5));
  CHECK(uniform_log_density(Manifold::sphere(3)) == doctest::Approx(-std::log(4.0 * std::numbers::pi)));
  CHECK(uniform_log_density(Manifold::sphere(4)) == doctest::Approx(-std::log(2.0 * std::numbers::pi * std::numbers::pi)));
}

TEST_CASE("uniform torus angles pass a KS test") {
  Rng rng(6);
  const std::size_t n = 20000;
  std::vector<double> a0, a1;
  for (std::size_t i = 0; i < n; ++i) {
    const auto th = torus_angles(uniform_torus(2, rng));
    a0.push_back(th[0]);
    a1.push_back(th[1]);
  }
  for (auto* a : {&a0, &a1}) {
    std::sort(a->begin(), a->end());
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double f = (*a)[i] / kTwoPi;
      d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(f - static_cast<double>(i + 1) / n)});
    }
    CHECK(d < 1.63 / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("Haar orthogonal draws") {
  Rng rng(7);
  const std::size_t n = 10000;
  std::size_t positive = 0;
  std::vector<ManifoldPoint> pts;
  for (std::size_t i = 0; i < n; ++i) {
    const auto o = haar_orthogonal(3, rng);
    const Tensor m = o.as_matrix();
    CHECK(max_abs(matmul(m.transposed(), m) - Tensor::identity(3)) < 1e-10);
    if (linalg::determinant(m) > 0) ++positive;
    pts.push_back(o);
  }
  CHECK(std::abs(static_cast<double>(positive) / n - 0.5) < 3.0 / (2.0 * std::sqrt(static_cast<double>(n))));
  // Entries of a Haar O(3) matrix have variance 1/3.
  for (double m : mean_of(pts)) CHECK(std::abs(m) < 3.0 * std::sqrt(1.0 / 3.0) / std::sqrt(static_cast<double>(n)));
  for (int i = 0; i < 100; ++i) {
    const auto s = haar_special_orthogonal(3, rng);
    CHECK(constraint_check(s) < 1e-10);
  }
}

TEST_CASE("rejection sampling of a constant target accepts everything") {
  const auto r = rejection_sample(constant_target(Manifold::sphere(3), -1.5), 1000, 9);
  CHECK(r.acceptance_rate == 1.0);
  CHECK(r.points.size() == 1000);
}

TEST_CASE("rejection acceptance rate matches the normalizer") {
  const auto t = make_target("sphere4");
  const auto r = rejection_sample(t, 20000, 10);
  Rng rng(11);
  double z = 0.0;
  const std::size_t n = 1000000;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(target_log_unnorm(t, uniform_sphere(3, rng)) - t.log_upper_bound);
  z /= n;
  CHECK(r.acceptance_rate > 0.0);
  CHECK(std::abs(r.acceptance_rate / z - 1.0) < 0.05);
}

TEST_CASE("rejection samples match self-normalized importance sampling") {
  const auto t = make_target("sphere4");
  const auto r = rejection_sample(t, 100000, 12);
  const auto m = mean_of(r.points);
  const auto v = var_of(r.points);
  Rng rng(13);
  const std::size_t n = 1000000;
  std::vector<double> num(3, 0.0), num2(3, 0.0);
  double den = 0.0, den2 = 0.0;
  std::vector<ManifoldPoint> ys;
  std::vector<double> ws;
  for (std::size_t i = 0; i < n; ++i) {
    auto y = uniform_sphere(3, rng);
    const double w = std::exp(target_log_unnorm(t, y) - t.log_upper_bound);
    den += w;
    den2 += w * w;
    for (int j = 0; j < 3; ++j) num[j] += w * y.coords[j];
    ys.push_back(std::move(y));
    ws.push_back(w);
  }
  for (int j = 0; j < 3; ++j) {
    const double snis = num[j] / den;
    // Delta-method variance of the ratio estimator.
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += ws[i] * ws[i] * (ys[i].coords[j] - snis) * (ys[i].coords[j] - snis);
    const double var_snis = s / (den * den);
    const double se = std::sqrt(var_snis + v[j] / static_cast<double>(r.points.size()));
    CHECK(std::abs(m[j] - snis) < 3.0 * se);
  }
}

TEST_CASE("SO(3) rejection output does not depend on the proposal") {
  const auto t = make_target("so3_multimodal");
  const std::size_t n = 5000;
  const auto a = rejection_sample(t, n, 14);
  // Haar on SO(3) by determinant filtering instead of reflection.
  Rng rng(15);
  std::vector<ManifoldPoint> b;
  while (b.size() < n) {
    const auto o = haar_orthogonal(3, rng);
    if (linalg::determinant(o.as_matrix()) < 0) continue;
    const ManifoldPoint y{Manifold::special_orthogonal(3), o.coords};
    if (rng.uniform() < std::exp(target_log_unnorm(t, y) - t.log_upper_bound)) b.push_back(y);
  }
  const auto ma = mean_of(a.points), mb = mean_of(b);
  const auto va = var_of(a.points), vb = var_of(b);
  for (std::size_t j = 0; j < 9; ++j) CHECK(std::abs(ma[j] - mb[j]) < 3.0 * std::sqrt((va[j] + vb[j]) / static_cast<double>(n)));
}

TEST_CASE("every target stays below its bound") {
  for (const auto& name : target_names()) {
    CAPTURE(name);
    const auto t = make_target(name);
    Rng rng(16);
    double worst = -INFINITY;
    for (int i = 0; i < 1000000; ++i) worst = std::max(worst, target_log_unnorm(t, uniform_point(t.manifold, rng)));
    CHECK(worst <= t.log_upper_bound);
  }
}

TEST_CASE("a wrong bound aborts rejection sampling") {
  auto t = make_target("torus_unimodal");
  t.log_upper_bound = 0.5;
  CHECK_THROWS_AS(rejection_sample(t, 100, 17), BoundViolation);
}

TEST_CASE("rejection sampling is independent of the worker count") {
  const auto t = make_target("torus_multimodal");
  setenv("DEQ_THREADS", "1", 1);
  const auto a = rejection_sample(t, 5000, 18);
  setenv("DEQ_THREADS", "3", 1);
  const auto b = rejection_sample(t, 5000, 18);
  unsetenv("DEQ_THREADS");
  REQUIRE(a.points.size() == b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) CHECK(a.points[i].coords == b.points[i].coords);
  CHECK(a.acceptance_rate == b.acceptance_rate);
}

TEST_CASE("sample files round-trip") {
  const auto t = make_target("so3_multimodal");
  const auto r = rejection_sample(t, 50, 19);
  std::stringstream csv;
  write_samples_csv(csv, r.points, "config abc\nversion 1");
  const auto back = read_samples_csv(csv, t.manifold);
  REQUIRE(back.size() == 50);
  for (std::size_t i = 0; i < 50; ++i) CHECK(back[i].coords == r.points[i].coords);
  std::stringstream jl;
  write_samples_jsonl(jl, r.points, t);
  std::string line;
  int count = 0;
  while (std::getline(jl, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("coords").size() == 9);
    CHECK(j.at("log_unnorm").get<double>() <= t.log_upper_bound);
    ++count;
  }
  CHECK(count == 50);
}
