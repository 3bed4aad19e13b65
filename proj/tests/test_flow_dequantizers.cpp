#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "mdeq/dequantizers.hpp"
#include "mdeq/errors.hpp"
#include "mdeq/flow.hpp"

using namespace mdeq;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void randomize(FlowParameters& theta, Rng& rng, double scale) {
  theta.visit([&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v = scale * rng.normal();
  });
}

void randomize(DequantizerParameters& phi, Rng& rng, double scale) {
  phi.visit([&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v = scale * rng.normal();
  });
}

Tensor random_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

// Flow ------------------------------------------------------------------------

TEST_CASE("zero-initialized flow is the standard normal") {
  Rng rng(1);
  const auto f2 = flow_init({2, 4, 16, 3.0}, rng);
  const auto f3 = flow_init({3, 4, 32, 3.0}, rng);
  CHECK(flow_log_prob(f2, std::vector<double>{0, 0}) == doctest::Approx(-kLog2Pi).epsilon(1e-14));
  CHECK(flow_log_prob(f3, std::vector<double>{0, 0, 0}) == doctest::Approx(-1.5 * kLog2Pi).epsilon(1e-14));
  CHECK(flow_log_prob(f2, std::vector<double>{1, 0}) == doctest::Approx(-kLog2Pi - 0.5).epsilon(1e-14));
  CHECK(-1.5 * kLog2Pi == doctest::Approx(-2.7568).epsilon(1e-4));

  const auto [y, ld] = coupling_forward(f3.layers[0], Tensor::matrix({{0.3, -1.0, 2.0}}));
  CHECK(y == Tensor::matrix({{0.3, -1.0, 2.0}}));
  CHECK(ld[0] == 0.0);
}

TEST_CASE("flow_init rejects degenerate architectures") {
  Rng rng(0);
  CHECK_THROWS_AS(flow_init({1, 4, 8, 3.0}, rng), ConfigError);
  CHECK_THROWS_AS(flow_init({3, 1, 8, 3.0}, rng), ConfigError);
}

TEST_CASE("masks alternate and cover every coordinate") {
  for (std::size_t m : {2u, 3u, 5u, 9u}) {
    const auto a = conditioning_mask(m, 0), b = conditioning_mask(m, 1);
    CHECK(a.size() + b.size() == m);
    std::vector<int> seen(m, 0);
    for (auto i : a) ++seen[i];
    for (auto i : b) ++seen[i];
    for (int s : seen) CHECK(s == 1);
    CHECK(conditioning_mask(m, 2) == a);
  }
}

TEST_CASE("parameter count is fixed by the architecture") {
  Rng a(1), b(99);
  const auto fa = flow_init({3, 4, 32, 3.0}, a);
  const auto fb = flow_init({3, 4, 32, 3.0}, b);
  CHECK(fa.parameter_count() == fb.parameter_count());
  CHECK(fa.parameter_count() == 9484);
}

TEST_CASE("coupling layers invert and report the scale sum") {
  Rng rng(5);
  auto theta = flow_init({4, 2, 8, 3.0}, rng);
  randomize(theta, rng, 0.5);
  const Tensor x = random_rows(rng, 1000, 4);
  for (const auto& layer : theta.layers) {
    const auto [y, ld] = coupling_forward(layer, x);
    const auto [back, ild] = coupling_inverse(layer, y);
    CHECK(max_abs(back - x) < 1e-10);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      CHECK(ld[r] == doctest::Approx(-ild[r]).epsilon(1e-12));
      CHECK(std::abs(ld[r]) <= layer.scale_cap * static_cast<double>(layer.active.size()));
      for (auto c : layer.cond) CHECK(y(r, c) == x(r, c));
    }
    // Log-det equals the sum of scale outputs on the active coordinates.
    Tensor xc({x.rows(), layer.cond.size()});
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t j = 0; j < layer.cond.size(); ++j) xc(r, j) = x(r, layer.cond[j]);
    const Tensor s = layer.scale.forward(xc);
    for (std::size_t r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < s.cols(); ++j) sum += layer.scale_cap * std::tanh(s(r, j));
      CHECK(ld[r] == doctest::Approx(sum).epsilon(1e-12));
    }
  }
}

TEST_CASE("flow samples carry their exact log density") {
  Rng rng(7);
  auto theta = flow_init({3, 4, 16, 3.0}, rng);
  randomize(theta, rng, 0.4);
  const auto ev = flow_sample(theta, rng, 500);
  const auto lp = flow_log_prob(theta, ev.value);
  for (std::size_t i = 0; i < lp.size(); ++i) CHECK(std::abs(lp[i] - ev.log_density[i]) < 1e-10);
}

TEST_CASE("flow density normalizes") {
  Rng rng(11);
  auto theta = flow_init({2, 4, 8, 3.0}, rng);
  randomize(theta, rng, 0.3);
  // IS against N(0, 3^2 I).
  const std::size_t n = 100000;
  const double s = 3.0;
  Tensor x({n, 2});
  std::vector<double> log_prop(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = s * rng.normal(), b = s * rng.normal();
    x(i, 0) = a;
    x(i, 1) = b;
    log_prop[i] = -(a * a + b * b) / (2 * s * s) - kLog2Pi - 2 * std::log(s);
  }
  const auto lp = flow_log_prob(theta, x);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(lp[i] - log_prop[i]);
  z /= static_cast<double>(n);
  CHECK(std::abs(z - 1.0) < 0.02);
}

TEST_CASE("zero-initialized flow sample moments") {
  Rng rng(13);
  const auto theta = flow_init({3, 4, 8, 3.0}, rng);
  const std::size_t n = 100000;
  const Tensor x = flow_sample(theta, rng, n).value;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x(i, c);
    mean /= n;
    CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
  }
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      double cov = 0.0;
      for (std::size_t i = 0; i < n; ++i) cov += x(i, a) * x(i, b);
      cov /= n;
      CHECK(std::abs(cov - (a == b ? 1.0 : 0.0)) < 0.02);
    }
}

TEST_CASE("flow log-density gradient matches finite differences") {
  Rng rng(17);
  auto theta = flow_init({3, 2, 4, 3.0}, rng);
  randomize(theta, rng, 0.5);
  const Tensor x = random_rows(rng, 6, 3);
  ad::GraphBuilder gb;
  const auto g = gb.build(gb.sum(flow_log_prob_graph(gb, theta, gb.leaf("x"))));
  ad::Bindings b{{"x", x}};
  std::vector<std::string> names;
  for (auto& [name, t] : theta.parameters()) {
    b[name] = t;
    names.push_back(name);
  }
  const auto res = ad::gradient(g, b, names);
  double total = 0.0;
  for (double v : flow_log_prob(theta, x)) total += v;
  CHECK(res.value.item() == doctest::Approx(total).epsilon(1e-12));
  auto objective = [&](const FlowParameters& t) {
    double s = 0.0;
    for (double v : flow_log_prob(t, x)) s += v;
    return s;
  };
  for (const auto& name : names) {
    const Tensor& grad = res.grads.at(name);
    for (std::size_t i = 0; i < grad.size(); ++i) {
      auto params = theta.parameters();
      const double h = 1e-6;
      params[name][i] += h;
      FlowParameters plus = theta;
      plus.assign(params);
      params[name][i] -= 2 * h;
      FlowParameters minus = theta;
      minus.assign(params);
      const double fd = (objective(plus) - objective(minus)) / (2 * h);
      CHECK(std::abs(fd - grad[i]) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("flow parameters round-trip through the map") {
  Rng rng(19);
  auto theta = flow_init({3, 2, 4, 3.0}, rng);
  randomize(theta, rng, 1.0);
  auto copy = flow_init({3, 2, 4, 3.0}, rng);
  copy.assign(theta.parameters());
  CHECK(copy.parameters() == theta.parameters());
  auto params = theta.parameters();
  params.erase(params.begin());
  CHECK_THROWS_AS(copy.assign(params), ConfigError);
}

// Dequantizers ----------------------------------------------------------------

TEST_CASE("pinned radial log-normal") {
  const DequantizerSpec spec{DeqFamily::RadialLogNormal, 3, 8, 1, 3, 0.5};
  const auto phi = dequantizer_pinned(spec, 0.0, 1.0);
  const auto y = ManifoldPoint::make(Manifold::sphere(3), {0, 0, 1});
  const auto d = deq_transform(phi, y, std::vector<double>{0.0});
  CHECK(std::get<PositiveRadius>(d.z).r == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(d.log_q == doctest::Approx(-0.5 * kLog2Pi).epsilon(1e-12));
  CHECK(d.log_q == doctest::Approx(-0.9189).epsilon(1e-4));
  CHECK(deq_log_prob(phi, y, PositiveRadius{1.0}) == doctest::Approx(-0.9189385).epsilon(1e-6));
}

TEST_CASE("log-normal draws have mean log r equal to mu") {
  const DequantizerSpec spec{DeqFamily::RadialLogNormal, 3, 8, 1, 3, 0.5};
  const auto phi = dequantizer_pinned(spec, 0.7, 0.4);
  const auto y = ManifoldPoint::make(Manifold::sphere(3), {0.6, 0, 0.8});
  Rng rng(23);
  const std::size_t n = 100000;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = deq_sample(phi, y, rng);
    const double r = std::get<PositiveRadius>(d.z).r;
    s += std::log(r);
    if (i < 100) CHECK(d.log_q == doctest::Approx(deq_log_prob(phi, y, d.z)).epsilon(1e-12));
  }
  CHECK(std::abs(s / n - 0.7) < 3.0 * 0.4 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("TriPlus with p = 1 reduces to the radial log-normal") {
  const DequantizerSpec spec{DeqFamily::TriPlusGaussian, 1, 8, 1, 3, 0.5};
  const auto phi = dequantizer_pinned(spec, 0.0, 1.0);
  const auto y = ManifoldPoint::make(Manifold::orthogonal(1), {1.0});
  CHECK(deq_log_prob(phi, y, TriPlus{Tensor::matrix({{1.0}})}) == doctest::Approx(-0.9189385).epsilon(1e-6));
}

TEST_CASE("uniform Beta dequantizer") {
  Rng rng(29);
  const DequantizerSpec spec{DeqFamily::IntervalBeta, 1, 8, 1, 3, 0.5};
  const auto phi = dequantizer_init(spec, rng);
  const auto y = ManifoldPoint::make(Manifold::integer(), {3.0});
  for (double u : {0.0, 1e-8, 0.25, 0.5, 0.999, 1.0 - 1e-8}) CHECK(std::abs(deq_log_prob(phi, y, UnitInterval{u})) < 1e-9);
  CHECK_THROWS_AS(deq_log_prob(phi, y, UnitInterval{1.0}), OutOfSupport);
  CHECK_THROWS_AS(deq_log_prob(phi, y, UnitInterval{-0.1}), OutOfSupport);
}

TEST_CASE("dequantizer densities integrate to one") {
  Rng rng(31);
  using boost::math::quadrature::gauss;
  using boost::math::quadrature::gauss_kronrod;

  SUBCASE("radial log-normal") {
    const DequantizerSpec spec{DeqFamily::RadialLogNormal, 3, 8, 1, 3, 0.5};
    auto phi = dequantizer_init(spec, rng);
    randomize(phi, rng, 0.3);
    const auto y = ManifoldPoint::make(Manifold::sphere(3), {0, 0.6, 0.8});
    auto f = [&](double t) { return std::exp(deq_log_prob(phi, y, PositiveRadius{std::exp(t)}) + t); };
    CHECK(std::abs(gauss_kronrod<double, 61>::integrate(f, -30.0, 30.0, 15, 1e-12) - 1.0) < 1e-6);
  }
  SUBCASE("product radial log-normal") {
    const DequantizerSpec spec{DeqFamily::ProductRadialLogNormal, 4, 8, 2, 3, 0.5};
    auto phi = dequantizer_init(spec, rng);
    randomize(phi, rng, 0.3);
    const auto y = torus_from_angles(std::vector<double>{0.4, 2.0});
    auto f = [&](double a) {
      return gauss<double, 60>::integrate(
          [&](double b) {
            return std::exp(deq_log_prob(phi, y, RadiusVector{{std::exp(a), std::exp(b)}}) + a + b);
          },
          -12.0, 12.0);
    };
    CHECK(std::abs(gauss<double, 60>::integrate(f, -12.0, 12.0) - 1.0) < 1e-5);
  }
  SUBCASE("TriPlus p = 2") {
    const DequantizerSpec spec{DeqFamily::TriPlusGaussian, 4, 8, 2, 3, 0.5};
    auto phi = dequantizer_init(spec, rng);
    randomize(phi, rng, 0.1);
    const auto y = ManifoldPoint::make(Manifold::orthogonal(2), {0, 1, 1, 0});
    // Integrate each coordinate over mu +- 9 sigma of its own head.
    const Tensor nat = phi.net.forward(Tensor({1, 4}, y.coords.storage()));
    auto window = [&](std::size_t i) {
      const double mu = std::clamp(nat[i], -kLogScaleClamp, kLogScaleClamp);
      const double sd = std::clamp(std::log1p(std::exp(nat[3 + i])), kSigmaMin, kSigmaMax);
      return std::pair{mu - 9 * sd, mu + 9 * sd};
    };
    const auto [a0, a1] = window(0);
    const auto [b0, b1] = window(1);
    const auto [c0, c1] = window(2);
    using g = gauss<double, 50>;
    auto f = [&](double a) {
      return g::integrate(
          [&](double c) {
            return g::integrate(
                [&](double b) {
                  const Tensor l = Tensor::matrix({{std::exp(a), 0.0}, {b, std::exp(c)}});
                  return std::exp(deq_log_prob(phi, y, TriPlus{l}) + a + c);
                },
                b0, b1);
          },
          c0, c1);
    };
    CHECK(std::abs(g::integrate(f, a0, a1) - 1.0) < 1e-5);
  }
  SUBCASE("interval Beta") {
    const DequantizerSpec spec{DeqFamily::IntervalBeta, 1, 8, 1, 3, 0.5};
    auto phi = dequantizer_init(spec, rng);
    randomize(phi, rng, 0.2);
    const auto y = ManifoldPoint::make(Manifold::integer(), {-2.0});
    auto f = [&](double u) { return std::exp(deq_log_prob(phi, y, UnitInterval{u})); };
    CHECK(std::abs(gauss_kronrod<double, 61>::integrate(f, 0.0, 1.0, 15, 1e-12) - 1.0) < 1e-5);
  }
  SUBCASE("winding categorical") {
    const DequantizerSpec spec{DeqFamily::WindingCategorical, 4, 8, 2, 2, 0.5};
    auto phi = dequantizer_init(spec, rng);
    randomize(phi, rng, 0.5);
    const auto y = torus_from_angles(std::vector<double>{1.0, 5.0});
    double s = 0.0;
    for (std::int64_t a = -2; a <= 2; ++a)
      for (std::int64_t b = -2; b <= 2; ++b) s += std::exp(winding_log_prob(phi, y, std::vector<std::int64_t>{a, b}));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("winding categorical at initialization") {
  Rng rng(37);
  const auto y = torus_from_angles(std::vector<double>{1.0});
  const auto phi = dequantizer_init({DeqFamily::WindingCategorical, 2, 8, 1, 3, 0.5}, rng);
  for (std::int64_t k = -3; k <= 3; ++k)
    CHECK(winding_log_prob(phi, y, std::vector<std::int64_t>{k}) == doctest::Approx(std::log(1.0 / 7.0)).epsilon(1e-12));
  CHECK_THROWS_AS(winding_log_prob(phi, y, std::vector<std::int64_t>{4}), OutOfSupport);
  const auto phi0 = dequantizer_init({DeqFamily::WindingCategorical, 2, 8, 1, 0, 0.5}, rng);
  CHECK(winding_log_prob(phi0, y, std::vector<std::int64_t>{0}) == 0.0);
}

TEST_CASE("dequantizers are non-vanishing near the support boundary") {
  Rng rng(41);
  const auto ys = ManifoldPoint::make(Manifold::sphere(3), {1, 0, 0});
  auto radial = dequantizer_init({DeqFamily::RadialLogNormal, 3, 8, 1, 3, 0.5}, rng);
  CHECK(std::isfinite(deq_log_prob(radial, ys, PositiveRadius{1e-8})));
  CHECK_THROWS_AS(deq_log_prob(radial, ys, PositiveRadius{0.0}), OutOfSupport);
  const auto yo = ManifoldPoint::make(Manifold::orthogonal(2), {1, 0, 0, 1});
  auto tri = dequantizer_init({DeqFamily::TriPlusGaussian, 4, 8, 2, 3, 0.5}, rng);
  CHECK(std::isfinite(deq_log_prob(tri, yo, TriPlus{Tensor::matrix({{1e-8, 0}, {0.3, 1e-8}})})));
  CHECK_THROWS_AS(deq_log_prob(tri, yo, TriPlus{Tensor::matrix({{1, 0}, {0.3, -1}})}), OutOfSupport);
  auto beta = dequantizer_init({DeqFamily::IntervalBeta, 1, 8, 1, 3, 0.5}, rng);
  randomize(beta, rng, 0.5);
  const auto yi = ManifoldPoint::make(Manifold::integer(), {0.0});
  CHECK(std::isfinite(deq_log_prob(beta, yi, UnitInterval{1e-8})));
  CHECK(std::isfinite(deq_log_prob(beta, yi, UnitInterval{1.0 - 1e-8})));
}

TEST_CASE("family mismatches are rejected") {
  Rng rng(43);
  const auto radial = dequantizer_init({DeqFamily::RadialLogNormal, 3, 8, 1, 3, 0.5}, rng);
  const auto yt = torus_from_angles(std::vector<double>{1.0, 2.0});
  CHECK_THROWS_AS(deq_sample(radial, yt, rng), FamilyMismatch);
  const auto ys = ManifoldPoint::make(Manifold::sphere(3), {1, 0, 0});
  CHECK_THROWS_AS(deq_log_prob(radial, ys, UnitInterval{0.5}), FamilyMismatch);
  CHECK(deq_family_from_string(to_string(DeqFamily::IntervalBeta)) == DeqFamily::IntervalBeta);
  CHECK_THROWS_AS(deq_family_from_string("bogus"), ConfigError);
}

TEST_CASE("graph sampler matches the plain sampler") {
  Rng rng(47);
  struct Case {
    DequantizerSpec spec;
    ManifoldPoint y;
  };
  std::vector<Case> cases = {
      {{DeqFamily::RadialLogNormal, 3, 8, 1, 3, 0.5}, ManifoldPoint::make(Manifold::sphere(3), {0, 0.6, 0.8})},
      {{DeqFamily::ProductRadialLogNormal, 4, 8, 2, 3, 0.5}, torus_from_angles(std::vector<double>{0.3, 4.0})},
      {{DeqFamily::TriPlusGaussian, 4, 8, 2, 3, 0.5}, ManifoldPoint::make(Manifold::orthogonal(2), {0, 1, 1, 0})},
      {{DeqFamily::IntervalBeta, 1, 8, 1, 3, 0.5}, ManifoldPoint::make(Manifold::integer(), {2.0})},
  };
  for (auto& c : cases) {
    auto phi = dequantizer_init(c.spec, rng);
    randomize(phi, rng, 0.3);
    const std::size_t d = aux_dim(c.spec);
    std::vector<double> e(d);
    for (double& v : e) v = rng.normal();
    const auto draw = deq_transform(phi, c.y, e);
    ad::GraphBuilder gb;
    const auto dg = deq_sample_graph(gb, phi, gb.leaf("y"), gb.leaf("noise"));
    const auto g = gb.build({{"log_q", dg.log_q}, {"z", dg.z}});
    ad::Bindings b{{"y", c.y.coords}, {"noise", Tensor::row(e)}};
    for (auto& [name, t] : phi.parameters()) b[name] = t;
    const auto ev = ad::evaluate_all(g, b);
    CHECK(ev.output("log_q").item() == doctest::Approx(draw.log_q).epsilon(1e-9));
    CHECK(draw.log_q == doctest::Approx(deq_log_prob(phi, c.y, draw.z)).epsilon(1e-9));
  }
}
