#include "mdeq/dequantizers.hpp"

#include <algorithm>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <numbers>

#include "mdeq/errors.hpp"

namespace mdeq {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
double sigma_of(double raw) { return std::clamp(softplus(raw), kSigmaMin, kSigmaMax); }
double mu_of(double raw) { return std::clamp(raw, -kLogScaleClamp, kLogScaleClamp); }
double beta_param(double raw) { return std::clamp(softplus(raw), kBetaMin, kBetaMax); }

bool is_lognormal_family(DeqFamily f) {
  return f == DeqFamily::RadialLogNormal || f == DeqFamily::ProductRadialLogNormal ||
         f == DeqFamily::TriPlusGaussian;
}

// Entries of z that are log-normal (positive); the rest are normal.
std::vector<double> positive_mask(const DequantizerSpec& spec) {
  const std::size_t d = aux_dim(spec);
  if (spec.family != DeqFamily::TriPlusGaussian) return std::vector<double>(d, 1.0);
  std::vector<double> mask;
  for (std::size_t i = 0; i < spec.size; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask.push_back(i == j ? 1.0 : 0.0);
  return mask;
}

std::vector<double> natural_params(const DequantizerParameters& phi, const ManifoldPoint& y) {
  if (!family_matches(phi.spec, y.manifold))
    throw FamilyMismatch(to_string(phi.spec.family) + " cannot dequantize " + y.manifold.name());
  const auto in = conditioner_input(y);
  const Tensor out = phi.net.forward(Tensor({1, in.size()}, in));
  return out.storage();
}

double std_normal_cdf(double e) { return 0.5 * std::erfc(-e / std::numbers::sqrt2); }

// u = I^{-1}_{a,b}(Phi(eps)) kept inside [0, 1).
double beta_icdf(double a, double b, double eps) {
  const double v = std::clamp(std_normal_cdf(eps), 1e-15, 1.0 - 1e-15);
  double u = boost::math::ibeta_inv(a, b, v);
  if (u >= 1.0) u = std::nextafter(1.0, 0.0);
  return u;
}

double beta_log_pdf(double a, double b, double u) {
  double s = -(std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  if (a != 1.0) s += (a - 1.0) * std::log(u);
  if (b != 1.0) s += (b - 1.0) * std::log1p(-u);
  return s;
}

// Implicit reparameterization gradients of u(a, b, eps).
double beta_icdf_with_grad(double a, double b, double eps, std::span<double> grad) {
  const double u = beta_icdf(a, b, eps);
  if (!grad.empty()) {
    const double pdf = std::exp(beta_log_pdf(a, b, u));
    const double ha = 1e-6 * std::max(1.0, a), hb = 1e-6 * std::max(1.0, b);
    const double dfa = (boost::math::ibeta(a + ha, b, u) - boost::math::ibeta(a - ha, b, u)) / (2 * ha);
    const double dfb = (boost::math::ibeta(a, b + hb, u) - boost::math::ibeta(a, b - hb, u)) / (2 * hb);
    const double phi_eps = std::exp(-0.5 * eps * eps) / std::sqrt(2.0 * std::numbers::pi);
    grad[0] = -dfa / pdf;
    grad[1] = -dfb / pdf;
    grad[2] = phi_eps / pdf;
  }
  return u;
}

double beta_log_pdf_with_grad(double a, double b, double u, std::span<double> grad) {
  if (!grad.empty()) {
    const double dab = boost::math::digamma(a + b);
    grad[0] = std::log(u) - boost::math::digamma(a) + dab;
    grad[1] = std::log1p(-u) - boost::math::digamma(b) + dab;
    grad[2] = (a - 1.0) / u - (b - 1.0) / (1.0 - u);
  }
  return beta_log_pdf(a, b, u);
}

}  // namespace

std::string to_string(DeqFamily f) {
  switch (f) {
    case DeqFamily::RadialLogNormal: return "RadialLogNormal";
    case DeqFamily::ProductRadialLogNormal: return "ProductRadialLogNormal";
    case DeqFamily::TriPlusGaussian: return "TriPlusGaussian";
    case DeqFamily::IntervalBeta: return "IntervalBeta";
    case DeqFamily::WindingCategorical: return "WindingCategorical";
  }
  return "?";
}

DeqFamily deq_family_from_string(const std::string& s) {
  for (auto f : {DeqFamily::RadialLogNormal, DeqFamily::ProductRadialLogNormal, DeqFamily::TriPlusGaussian,
                 DeqFamily::IntervalBeta, DeqFamily::WindingCategorical})
    if (to_string(f) == s) return f;
  throw ConfigError("unknown dequantizer family '" + s + "'");
}

std::size_t aux_dim(const DequantizerSpec& spec) {
  switch (spec.family) {
    case DeqFamily::RadialLogNormal: return 1;
    case DeqFamily::ProductRadialLogNormal: return spec.size;
    case DeqFamily::TriPlusGaussian: return tri_size(spec.size);
    case DeqFamily::IntervalBeta: return 1;
    case DeqFamily::WindingCategorical: return spec.size;
  }
  return 0;
}

std::size_t natural_dim(const DequantizerSpec& spec) {
  if (spec.family == DeqFamily::WindingCategorical) return spec.size * (2 * spec.window + 1);
  return 2 * aux_dim(spec);
}

bool family_matches(const DequantizerSpec& spec, const Manifold& m) {
  if (spec.in_dim != m.embed_dim()) return false;
  switch (spec.family) {
    case DeqFamily::RadialLogNormal: return m.kind == ManifoldKind::Sphere;
    case DeqFamily::ProductRadialLogNormal:
    case DeqFamily::WindingCategorical: return m.kind == ManifoldKind::Torus && m.m == spec.size;
    case DeqFamily::TriPlusGaussian: return m.is_matrix() && m.p == spec.size;
    case DeqFamily::IntervalBeta: return m.kind == ManifoldKind::Integer;
  }
  return false;
}

std::vector<double> conditioner_input(const ManifoldPoint& y) { return y.coords.storage(); }

ParameterMap DequantizerParameters::parameters() const {
  ParameterMap out;
  visit([&](const std::string& name, const Tensor& t) { out.emplace(name, t); });
  return out;
}

void DequantizerParameters::assign(const ParameterMap& params) {
  visit([&](const std::string& name, Tensor& t) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing dequantizer parameter '" + name + "'");
    if (it->second.shape() != t.shape()) throw ShapeError("dequantizer parameter '" + name + "' has wrong shape");
    t = it->second;
  });
}

namespace {

void set_output_bias(DequantizerParameters& phi, double mu, double sigma) {
  const auto& spec = phi.spec;
  Tensor& b = phi.net.b3;
  const std::size_t d = aux_dim(spec);
  switch (spec.family) {
    case DeqFamily::RadialLogNormal:
    case DeqFamily::ProductRadialLogNormal:
    case DeqFamily::TriPlusGaussian:
      for (std::size_t i = 0; i < d; ++i) {
        b[i] = mu;
        b[d + i] = softplus_inverse(sigma);
      }
      break;
    case DeqFamily::IntervalBeta:
      b[0] = softplus_inverse(1.0);
      b[1] = softplus_inverse(1.0);
      break;
    case DeqFamily::WindingCategorical:
      for (double& v : b.data()) v = 0.0;
      break;
  }
}

}  // namespace

DequantizerParameters dequantizer_init(const DequantizerSpec& spec, Rng& rng) {
  if (spec.in_dim < 1 || spec.hidden < 1 || spec.size < 1) throw ConfigError("dequantizer_init: empty dimension");
  if (!(spec.init_sigma >= kSigmaMin && spec.init_sigma <= kSigmaMax))
    throw ConfigError("dequantizer_init: init_sigma outside [1e-3, 20]");
  DequantizerParameters phi;
  phi.spec = spec;
  phi.net = Mlp::init(spec.in_dim, spec.hidden, natural_dim(spec), rng);
  set_output_bias(phi, 0.0, spec.init_sigma);
  return phi;
}

DequantizerParameters dequantizer_pinned(const DequantizerSpec& spec, double mu, double sigma) {
  Rng rng(0);
  DequantizerParameters phi = dequantizer_init(spec, rng);
  set_output_bias(phi, mu, sigma);
  return phi;
}

DequantizationDraw deq_sample(const DequantizerParameters& phi, const ManifoldPoint& y, Rng& rng) {
  std::vector<double> noise(aux_dim(phi.spec));
  if (phi.spec.family == DeqFamily::WindingCategorical) {
    for (double& e : noise) e = rng.uniform();
  } else {
    for (double& e : noise) e = rng.normal();
  }
  return deq_transform(phi, y, noise);
}

DequantizationDraw deq_transform(const DequantizerParameters& phi, const ManifoldPoint& y,
                                 std::span<const double> noise) {
  const auto& spec = phi.spec;
  const std::size_t d = aux_dim(spec);
  if (noise.size() != d) throw ShapeError("deq_transform: noise has wrong size");
  const auto nat = natural_params(phi, y);
  DequantizationDraw out;
  out.noise.assign(noise.begin(), noise.end());
  if (is_lognormal_family(spec.family)) {
    const auto pos = positive_mask(spec);
    std::vector<double> z(d);
    double lq = -static_cast<double>(d) * kHalfLog2Pi;
    for (std::size_t i = 0; i < d; ++i) {
      const double mu = mu_of(nat[i]), sigma = sigma_of(nat[d + i]);
      const double h = mu + sigma * noise[i];
      z[i] = pos[i] > 0 ? std::exp(h) : h;
      lq += -0.5 * noise[i] * noise[i] - std::log(sigma) - (pos[i] > 0 ? h : 0.0);
    }
    out.log_q = lq;
    if (spec.family == DeqFamily::RadialLogNormal) out.z = PositiveRadius{z[0]};
    else if (spec.family == DeqFamily::ProductRadialLogNormal) out.z = RadiusVector{z};
    else out.z = TriPlus{tri_from_free(z, spec.size)};
  } else if (spec.family == DeqFamily::IntervalBeta) {
    const double a = beta_param(nat[0]), b = beta_param(nat[1]);
    const double u = beta_icdf(a, b, noise[0]);
    out.z = UnitInterval{u};
    out.log_q = beta_log_pdf(a, b, u);
  } else {
    const std::size_t width = 2 * spec.window + 1;
    WindingIndex k{std::vector<std::int64_t>(spec.size)};
    for (std::size_t c = 0; c < spec.size; ++c) {
      const double* logits = nat.data() + c * width;
      const double mx = *std::max_element(logits, logits + width);
      double total = 0.0;
      for (std::size_t j = 0; j < width; ++j) total += std::exp(logits[j] - mx);
      double acc = 0.0;
      std::size_t pick = width - 1;
      for (std::size_t j = 0; j < width; ++j) {
        acc += std::exp(logits[j] - mx) / total;
        if (noise[c] < acc) {
          pick = j;
          break;
        }
      }
      k.k[c] = static_cast<std::int64_t>(pick) - static_cast<std::int64_t>(spec.window);
    }
    out.log_q = winding_log_prob(phi, y, k.k);
    out.z = std::move(k);
  }
  if (!std::isfinite(out.log_q)) throw NumericalError("deq_sample: non-finite log density");
  return out;
}

double deq_log_prob(const DequantizerParameters& phi, const ManifoldPoint& y, const AuxiliaryCoordinate& z) {
  const auto& spec = phi.spec;
  const std::size_t d = aux_dim(spec);
  std::vector<double> values;
  switch (spec.family) {
    case DeqFamily::RadialLogNormal: {
      const auto* r = std::get_if<PositiveRadius>(&z);
      if (r == nullptr) throw FamilyMismatch("RadialLogNormal expects a radius");
      values = {r->r};
      break;
    }
    case DeqFamily::ProductRadialLogNormal: {
      const auto* r = std::get_if<RadiusVector>(&z);
      if (r == nullptr || r->r.size() != d) throw FamilyMismatch("ProductRadialLogNormal expects a radius vector");
      values = r->r;
      break;
    }
    case DeqFamily::TriPlusGaussian: {
      const auto* l = std::get_if<TriPlus>(&z);
      if (l == nullptr || l->l.rows() != spec.size || l->l.cols() != spec.size)
        throw FamilyMismatch("TriPlusGaussian expects a p x p lower-triangular matrix");
      for (std::size_t i = 0; i < spec.size; ++i)
        for (std::size_t j = i + 1; j < spec.size; ++j)
          if (l->l(i, j) != 0.0) throw OutOfSupport("L is not lower-triangular");
      values = tri_free_entries(l->l);
      break;
    }
    case DeqFamily::IntervalBeta: {
      const auto* u = std::get_if<UnitInterval>(&z);
      if (u == nullptr) throw FamilyMismatch("IntervalBeta expects u in [0,1)");
      if (!(u->u >= 0.0 && u->u < 1.0)) throw OutOfSupport("u outside [0,1)");
      const auto nat = natural_params(phi, y);
      return beta_log_pdf(beta_param(nat[0]), beta_param(nat[1]), u->u);
    }
    case DeqFamily::WindingCategorical: {
      const auto* k = std::get_if<WindingIndex>(&z);
      if (k == nullptr) throw FamilyMismatch("WindingCategorical expects winding indices");
      return winding_log_prob(phi, y, k->k);
    }
  }
  const auto pos = positive_mask(spec);
  const auto nat = natural_params(phi, y);
  double lq = -static_cast<double>(d) * kHalfLog2Pi;
  for (std::size_t i = 0; i < d; ++i) {
    if (pos[i] > 0 && !(values[i] > 0.0)) throw OutOfSupport("positive coordinate out of support");
    const double mu = mu_of(nat[i]), sigma = sigma_of(nat[d + i]);
    const double h = pos[i] > 0 ? std::log(values[i]) : values[i];
    const double e = (h - mu) / sigma;
    lq += -0.5 * e * e - std::log(sigma) - (pos[i] > 0 ? h : 0.0);
  }
  return lq;
}

double winding_log_prob(const DequantizerParameters& phi, const ManifoldPoint& y, std::span<const std::int64_t> k) {
  const auto& spec = phi.spec;
  if (spec.family != DeqFamily::WindingCategorical) throw FamilyMismatch("winding_log_prob needs WindingCategorical");
  if (k.size() != spec.size) throw ShapeError("winding_log_prob: one index per circle required");
  const auto w = static_cast<std::int64_t>(spec.window);
  for (auto ki : k)
    if (ki < -w || ki > w) throw OutOfSupport("winding index outside the truncation window");
  const auto nat = natural_params(phi, y);
  const std::size_t width = 2 * spec.window + 1;
  double lp = 0.0;
  for (std::size_t c = 0; c < spec.size; ++c) {
    const double* logits = nat.data() + c * width;
    const double mx = *std::max_element(logits, logits + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) total += std::exp(logits[j] - mx);
    lp += logits[static_cast<std::size_t>(k[c] + w)] - mx - std::log(total);
  }
  return lp;
}

DeqGraph deq_sample_graph(ad::GraphBuilder& gb, const DequantizerParameters& phi, ad::Var y, ad::Var noise) {
  const auto& spec = phi.spec;
  const std::size_t d = aux_dim(spec);
  const ad::Var out = phi.net.graph(gb, y, kDeqPrefix);
  DeqGraph g;
  if (is_lognormal_family(spec.family)) {
    const ad::Var mu = gb.clamp(gb.slice_cols(out, 0, d), -kLogScaleClamp, kLogScaleClamp);
    const ad::Var sigma = gb.clamp(gb.softplus(gb.slice_cols(out, d, 2 * d)), kSigmaMin, kSigmaMax);
    const ad::Var h = mu + sigma * noise;
    const auto pos = positive_mask(spec);
    const bool all_positive = std::all_of(pos.begin(), pos.end(), [](double v) { return v > 0; });
    ad::Var base = gb.scale(gb.square(noise), -0.5) - gb.log(sigma);
    if (all_positive) {
      g.z = gb.exp(h);
      base = base - h;
    } else {
      const ad::Var mask = gb.constant(Tensor({1, d}, pos));
      std::vector<double> inv(d);
      for (std::size_t i = 0; i < d; ++i) inv[i] = 1.0 - pos[i];
      const ad::Var inv_mask = gb.constant(Tensor({1, d}, inv));
      g.z = mask * gb.exp(h) + inv_mask * h;
      base = base - mask * h;
    }
    g.log_z = h;
    g.log_q = gb.row_sum(base) + (-static_cast<double>(d) * kHalfLog2Pi);
  } else if (spec.family == DeqFamily::IntervalBeta) {
    const ad::Var a = gb.clamp(gb.softplus(gb.slice_cols(out, 0, 1)), kBetaMin, kBetaMax);
    const ad::Var b = gb.clamp(gb.softplus(gb.slice_cols(out, 1, 2)), kBetaMin, kBetaMax);
    static const auto icdf = std::make_shared<ad::RowFunction>(
        ad::RowFunction{"beta_icdf", [](std::span<const double> r, std::span<double> grad) {
                          return beta_icdf_with_grad(r[0], r[1], r[2], grad);
                        }});
    static const auto logpdf = std::make_shared<ad::RowFunction>(
        ad::RowFunction{"beta_log_pdf", [](std::span<const double> r, std::span<double> grad) {
                          return beta_log_pdf_with_grad(r[0], r[1], r[2], grad);
                        }});
    g.z = gb.row_function(gb.concat_cols({a, b, noise}), icdf);
    g.log_q = gb.row_function(gb.concat_cols({a, b, g.z}), logpdf);
  } else {
    throw FamilyMismatch("WindingCategorical has no reparameterized sampler");
  }
  return g;
}

}  // namespace mdeq
