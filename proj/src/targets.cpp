#include "mdeq/targets.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <json.hpp>
#include <numbers>
#include <ostream>
#include <sstream>

#include "mdeq/parallel.hpp"

namespace mdeq {

namespace {

using json = nlohmann::json;

constexpr std::size_t kChunk = 4096;

double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

const json& constants() {
  static const json j = json::parse(target_constants_json());
  return j;
}

Tensor gaussian(Rng& rng, std::size_t r, std::size_t c, double scale) {
  Tensor t({r, c});
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace

std::vector<std::string> target_names() {
  return {"sphere4", "s3mix", "torus_unimodal", "torus_multimodal", "torus_correlated", "so3_multimodal", "procrustes"};
}

ProcrustesFixture procrustes_fixture(std::uint64_t seed, std::size_t n, std::size_t p, double a_scale,
                                     double noise_scale) {
  Rng rng(seed);
  ProcrustesFixture f;
  f.a = gaussian(rng, n, p, a_scale);
  f.o_star = haar_orthogonal(n, rng).as_matrix();
  f.b = matmul(f.o_star, f.a) + gaussian(rng, n, p, noise_scale);
  return f;
}

TargetSpec make_target(const std::string& name) {
  const json& c = constants();
  if (!c.contains(name) || name == "version") throw ConfigError("unknown target '" + name + "'");
  const json& e = c.at(name);
  TargetSpec t;
  t.name = name;
  const std::string man = e.at("manifold").get<std::string>();
  if (man == "sphere") {
    t.kind = TargetKind::SphereMixture;
    t.manifold = Manifold::sphere(e.at("dim").get<std::size_t>());
    t.kappa = e.at("kappa").get<double>();
    t.modes = e.at("mu").get<std::vector<std::vector<double>>>();
    t.log_upper_bound = std::log(static_cast<double>(t.modes.size())) + t.kappa;
  } else if (man == "torus" && e.contains("phi")) {
    t.kind = TargetKind::TorusMixture;
    t.modes = e.at("phi").get<std::vector<std::vector<double>>>();
    t.manifold = Manifold::torus(t.modes.front().size());
    t.log_upper_bound = std::log(static_cast<double>(t.modes.size())) + static_cast<double>(t.manifold.m);
  } else if (man == "torus") {
    t.kind = TargetKind::TorusCorrelated;
    t.manifold = Manifold::torus(2);
    t.shift = e.at("shift").get<double>();
    t.log_upper_bound = 1.0;
  } else if (man == "special_orthogonal") {
    t.kind = TargetKind::SpecialOrthogonalMixture;
    const auto n = e.at("n").get<std::size_t>();
    t.manifold = Manifold::special_orthogonal(n);
    t.sigma = e.at("sigma").get<double>();
    for (const auto& d : e.at("omega_diagonals").get<std::vector<std::vector<double>>>()) {
      std::vector<double> m(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) m[i * n + i] = d.at(i);
      t.modes.push_back(std::move(m));
    }
    t.log_upper_bound = std::log(static_cast<double>(t.modes.size()));
  } else if (man == "orthogonal") {
    t.kind = TargetKind::Procrustes;
    const auto n = e.at("n").get<std::size_t>();
    t.manifold = Manifold::orthogonal(n);
    t.sigma = e.at("sigma").get<double>();
    const auto f = procrustes_fixture(e.at("fixture_seed").get<std::uint64_t>(), n, e.at("p").get<std::size_t>(),
                                      e.at("a_scale").get<double>(), e.at("noise_scale").get<double>());
    t.a = f.a;
    t.b = f.b;
    t.log_upper_bound = 0.0;
  } else {
    throw ConfigError("target '" + name + "' has unknown manifold '" + man + "'");
  }
  return t;
}

TargetSpec constant_target(const Manifold& manifold, double c) {
  TargetSpec t;
  t.name = "constant";
  t.kind = TargetKind::Constant;
  t.manifold = manifold;
  t.constant = c;
  t.log_upper_bound = c;
  return t;
}

double target_log_unnorm(const TargetSpec& t, const ManifoldPoint& y) {
  if (!(y.manifold == t.manifold))
    throw FamilyMismatch("target " + t.name + " lives on " + t.manifold.name() + ", got " + y.manifold.name());
  const auto x = y.coords.data();
  switch (t.kind) {
    case TargetKind::Constant:
      return t.constant;
    case TargetKind::SphereMixture: {
      std::vector<double> terms;
      for (const auto& mu : t.modes) {
        double d = 0.0;
        for (std::size_t i = 0; i < mu.size(); ++i) d += x[i] * mu[i];
        terms.push_back(t.kappa * d);
      }
      return log_sum_exp(terms);
    }
    case TargetKind::TorusMixture: {
      const auto th = torus_angles(y);
      std::vector<double> terms;
      for (const auto& phi : t.modes) {
        double s = 0.0;
        for (std::size_t i = 0; i < phi.size(); ++i) s += std::cos(th[i] - phi[i]);
        terms.push_back(s);
      }
      return log_sum_exp(terms);
    }
    case TargetKind::TorusCorrelated: {
      const auto th = torus_angles(y);
      return std::cos(th[0] + th[1] - t.shift);
    }
    case TargetKind::SpecialOrthogonalMixture: {
      std::vector<double> terms;
      for (const auto& om : t.modes) {
        double s = 0.0;
        for (std::size_t i = 0; i < om.size(); ++i) s += (x[i] - om[i]) * (x[i] - om[i]);
        terms.push_back(-s / (2.0 * t.sigma * t.sigma));
      }
      return log_sum_exp(terms);
    }
    case TargetKind::Procrustes: {
      const Tensor r = t.b - matmul(y.as_matrix(), t.a);
      double s = 0.0;
      for (double v : r.data()) s += v * v;
      return -s / (2.0 * t.sigma * t.sigma);
    }
  }
  return 0.0;
}

// Reference samplers ---------------------------------------------------------

ManifoldPoint uniform_sphere(std::size_t m, Rng& rng) {
  for (;;) {
    std::vector<double> v(m);
    double n2 = 0.0;
    for (double& x : v) {
      x = rng.normal();
      n2 += x * x;
    }
    if (n2 < 1e-24) continue;
    const double n = std::sqrt(n2);
    for (double& x : v) x /= n;
    return ManifoldPoint::make(Manifold::sphere(m), std::move(v));
  }
}

ManifoldPoint uniform_torus(std::size_t m, Rng& rng) {
  std::vector<double> a(m);
  for (double& x : a) x = kTwoPi * rng.uniform();
  return torus_from_angles(a);
}

ManifoldPoint haar_orthogonal(std::size_t n, Rng& rng) {
  // Gram-Schmidt on the columns is QR with a positive diagonal of R; the
  // second pass restores orthogonality lost to rounding.
  std::vector<double> g(n * n);
  for (double& v : g) v = rng.normal();
  auto col = [&](std::size_t j, std::size_t i) -> double& { return g[i * n + j]; };
  for (std::size_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < j; ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += col(k, i) * col(j, i);
        for (std::size_t i = 0; i < n; ++i) col(j, i) -= d * col(k, i);
      }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += col(j, i) * col(j, i);
    nrm = std::sqrt(nrm);
    if (!(nrm > 1e-12)) return haar_orthogonal(n, rng);
    for (std::size_t i = 0; i < n; ++i) col(j, i) /= nrm;
  }
  return ManifoldPoint{Manifold::orthogonal(n), Tensor({1, n * n}, std::move(g))};
}

ManifoldPoint haar_special_orthogonal(std::size_t n, Rng& rng) {
  ManifoldPoint o = haar_orthogonal(n, rng);
  Tensor m = o.as_matrix();
  if (linalg::determinant(m) < 0.0) m = matmul(default_reflection(n), m);
  return ManifoldPoint{Manifold::special_orthogonal(n), m.reshaped({1, n * n})};
}

ManifoldPoint uniform_point(const Manifold& manifold, Rng& rng) {
  switch (manifold.kind) {
    case ManifoldKind::Sphere:
      return uniform_sphere(manifold.m, rng);
    case ManifoldKind::Torus:
      return uniform_torus(manifold.m, rng);
    case ManifoldKind::Orthogonal:
      return haar_orthogonal(manifold.n, rng);
    case ManifoldKind::SpecialOrthogonal:
      return haar_special_orthogonal(manifold.n, rng);
    default:
      throw FamilyMismatch("no uniform distribution on " + manifold.name());
  }
}

double uniform_log_density(const Manifold& manifold) {
  const double m = static_cast<double>(manifold.m);
  switch (manifold.kind) {
    case ManifoldKind::Sphere:
      // |S^{m-1}| = 2 pi^{m/2} / Gamma(m/2)
      return -(std::log(2.0) + 0.5 * m * std::log(std::numbers::pi) - std::lgamma(0.5 * m));
    case ManifoldKind::Torus:
      return -m * std::log(kTwoPi);
    case ManifoldKind::Orthogonal:
    case ManifoldKind::SpecialOrthogonal: {
      // |SO(n)| = 2^{n(n-1)/4} prod_{k=1}^{n-1} |S^k| in the Frobenius metric.
      const double n = static_cast<double>(manifold.n);
      double lv = 0.25 * n * (n - 1.0) * std::log(2.0);
      for (std::size_t k = 1; k < manifold.n; ++k) {
        const double h = 0.5 * static_cast<double>(k + 1);
        lv += std::log(2.0) + h * std::log(std::numbers::pi) - std::lgamma(h);
      }
      if (manifold.kind == ManifoldKind::Orthogonal) lv += std::log(2.0);
      return -lv;
    }
    default:
      throw FamilyMismatch("uniform_log_density: unsupported manifold " + manifold.name());
  }
}

// Rejection sampling ---------------------------------------------------------

RejectionResult rejection_sample(const TargetSpec& t, std::size_t count, std::uint64_t seed) {
  if (!std::isfinite(t.log_upper_bound)) throw ConfigError("rejection_sample: bound must be finite");
  struct Chunk {
    std::vector<ManifoldPoint> accepted;
    std::string violation;
  };
  RejectionResult out;
  std::size_t next_chunk = 0, proposals = 0;
  const std::size_t workers = std::max<std::size_t>(1, worker_count());
  while (out.points.size() < count) {
    // Wave size from the running acceptance estimate.
    std::size_t wave = workers;
    if (out.points.empty() && next_chunk > 0) {
      wave = std::max(wave, 2 * next_chunk);
    } else if (!out.points.empty()) {
      const double rate = static_cast<double>(out.points.size()) / static_cast<double>(proposals);
      const double need = static_cast<double>(count - out.points.size()) / rate;
      wave = std::max(wave, static_cast<std::size_t>(std::ceil(1.1 * need / kChunk)));
    }
    wave = std::min<std::size_t>(wave, 4096);
    std::vector<Chunk> chunks(wave);
    parallel_for(wave, [&](std::size_t c) {
      Rng rng(substream(seed, next_chunk + c, 0x72656a));
      for (std::size_t i = 0; i < kChunk; ++i) {
        ManifoldPoint y = uniform_point(t.manifold, rng);
        const double lu = target_log_unnorm(t, y);
        if (lu > t.log_upper_bound + 1e-12) {
          std::ostringstream os;
          os << std::setprecision(17) << "target " << t.name << ": log_unnorm " << lu << " exceeds bound "
             << t.log_upper_bound;
          chunks[c].violation = os.str();
          return;
        }
        if (rng.uniform() < std::exp(lu - t.log_upper_bound)) chunks[c].accepted.push_back(std::move(y));
      }
    });
    next_chunk += wave;
    for (auto& ch : chunks) {
      if (!ch.violation.empty()) throw BoundViolation(ch.violation);
      if (out.points.size() >= count) break;
      proposals += kChunk;
      for (auto& p : ch.accepted) out.points.push_back(std::move(p));
    }
  }
  // Rate over the chunks that were consumed, so it does not depend on waves.
  out.proposals = proposals;
  out.acceptance_rate = static_cast<double>(out.points.size()) / static_cast<double>(proposals);
  out.points.resize(count);
  return out;
}

// Serialization --------------------------------------------------------------

void write_samples_csv(std::ostream& os, const std::vector<ManifoldPoint>& points, const std::string& comment) {
  if (!comment.empty()) {
    std::istringstream lines(comment);
    std::string line;
    while (std::getline(lines, line)) os << "# " << line << '\n';
  }
  if (points.empty()) return;
  const std::size_t d = points.front().coords.size();
  for (std::size_t j = 0; j < d; ++j) os << (j ? "," : "") << "x" << j;
  os << '\n' << std::setprecision(17);
  for (const auto& p : points) {
    const auto c = p.coords.data();
    for (std::size_t j = 0; j < c.size(); ++j) os << (j ? "," : "") << c[j];
    os << '\n';
  }
}

void write_samples_jsonl(std::ostream& os, const std::vector<ManifoldPoint>& points, const TargetSpec& t) {
  for (const auto& p : points) {
    json j;
    j["coords"] = p.coords.storage();
    j["log_unnorm"] = target_log_unnorm(t, p);
    os << j.dump(-1, ' ', false, json::error_handler_t::strict) << '\n';
  }
}

std::vector<ManifoldPoint> read_samples_csv(std::istream& is, const Manifold& manifold) {
  std::vector<ManifoldPoint> out;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::vector<double> v;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != manifold.embed_dim()) throw ShapeError("samples file row has wrong width");
    const std::size_t w = v.size();
    out.push_back(ManifoldPoint{manifold, Tensor({1, w}, std::move(v))});
  }
  return out;
}

}  // namespace mdeq
