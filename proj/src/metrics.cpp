#include "mdeq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace mdeq {

namespace {

using ordered_json = nlohmann::ordered_json;

struct Moments {
  std::vector<double> mean;
  std::vector<double> cov;
};

Moments moments(const std::vector<ManifoldPoint>& pts) {
  const std::size_t d = pts.front().coords.size();
  Moments m{std::vector<double>(d, 0.0), std::vector<double>(d * d, 0.0)};
  for (const auto& p : pts) {
    if (p.coords.size() != d) throw ShapeError("moment_errors: points of mixed dimension");
    for (std::size_t i = 0; i < d; ++i) m.mean[i] += p.coords[i];
  }
  const double n = static_cast<double>(pts.size());
  for (double& v : m.mean) v /= n;
  for (const auto& p : pts)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) m.cov[i * d + j] += (p.coords[i] - m.mean[i]) * (p.coords[j] - m.mean[j]);
  const double denom = pts.size() > 1 ? n - 1.0 : 1.0;
  for (double& v : m.cov) v /= denom;
  return m;
}

void check_log_weights(const std::vector<double>& log_w) {
  if (log_w.empty()) throw ConfigError("weights: empty sample");
  for (double v : log_w)
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) throw NumericalError("weights: non-finite log weight");
}

double max_of(const std::vector<double>& v) { return *std::max_element(v.begin(), v.end()); }

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double se_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

std::vector<double> log_unnorm_all(const TargetSpec& t, const std::vector<ManifoldPoint>& pts) {
  std::vector<double> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = target_log_unnorm(t, pts[i]);
  return out;
}

std::vector<double> diff(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

std::vector<ManifoldPoint> model_draws(const DensityModel& model, std::size_t n, std::uint64_t seed) {
  Rng rng(substream(seed, 0x6d6f64656c));
  auto pts = model.sample(rng, n);
  if (pts.size() != n) throw NumericalError("density model returned the wrong number of samples");
  return pts;
}

}  // namespace

std::string MetricsReport::to_json() const {
  ordered_json j;
  j["mean_mse"] = mean_mse;
  j["cov_mse"] = cov_mse;
  j["kl_q_p"] = kl_q_p;
  j["kl_p_q"] = kl_p_q;
  j["relative_ess"] = relative_ess;
  j["z_hat"] = z_hat;
  j["n_samples"] = n_samples;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricsReport r;
  r.mean_mse = j.at("mean_mse").get<double>();
  r.cov_mse = j.at("cov_mse").get<double>();
  r.kl_q_p = j.at("kl_q_p").get<double>();
  r.kl_p_q = j.at("kl_p_q").get<double>();
  r.relative_ess = j.at("relative_ess").get<double>();
  r.z_hat = j.at("z_hat").get<double>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  return r;
}

DensityModel uniform_density(const Manifold& manifold) {
  const double lp = uniform_log_density(manifold);
  DensityModel d;
  d.name = "uniform";
  d.manifold = manifold;
  d.sample = [manifold](Rng& rng, std::size_t count) {
    std::vector<ManifoldPoint> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(uniform_point(manifold, rng));
    return out;
  };
  d.log_density = [lp](const std::vector<ManifoldPoint>& pts) { return std::vector<double>(pts.size(), lp); };
  return d;
}

DensityModel dequantized_density(const Model& model, std::size_t k, std::uint64_t seed) {
  DensityModel d;
  d.name = "dequantized";
  d.manifold = model.manifold;
  d.sample = [model](Rng& rng, std::size_t count) { return model_sample(model, rng, count); };
  d.log_density = [model, k, seed](const std::vector<ManifoldPoint>& pts) {
    return marginal_log_density(model, pts, k, seed);
  };
  return d;
}

MomentErrors moment_errors(const std::vector<ManifoldPoint>& a, const std::vector<ManifoldPoint>& b) {
  if (a.empty() || b.empty()) throw ConfigError("moment_errors: empty sample set");
  if (a.front().coords.size() != b.front().coords.size())
    throw ShapeError("moment_errors: dimension mismatch");
  const Moments ma = moments(a), mb = moments(b);
  MomentErrors e;
  double s = 0.0;
  for (std::size_t i = 0; i < ma.mean.size(); ++i) s += (ma.mean[i] - mb.mean[i]) * (ma.mean[i] - mb.mean[i]);
  e.mean_error = std::sqrt(s);
  s = 0.0;
  for (std::size_t i = 0; i < ma.cov.size(); ++i) s += (ma.cov[i] - mb.cov[i]) * (ma.cov[i] - mb.cov[i]);
  e.cov_error = std::sqrt(s);
  return e;
}

NormalizerEstimate normalizer_from_log_weights(const std::vector<double>& log_w) {
  check_log_weights(log_w);
  const double mx = max_of(log_w);
  if (!std::isfinite(mx)) throw NumericalError("normalizer: all weights are zero");
  std::vector<double> w(log_w.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_w[i] - mx);
  const double m = mean_of(w);
  NormalizerEstimate z;
  z.z_hat = std::exp(mx) * m;
  z.relative_se = se_of(w) / m;
  return z;
}

double relative_ess_from_weights(const std::vector<double>& w) {
  if (w.empty()) throw ConfigError("relative_ess: empty sample");
  double mx = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw NumericalError("relative_ess: weights must be finite and non-negative");
    mx = std::max(mx, v);
  }
  if (mx == 0.0) throw NumericalError("relative_ess: all weights are zero");
  double s = 0.0, s2 = 0.0;
  for (double v : w) {
    const double u = v / mx;
    s += u;
    s2 += u * u;
  }
  return s * s / s2 / static_cast<double>(w.size());
}

double relative_ess_from_log_weights(const std::vector<double>& log_w) {
  check_log_weights(log_w);
  const double mx = max_of(log_w);
  if (!std::isfinite(mx)) throw NumericalError("relative_ess: all weights are zero");
  std::vector<double> w(log_w.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_w[i] - mx);
  return relative_ess_from_weights(w);
}

KlEstimate kl_from_log_values(const std::vector<double>& model_log_q, const std::vector<double>& model_log_unnorm,
                              const std::vector<double>& target_log_q, const std::vector<double>& target_log_unnorm,
                              double log_z) {
  if (model_log_q.size() != model_log_unnorm.size() || target_log_q.size() != target_log_unnorm.size())
    throw ShapeError("kl: value vectors differ in length");
  if (model_log_q.size() < 2 || target_log_q.size() < 2) throw ConfigError("kl: need at least two samples");
  const auto fwd = diff(model_log_q, model_log_unnorm);
  auto rev = diff(target_log_unnorm, target_log_q);
  for (double& v : rev) v -= log_z;
  KlEstimate k;
  k.kl_q_p = mean_of(fwd) + log_z;
  k.kl_p_q = mean_of(rev);
  k.se_q_p = se_of(fwd);
  k.se_p_q = se_of(rev);
  if (!std::isfinite(k.kl_q_p) || !std::isfinite(k.kl_p_q)) throw NumericalError("kl: non-finite estimate");
  return k;
}

NormalizerEstimate normalizing_constant(const DensityModel& model, const TargetSpec& t, std::size_t n,
                                        std::uint64_t seed) {
  const auto pts = model_draws(model, n, seed);
  return normalizer_from_log_weights(diff(log_unnorm_all(t, pts), model.log_density(pts)));
}

KlEstimate kl_divergences(const DensityModel& model, const TargetSpec& t, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("kl_divergences: n must be at least 2");
  const auto pts = model_draws(model, n, seed);
  const auto lq = model.log_density(pts);
  const auto lu = log_unnorm_all(t, pts);
  const double log_z = std::log(normalizer_from_log_weights(diff(lu, lq)).z_hat);
  const auto tp = rejection_sample(t, n, substream(seed, 0x746172676574)).points;
  return kl_from_log_values(lq, lu, model.log_density(tp), log_unnorm_all(t, tp), log_z);
}

double relative_ess(const DensityModel& model, const TargetSpec& t, std::size_t n, std::uint64_t seed) {
  const auto pts = model_draws(model, n, seed);
  return relative_ess_from_log_weights(diff(log_unnorm_all(t, pts), model.log_density(pts)));
}

MetricsReport evaluate_metrics(const DensityModel& model, const TargetSpec& t, std::size_t n, std::uint64_t seed,
                               const std::vector<ManifoldPoint>* target_samples, std::size_t n_moments) {
  if (n < 2) throw ConfigError("evaluate_metrics: n must be at least 2");
  if (!(model.manifold == t.manifold)) throw FamilyMismatch("evaluate_metrics: model and target manifolds differ");
  const std::size_t total = std::max(n, n_moments);
  const auto all = model_draws(model, total, seed);
  const std::vector<ManifoldPoint> pts(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  const auto lq = model.log_density(pts);
  const auto lu = log_unnorm_all(t, pts);
  const auto log_w = diff(lu, lq);
  const auto z = normalizer_from_log_weights(log_w);
  std::vector<ManifoldPoint> drawn;
  if (!target_samples) drawn = rejection_sample(t, total, substream(seed, 0x746172676574)).points;
  const auto& tall = target_samples ? *target_samples : drawn;
  if (tall.size() < n) throw ConfigError("evaluate_metrics: fewer target samples than n");
  const std::vector<ManifoldPoint> tp(tall.begin(), tall.begin() + static_cast<std::ptrdiff_t>(n));
  const auto kl = kl_from_log_values(lq, lu, model.log_density(tp), log_unnorm_all(t, tp), std::log(z.z_hat));
  const auto me = moment_errors(all, tall);
  MetricsReport r;
  r.mean_mse = me.mean_error;
  r.cov_mse = me.cov_error;
  r.kl_q_p = kl.kl_q_p;
  r.kl_p_q = kl.kl_p_q;
  r.relative_ess = relative_ess_from_log_weights(log_w);
  r.z_hat = z.z_hat;
  r.n_samples = n;
  return r;
}

}  // namespace mdeq
