#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mdeq/manifolds.hpp"
#include "mdeq/objectives.hpp"
#include "mdeq/rng.hpp"
#include "mdeq/targets.hpp"

/// Evaluation of a fitted density against an unnormalized target: moment
/// errors, normalizer, KL in both directions and relative ESS.
namespace mdeq {

/// Field names are fixed; mean_mse and cov_mse are norms, not squared errors.
struct MetricsReport {
  double mean_mse = 0.0;
  double cov_mse = 0.0;
  double kl_q_p = 0.0;
  double kl_p_q = 0.0;
  double relative_ess = 0.0;
  double z_hat = 0.0;
  std::size_t n_samples = 0;

  bool operator==(const MetricsReport&) const = default;
  /// JSON object with the fields above, in declaration order.
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

/// A density that can be sampled and evaluated at its own samples.
struct DensityModel {
  std::string name;
  Manifold manifold;
  std::function<std::vector<ManifoldPoint>(Rng& rng, std::size_t count)> sample;
  std::function<std::vector<double>(const std::vector<ManifoldPoint>& points)> log_density;
};

/// Uniform (Haar) density on a sphere, torus, O(n) or SO(n).
DensityModel uniform_density(const Manifold& manifold);
/// Dequantization model; log density by importance sampling with k draws.
DensityModel dequantized_density(const Model& model, std::size_t k, std::uint64_t seed);

struct MomentErrors {
  double mean_error = 0.0;
  double cov_error = 0.0;
};

/// Euclidean norm of the mean difference and Frobenius norm of the
/// covariance difference over embedding coordinates.
MomentErrors moment_errors(const std::vector<ManifoldPoint>& a, const std::vector<ManifoldPoint>& b);

struct NormalizerEstimate {
  double z_hat = 0.0;
  double relative_se = 0.0;
};

/// log w_i = log_unnorm_i - log_q_i. All reductions shift by the max first.
NormalizerEstimate normalizer_from_log_weights(const std::vector<double>& log_w);
double relative_ess_from_log_weights(const std::vector<double>& log_w);
/// Relative ESS of linear weights.
double relative_ess_from_weights(const std::vector<double>& w);

struct KlEstimate {
  double kl_q_p = 0.0;
  double kl_p_q = 0.0;
  double se_q_p = 0.0;
  double se_p_q = 0.0;
};

/// Forward: mean(log q - log_unnorm) + log Z over model draws. Reverse:
/// mean(log_unnorm - log Z - log q) over target draws.
KlEstimate kl_from_log_values(const std::vector<double>& model_log_q, const std::vector<double>& model_log_unnorm,
                              const std::vector<double>& target_log_q, const std::vector<double>& target_log_unnorm,
                              double log_z);

NormalizerEstimate normalizing_constant(const DensityModel& model, const TargetSpec& t, std::size_t n,
                                        std::uint64_t seed);
KlEstimate kl_divergences(const DensityModel& model, const TargetSpec& t, std::size_t n, std::uint64_t seed);
double relative_ess(const DensityModel& model, const TargetSpec& t, std::size_t n, std::uint64_t seed);

/// Draws model and target (rejection) samples and evaluates every metric.
/// Density-based estimators use the first n of each; moment errors use
/// max(n, n_moments). Target samples may be supplied to avoid redrawing.
MetricsReport evaluate_metrics(const DensityModel& model, const TargetSpec& t, std::size_t n, std::uint64_t seed,
                               const std::vector<ManifoldPoint>* target_samples = nullptr, std::size_t n_moments = 0);

}  // namespace mdeq
