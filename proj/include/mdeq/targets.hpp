#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mdeq/errors.hpp"
#include "mdeq/manifolds.hpp"
#include "mdeq/rng.hpp"

/// Experimental target densities, reference samplers and rejection sampling.
namespace mdeq {

enum class TargetKind { SphereMixture, TorusMixture, TorusCorrelated, SpecialOrthogonalMixture, Procrustes, Constant };

/// Unnormalized target exp(-u(y)) on a manifold.
struct TargetSpec {
  std::string name;
  TargetKind kind = TargetKind::Constant;
  Manifold manifold;
  /// sup_y log_unnorm(y), analytic.
  double log_upper_bound = 0.0;
  /// Mode vectors (sphere), mode angles (torus) or mode matrices flattened (SO(n)).
  std::vector<std::vector<double>> modes;
  double kappa = 0.0;
  double sigma = 1.0;
  double shift = 0.0;
  /// Procrustes clouds, n x p.
  Tensor a;
  Tensor b;
  /// Value of the constant target.
  double constant = 0.0;
};

/// Raised when a proposal exceeds the declared upper bound.
class BoundViolation : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Constants file as embedded at configure time, and its SHA-256.
const std::string& target_constants_json();
const std::string& target_constants_sha256();

/// Names accepted by make_target.
std::vector<std::string> target_names();
/// Builds a named target from the embedded constants.
TargetSpec make_target(const std::string& name);
/// Constant log density c on any manifold.
TargetSpec constant_target(const Manifold& manifold, double c);

/// Procrustes fixture: A (n x p) scaled Gaussian, B = O* A + noise.
struct ProcrustesFixture {
  Tensor a;
  Tensor b;
  Tensor o_star;
};
ProcrustesFixture procrustes_fixture(std::uint64_t seed, std::size_t n, std::size_t p, double a_scale,
                                     double noise_scale);

double target_log_unnorm(const TargetSpec& t, const ManifoldPoint& y);

ManifoldPoint uniform_sphere(std::size_t m, Rng& rng);
ManifoldPoint uniform_torus(std::size_t m, Rng& rng);
/// Haar on O(n): QR of a Gaussian matrix with the sign of diag(R) folded into Q.
ManifoldPoint haar_orthogonal(std::size_t n, Rng& rng);
/// Haar on SO(n): Haar O(n) draw mapped into SO(n) by the default reflection.
ManifoldPoint haar_special_orthogonal(std::size_t n, Rng& rng);
/// Uniform (volume) draw on a sphere, torus, O(n) or SO(n).
ManifoldPoint uniform_point(const Manifold& manifold, Rng& rng);
/// log(1 / volume) in the embedded metric; O(n) and SO(n) use the Frobenius metric.
double uniform_log_density(const Manifold& manifold);

struct RejectionResult {
  std::vector<ManifoldPoint> points;
  double acceptance_rate = 0.0;
  std::size_t proposals = 0;
};

/// Exact i.i.d. draws by uniform/Haar proposal and acceptance with
/// probability exp(log_unnorm - log_upper_bound). Proposals run in chunks on
/// independent substreams of `seed`, so the output does not depend on the
/// worker count.
RejectionResult rejection_sample(const TargetSpec& t, std::size_t count, std::uint64_t seed);

/// One row per point: embedding coordinates. Lines of `comment` become "# " lines.
void write_samples_csv(std::ostream& os, const std::vector<ManifoldPoint>& points, const std::string& comment = "");
/// One JSON object per line: {"coords": [...], "log_unnorm": v}.
void write_samples_jsonl(std::ostream& os, const std::vector<ManifoldPoint>& points, const TargetSpec& t);
/// Reads write_samples_csv output back for the given manifold.
std::vector<ManifoldPoint> read_samples_csv(std::istream& is, const Manifold& manifold);

}  // namespace mdeq
