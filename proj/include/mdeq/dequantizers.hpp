#pragma once

#include <string>
#include <vector>

#include "mdeq/autodiff.hpp"
#include "mdeq/manifolds.hpp"
#include "mdeq/nn.hpp"
#include "mdeq/rng.hpp"

/// Conditional dequantization densities over the auxiliary coordinates,
/// each produced by a small conditioner network of the manifold point.
namespace mdeq {

enum class DeqFamily { RadialLogNormal, ProductRadialLogNormal, TriPlusGaussian, IntervalBeta, WindingCategorical };

std::string to_string(DeqFamily f);
DeqFamily deq_family_from_string(const std::string& s);

struct DequantizerSpec {
  DeqFamily family = DeqFamily::RadialLogNormal;
  /// Conditioner input width (embedding dimension of y).
  std::size_t in_dim = 3;
  std::size_t hidden = 32;
  /// Radii count (ProductRadialLogNormal), matrix size p (TriPlusGaussian) or
  /// circle count (WindingCategorical); 1 otherwise.
  std::size_t size = 1;
  /// Winding truncation |k| <= window (WindingCategorical only).
  std::size_t window = 3;
  /// Initial sigma of the log-normal / normal heads.
  double init_sigma = 0.5;

  friend bool operator==(const DequantizerSpec&, const DequantizerSpec&) = default;
};

inline constexpr double kSigmaMin = 1e-3;
inline constexpr double kSigmaMax = 20.0;
inline constexpr double kLogScaleClamp = 7.0;
inline constexpr double kBetaMin = 1e-2;
inline constexpr double kBetaMax = 1e3;
inline constexpr const char* kDeqPrefix = "deq";

struct DequantizerParameters {
  DequantizerSpec spec;
  Mlp net;

  std::size_t parameter_count() const { return net.parameter_count(); }
  ParameterMap parameters() const;
  void assign(const ParameterMap& params);
  void visit(const std::function<void(const std::string&, Tensor&)>& fn) { net.visit(kDeqPrefix, fn); }
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const { net.visit(kDeqPrefix, fn); }
};

/// Auxiliary dimension: entries of z (and of the base noise).
std::size_t aux_dim(const DequantizerSpec& spec);
/// Number of conditioner outputs.
std::size_t natural_dim(const DequantizerSpec& spec);
/// Whether family `f` dequantizes manifold `m`.
bool family_matches(const DequantizerSpec& spec, const Manifold& m);
/// Conditioner input for a point: its embedding coordinates.
std::vector<double> conditioner_input(const ManifoldPoint& y);

/// Conditioner with random hidden weights, zero output weights and output
/// bias giving mu = 0 and sigma = spec.init_sigma (Beta: alpha = beta = 1;
/// categorical: uniform).
DequantizerParameters dequantizer_init(const DequantizerSpec& spec, Rng& rng);
/// Every head constant: the output layer is zero and the bias is set so
/// (mu, sigma) are the given values for all y.
DequantizerParameters dequantizer_pinned(const DequantizerSpec& spec, double mu, double sigma);

struct DequantizationDraw {
  AuxiliaryCoordinate z;
  double log_q = 0.0;
  std::vector<double> noise;
};

/// Reparameterized draw z = T(eps; y) with eps ~ N(0, I).
DequantizationDraw deq_sample(const DequantizerParameters& phi, const ManifoldPoint& y, Rng& rng);
/// Same transform for a given noise vector.
DequantizationDraw deq_transform(const DequantizerParameters& phi, const ManifoldPoint& y,
                                 std::span<const double> noise);
double deq_log_prob(const DequantizerParameters& phi, const ManifoldPoint& y, const AuxiliaryCoordinate& z);
/// Categorical log-probability of per-circle winding indices.
double winding_log_prob(const DequantizerParameters& phi, const ManifoldPoint& y, std::span<const std::int64_t> k);

/// Graph of a batch of reparameterized draws.
struct DeqGraph {
  ad::Var z;      // rows x aux_dim: radius / radii / free L entries / u
  ad::Var log_z;  // rows x aux_dim pre-exponential values (log-normal families only)
  ad::Var log_q;  // rows x 1
};
DeqGraph deq_sample_graph(ad::GraphBuilder& gb, const DequantizerParameters& phi, ad::Var y, ad::Var noise);

}  // namespace mdeq
