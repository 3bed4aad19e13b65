#pragma once

#include <string>
#include <vector>

#include "mdeq/autodiff.hpp"
#include "mdeq/nn.hpp"
#include "mdeq/rng.hpp"
#include "mdeq/tensor.hpp"

/// RealNVP-style affine coupling flow on R^m with a standard-normal base.
namespace mdeq {

struct FlowSpec {
  std::size_t dim = 3;
  std::size_t n_layers = 4;
  std::size_t hidden = 32;
  double scale_cap = 3.0;

  friend bool operator==(const FlowSpec&, const FlowSpec&) = default;
};

struct CouplingLayer {
  std::vector<std::size_t> cond;    // conditioning coordinates (left unchanged)
  std::vector<std::size_t> active;  // transformed coordinates
  Mlp scale;
  Mlp shift;
  double scale_cap = 3.0;
};

struct FlowParameters {
  FlowSpec spec;
  std::vector<CouplingLayer> layers;

  std::size_t parameter_count() const;
  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  ParameterMap parameters() const;
  /// Inverse of parameters(); every tensor must be present with its shape.
  void assign(const ParameterMap& params);
};

struct FlowEvaluation {
  Tensor value;
  std::vector<double> log_density;
  std::vector<double> log_det_sum;
};

/// Coordinates left unchanged by layer l: even indices for even l, odd for odd l.
std::vector<std::size_t> conditioning_mask(std::size_t dim, std::size_t layer);

FlowParameters flow_init(const FlowSpec& spec, Rng& rng);

/// x -> z for a batch (rows x m); log_det per row is the sum of scale outputs.
std::pair<Tensor, std::vector<double>> coupling_forward(const CouplingLayer& layer, const Tensor& x);
/// z -> x; log_det per row of the inverse map (negated scale sum).
std::pair<Tensor, std::vector<double>> coupling_inverse(const CouplingLayer& layer, const Tensor& y);

/// Exact log density for each row of x.
std::vector<double> flow_log_prob(const FlowParameters& theta, const Tensor& x);
double flow_log_prob(const FlowParameters& theta, std::span<const double> x);
/// `count` draws with their exact log densities.
FlowEvaluation flow_sample(const FlowParameters& theta, Rng& rng, std::size_t count);

/// Graph computing per-row log density (rows x 1) of `x` (rows x m). Weights
/// are leaves named "flow.l<k>.{s,t}.*".
ad::Var flow_log_prob_graph(ad::GraphBuilder& gb, const FlowParameters& theta, ad::Var x);

inline constexpr const char* kFlowPrefix = "flow";

}  // namespace mdeq
