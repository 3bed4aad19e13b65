#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mdeq/autodiff.hpp"
#include "mdeq/dequantizers.hpp"
#include "mdeq/errors.hpp"
#include "mdeq/flow.hpp"
#include "mdeq/manifolds.hpp"

/// Dequantization model (ambient density + dequantizer), the ELBO and
/// importance-sampled objectives, marginal densities and the training loop.
namespace mdeq {

enum class ObjectiveKind { Elbo, ImportanceSampled };
enum class TorusMap { Clifford, Modulus };
enum class Optimizer { Adam, Sgd };

std::string to_string(ObjectiveKind k);
std::string to_string(TorusMap m);

struct ModelSpec {
  std::size_t flow_layers = 4;
  std::size_t flow_hidden = 32;
  double scale_cap = 3.0;
  std::size_t deq_hidden = 32;
  double init_sigma = 0.5;
  TorusMap torus_map = TorusMap::Clifford;
  std::size_t winding_window = 3;
};

struct Model {
  Manifold manifold;
  /// False: the ambient density is a fixed standard normal (no theta).
  bool flow_ambient = true;
  TorusMap torus_map = TorusMap::Clifford;
  std::size_t winding_window = 3;
  FlowParameters theta;
  DequantizerParameters phi;
  /// Reflection R for SO(n).
  Tensor reflection;

  std::size_t ambient_dim() const;
  bool is_modulus() const { return manifold.kind == ManifoldKind::Torus && torus_map == TorusMap::Modulus; }
  ParameterMap parameters() const;
  void assign(const ParameterMap& params);
  /// Names of trainable tensors (flow and dequantizer).
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
};

Model make_model(const Manifold& manifold, const ModelSpec& spec, Rng& rng);

/// log pi_X(G^{-1}(y, z)) - log q(z | y) - log Gram-Jacobian for one draw.
double log_weight(const Model& model, const ManifoldPoint& y, const DequantizationDraw& draw);
/// Ambient log density at an ambient point.
double ambient_log_prob(const Model& model, std::span<const double> x);

/// Batched objective graph. Outputs: "objective" (scalar, primary), "logw"
/// (one row per draw), "per_datum" (one row per datum).
struct ObjectiveGraph {
  ad::Graph graph;
  ObjectiveKind kind = ObjectiveKind::Elbo;
  std::size_t n_mc = 1;
  /// Rows of "logw" belonging to one datum, contiguous.
  std::size_t rows_per_datum = 1;
};

ObjectiveGraph build_objective_graph(const Model& model, ObjectiveKind kind, std::size_t n_mc);
/// Data and base-noise bindings for a batch; noise for datum b comes from the
/// substream (seed, stream, b) so it does not depend on evaluation order.
ad::Bindings batch_bindings(const Model& model, const ObjectiveGraph& og, const std::vector<ManifoldPoint>& batch,
                            std::uint64_t seed, std::uint64_t stream);
void bind_parameters(const Model& model, ad::Bindings& b);

struct ObjectiveResult {
  double value = 0.0;
  ParameterMap gradients;
  std::vector<double> log_weights;
  std::vector<double> per_datum;
  std::size_t rows_per_datum = 1;
};

/// Mean over batch and draws of log w (Jensen lower bound). For SO(n) the
/// reflection expectation is enumerated exactly.
ObjectiveResult elbo(const Model& model, const std::vector<ManifoldPoint>& batch, std::size_t n_mc, Rng& rng);
/// Batch mean of log (1/K) sum_k w_k.
ObjectiveResult iwll(const Model& model, const std::vector<ManifoldPoint>& batch, std::size_t n_mc, Rng& rng);
/// The SO(n) ELBO with S ~ Unif{Id, R} enumerated (log 2 dropped).
ObjectiveResult son_elbo(const Model& model, const std::vector<ManifoldPoint>& batch, std::size_t n_mc, Rng& rng);
/// Same draws given explicitly by seed; used to compare objectives.
ObjectiveResult evaluate_objective(const Model& model, ObjectiveKind kind, const std::vector<ManifoldPoint>& batch,
                                   std::size_t n_mc, std::uint64_t seed, bool with_gradients = true);

/// Importance-sampled log pi_Y(y) with K draws per point. SO(n) sums both
/// partition cells; modulus dequantization enumerates the winding window.
std::vector<double> marginal_log_density(const Model& model, const std::vector<ManifoldPoint>& points, std::size_t k,
                                         std::uint64_t seed);
double marginal_log_density(const Model& model, const ManifoldPoint& y, std::size_t k, Rng& rng);

/// Draws from the model: ambient sample pushed through G (then S for SO(n)).
std::vector<ManifoldPoint> model_sample(const Model& model, Rng& rng, std::size_t count);

// Training ---------------------------------------------------------------------

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::Elbo;
  std::size_t n_mc = 1;
  std::size_t batch_size = 100;
  double learning_rate = 1e-3;
  /// Cosine decay from learning_rate to learning_rate * final_lr_fraction; 1 keeps it constant.
  double final_lr_fraction = 1.0;
  std::size_t iterations = 2000;
  double gradient_clip = 10.0;
  Optimizer optimizer = Optimizer::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainingHistory {
  std::vector<double> loss;
  std::vector<double> grad_norm;
  std::vector<double> millis;

  std::size_t size() const { return loss.size(); }
  /// CSV with columns iteration,loss,grad_norm,millis after `comment` lines.
  void write_csv(std::ostream& os, const std::string& comment = "") const;
};

using DataSource = std::function<std::vector<ManifoldPoint>(std::size_t iteration, std::size_t batch_size)>;

struct TrainOptions {
  std::uint64_t seed = 0;
  /// Wall time makes history.csv non-reproducible; off by default.
  bool record_wall_time = false;
  std::function<void(std::size_t, double)> progress;
};

struct TrainResult {
  Model model;
  TrainingHistory history;
};

/// Raised on a non-finite loss or gradient; carries the last finite model.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const std::string& what, Model last_good, TrainingHistory history, std::size_t iteration)
      : NumericalError(what), last_good_(std::move(last_good)), history_(std::move(history)), iteration_(iteration) {}
  const Model& last_good() const noexcept { return last_good_; }
  const TrainingHistory& history() const noexcept { return history_; }
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  Model last_good_;
  TrainingHistory history_;
  std::size_t iteration_;
};

TrainResult train(const ObjectiveConfig& config, const DataSource& data, Model initial, const TrainOptions& options);

}  // namespace mdeq
