#include "mdeq/flow.hpp"

#include <cmath>
#include <numbers>

#include "mdeq/errors.hpp"

namespace mdeq {

namespace {

std::string layer_prefix(std::size_t l) { return std::string(kFlowPrefix) + ".l" + std::to_string(l); }

Tensor gather(const Tensor& x, const std::vector<std::size_t>& idx) {
  Tensor out({x.rows(), idx.size()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = x(i, idx[j]);
  return out;
}

// 0/1 matrix P (dim x |idx|) with x P = x[:, idx].
Tensor selector(std::size_t dim, const std::vector<std::size_t>& idx) {
  Tensor p({dim, idx.size()});
  for (std::size_t j = 0; j < idx.size(); ++j) p(idx[j], j) = 1.0;
  return p;
}

Tensor scale_output(const CouplingLayer& layer, const Tensor& xc) {
  Tensor s = layer.scale.forward(xc);
  for (double& v : s.data()) v = layer.scale_cap * std::tanh(v);
  return s;
}

double std_normal_log_prob(std::span<const double> z) {
  double s = 0.0;
  for (double v : z) s += v * v;
  return -0.5 * s - 0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi);
}

}  // namespace

std::vector<std::size_t> conditioning_mask(std::size_t dim, std::size_t layer) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dim; ++i)
    if ((i + layer) % 2 == 0) out.push_back(i);
  return out;
}

FlowParameters flow_init(const FlowSpec& spec, Rng& rng) {
  if (spec.dim < 2) throw ConfigError("flow_init: dimension must be at least 2");
  if (spec.n_layers < 2) throw ConfigError("flow_init: need at least 2 coupling layers");
  if (spec.hidden < 1) throw ConfigError("flow_init: hidden width must be positive");
  FlowParameters theta;
  theta.spec = spec;
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    CouplingLayer layer;
    layer.cond = conditioning_mask(spec.dim, l);
    for (std::size_t i = 0; i < spec.dim; ++i)
      if ((i + l) % 2 != 0) layer.active.push_back(i);
    layer.scale = Mlp::init(layer.cond.size(), spec.hidden, layer.active.size(), rng);
    layer.shift = Mlp::init(layer.cond.size(), spec.hidden, layer.active.size(), rng);
    layer.scale_cap = spec.scale_cap;
    theta.layers.push_back(std::move(layer));
  }
  return theta;
}

std::size_t FlowParameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.scale.parameter_count() + l.shift.parameter_count();
  return n;
}

void FlowParameters::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].scale.visit(layer_prefix(l) + ".s", fn);
    layers[l].shift.visit(layer_prefix(l) + ".t", fn);
  }
}

void FlowParameters::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].scale.visit(layer_prefix(l) + ".s", fn);
    layers[l].shift.visit(layer_prefix(l) + ".t", fn);
  }
}

ParameterMap FlowParameters::parameters() const {
  ParameterMap out;
  visit([&](const std::string& name, const Tensor& t) { out.emplace(name, t); });
  return out;
}

void FlowParameters::assign(const ParameterMap& params) {
  visit([&](const std::string& name, Tensor& t) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing flow parameter '" + name + "'");
    if (it->second.shape() != t.shape()) throw ShapeError("flow parameter '" + name + "' has wrong shape");
    t = it->second;
  });
}

std::pair<Tensor, std::vector<double>> coupling_forward(const CouplingLayer& layer, const Tensor& x) {
  const Tensor xc = gather(x, layer.cond);
  const Tensor s = scale_output(layer, xc);
  const Tensor t = layer.shift.forward(xc);
  Tensor y = x;
  std::vector<double> log_det(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < layer.active.size(); ++j) {
      const std::size_t c = layer.active[j];
      y(i, c) = x(i, c) * std::exp(s(i, j)) + t(i, j);
      log_det[i] += s(i, j);
    }
  return {std::move(y), std::move(log_det)};
}

std::pair<Tensor, std::vector<double>> coupling_inverse(const CouplingLayer& layer, const Tensor& y) {
  const Tensor yc = gather(y, layer.cond);
  const Tensor s = scale_output(layer, yc);
  const Tensor t = layer.shift.forward(yc);
  Tensor x = y;
  std::vector<double> log_det(y.rows(), 0.0);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < layer.active.size(); ++j) {
      const std::size_t c = layer.active[j];
      x(i, c) = (y(i, c) - t(i, j)) * std::exp(-s(i, j));
      log_det[i] -= s(i, j);
    }
  return {std::move(x), std::move(log_det)};
}

std::vector<double> flow_log_prob(const FlowParameters& theta, const Tensor& x) {
  if (x.cols() != theta.spec.dim) throw ShapeError("flow_log_prob: dimension mismatch");
  Tensor z = x;
  std::vector<double> total(x.rows(), 0.0);
  for (const auto& layer : theta.layers) {
    auto [next, ld] = coupling_forward(layer, z);
    z = std::move(next);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += ld[i];
  }
  for (std::size_t i = 0; i < total.size(); ++i) {
    total[i] += std_normal_log_prob(z.row_span(i));
    if (!std::isfinite(total[i])) throw NumericalError("flow_log_prob: non-finite log density");
  }
  return total;
}

double flow_log_prob(const FlowParameters& theta, std::span<const double> x) {
  return flow_log_prob(theta, Tensor({1, x.size()}, std::vector<double>(x.begin(), x.end())))[0];
}

FlowEvaluation flow_sample(const FlowParameters& theta, Rng& rng, std::size_t count) {
  const std::size_t m = theta.spec.dim;
  Tensor z({count, m});
  for (double& v : z.data()) v = rng.normal();
  FlowEvaluation out;
  out.log_density.resize(count);
  out.log_det_sum.assign(count, 0.0);
  for (std::size_t i = 0; i < count; ++i) out.log_density[i] = std_normal_log_prob(z.row_span(i));
  Tensor x = z;
  for (std::size_t l = theta.layers.size(); l-- > 0;) {
    auto [prev, ld] = coupling_inverse(theta.layers[l], x);
    x = std::move(prev);
    // log p(x) = log p(z) + sum of forward log-dets = log p(z) - sum of inverse log-dets.
    for (std::size_t i = 0; i < count; ++i) out.log_det_sum[i] += ld[i];
  }
  for (std::size_t i = 0; i < count; ++i) out.log_density[i] -= out.log_det_sum[i];
  out.value = std::move(x);
  return out;
}

ad::Var flow_log_prob_graph(ad::GraphBuilder& gb, const FlowParameters& theta, ad::Var x) {
  const std::size_t m = theta.spec.dim;
  ad::Var z = x;
  ad::Var log_det;
  for (std::size_t l = 0; l < theta.layers.size(); ++l) {
    const auto& layer = theta.layers[l];
    const ad::Var pc = gb.constant(selector(m, layer.cond));
    const ad::Var pa = gb.constant(selector(m, layer.active));
    const ad::Var zc = gb.matmul(z, pc);
    const ad::Var za = gb.matmul(z, pa);
    const ad::Var s = gb.scale(gb.tanh(layer.scale.graph(gb, zc, layer_prefix(l) + ".s")), layer.scale_cap);
    const ad::Var t = layer.shift.graph(gb, zc, layer_prefix(l) + ".t");
    const ad::Var ya = za * gb.exp(s) + t;
    z = gb.matmul(zc, gb.transpose(pc)) + gb.matmul(ya, gb.transpose(pa));
    const ad::Var ld = gb.row_sum(s);
    log_det = log_det.valid() ? log_det + ld : ld;
  }
  const double c = -0.5 * static_cast<double>(m) * std::log(2.0 * std::numbers::pi);
  return gb.scale(gb.row_sum(gb.square(z)), -0.5) + c + log_det;
}

}  // namespace mdeq
