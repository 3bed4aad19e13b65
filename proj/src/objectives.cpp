#include "mdeq/objectives.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

#include "mdeq/parallel.hpp"

namespace mdeq {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

std::size_t ipow(std::size_t b, std::size_t e) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < e; ++i) r *= b;
  return r;
}

std::size_t winding_combinations(const Model& model) {
  return ipow(2 * model.winding_window + 1, model.manifold.m);
}

// k-th combination of winding indices in lexicographic order.
std::vector<std::int64_t> winding_combination(std::size_t index, std::size_t circles, std::size_t window) {
  const std::size_t width = 2 * window + 1;
  std::vector<std::int64_t> k(circles);
  for (std::size_t c = circles; c-- > 0;) {
    k[c] = static_cast<std::int64_t>(index % width) - static_cast<std::int64_t>(window);
    index /= width;
  }
  return k;
}

double std_normal_log_prob(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return -0.5 * s - 0.5 * static_cast<double>(x.size()) * kLog2Pi;
}

// Log Gram-Jacobian of the Cholesky polar map as a function of the free
// entries of L; n x p with n > p uses the numeric Gram route at O = [Id; 0].
double tri_log_gram(std::span<const double> free, std::size_t n, std::size_t p, std::span<double> grad) {
  const Tensor l = tri_from_free(free, p);
  if (n == p) {
    Tensor g;
    const double v = orthogonal_log_gram_det(l, grad.empty() ? nullptr : &g);
    if (!grad.empty()) {
      const auto flat = tri_free_entries(g);
      std::copy(flat.begin(), flat.end(), grad.begin());
    }
    return v;
  }
  auto value_at = [n, p](const Tensor& lt) {
    const Tensor pm = matmul(lt, lt.transposed());
    Tensor m({n, p});
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) m(i, j) = pm(i, j);
    return stiefel_log_gram_det(m);
  };
  const double v = value_at(l);
  if (!grad.empty()) {
    std::vector<double> w(free.begin(), free.end());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double x0 = w[i], h = 1e-5 * (1.0 + std::abs(x0));
      w[i] = x0 + h;
      const double fp = value_at(tri_from_free(w, p));
      w[i] = x0 - h;
      const double fm = value_at(tri_from_free(w, p));
      w[i] = x0;
      grad[i] = (fp - fm) / (2.0 * h);
    }
  }
  return v;
}

// Scatter matrix T (tri(p) x p*p) with free * T = row-major L.
Tensor tri_scatter(std::size_t p) {
  Tensor t({tri_size(p), p * p});
  std::size_t k = 0;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j <= i; ++j) t(k++, i * p + j) = 1.0;
  return t;
}

std::size_t rows_per_datum(const Model& model, std::size_t n_mc) {
  if (model.is_modulus()) return winding_combinations(model);
  return n_mc * (model.manifold.kind == ManifoldKind::SpecialOrthogonal ? 2 : 1);
}

void check_point(const Model& model, const ManifoldPoint& y) {
  if (!(y.manifold == model.manifold))
    throw FamilyMismatch("point on " + y.manifold.name() + " given to a model of " + model.manifold.name());
  const double res = constraint_check(y);
  if (!(res < 1e-6)) throw ConstraintViolation("point off " + y.manifold.name() + " (residual " + std::to_string(res) + ")");
}

}  // namespace

std::string to_string(ObjectiveKind k) { return k == ObjectiveKind::Elbo ? "elbo" : "is"; }
std::string to_string(TorusMap m) { return m == TorusMap::Clifford ? "clifford" : "modulus"; }

// Model ----------------------------------------------------------------------

std::size_t Model::ambient_dim() const {
  if (is_modulus()) return manifold.m;
  return manifold.embed_dim();
}

ParameterMap Model::parameters() const {
  ParameterMap out = phi.parameters();
  if (flow_ambient) out.merge(theta.parameters());
  return out;
}

void Model::assign(const ParameterMap& params) {
  phi.assign(params);
  if (flow_ambient) theta.assign(params);
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, t] : parameters()) {
    // Modulus training enumerates windings exactly; the categorical is unused.
    if (is_modulus() && name.rfind(kDeqPrefix, 0) == 0) continue;
    names.push_back(name);
  }
  return names;
}

std::size_t Model::parameter_count() const {
  return phi.parameter_count() + (flow_ambient ? theta.parameter_count() : 0);
}

Model make_model(const Manifold& manifold, const ModelSpec& spec, Rng& rng) {
  Model model;
  model.manifold = manifold;
  model.torus_map = spec.torus_map;
  model.winding_window = spec.winding_window;
  DequantizerSpec ds;
  ds.hidden = spec.deq_hidden;
  ds.init_sigma = spec.init_sigma;
  ds.in_dim = manifold.embed_dim();
  ds.window = spec.winding_window;
  switch (manifold.kind) {
    case ManifoldKind::Sphere:
      ds.family = DeqFamily::RadialLogNormal;
      break;
    case ManifoldKind::Torus:
      ds.family = spec.torus_map == TorusMap::Clifford ? DeqFamily::ProductRadialLogNormal
                                                       : DeqFamily::WindingCategorical;
      ds.size = manifold.m;
      break;
    case ManifoldKind::Stiefel:
    case ManifoldKind::Orthogonal:
    case ManifoldKind::SpecialOrthogonal:
      ds.family = DeqFamily::TriPlusGaussian;
      ds.size = manifold.p;
      break;
    case ManifoldKind::Integer:
      ds.family = DeqFamily::IntervalBeta;
      model.flow_ambient = false;
      break;
  }
  // Couplings need two coordinates; a one-dimensional ambient space keeps the base normal.
  if (model.ambient_dim() < 2) model.flow_ambient = false;
  if (manifold.kind == ManifoldKind::SpecialOrthogonal) model.reflection = default_reflection(manifold.n);
  if (model.flow_ambient) {
    FlowSpec fs;
    fs.dim = model.ambient_dim();
    fs.n_layers = spec.flow_layers;
    fs.hidden = spec.flow_hidden;
    fs.scale_cap = spec.scale_cap;
    model.theta = flow_init(fs, rng);
  }
  model.phi = dequantizer_init(ds, rng);
  return model;
}

double ambient_log_prob(const Model& model, std::span<const double> x) {
  if (model.flow_ambient) return flow_log_prob(model.theta, x);
  return std_normal_log_prob(x);
}

double log_weight(const Model& model, const ManifoldPoint& y, const DequantizationDraw& draw) {
  const auto& man = model.manifold;
  if (!(y.manifold == man)) throw FamilyMismatch("log_weight: point/model manifold mismatch");
  std::vector<double> x;
  double log_factor = 0.0;
  if (model.is_modulus()) {
    const auto* k = std::get_if<WindingIndex>(&draw.z);
    if (k == nullptr) throw FamilyMismatch("log_weight: modulus model needs winding indices");
    const auto angles = torus_angles(y);
    for (std::size_t i = 0; i < angles.size(); ++i) x.push_back(angles[i] + kTwoPi * static_cast<double>(k->k[i]));
    return ambient_log_prob(model, x) - draw.log_q;
  }
  switch (man.kind) {
    case ManifoldKind::Sphere: {
      const double r = std::get<PositiveRadius>(draw.z).r;
      const Tensor xt = sphere_join(y, {r});
      x = xt.storage();
      log_factor = static_cast<double>(man.m - 1) * std::log(r);
      break;
    }
    case ManifoldKind::Torus: {
      const auto& r = std::get<RadiusVector>(draw.z);
      x = torus_join(y, r).storage();
      for (double ri : r.r) log_factor += std::log(ri);
      break;
    }
    case ManifoldKind::Stiefel:
    case ManifoldKind::Orthogonal:
    case ManifoldKind::SpecialOrthogonal: {
      const auto& l = std::get<TriPlus>(draw.z);
      x = cholesky_polar_join(y, l).storage();
      const auto free = tri_free_entries(l.l);
      log_factor = -tri_log_gram(free, man.n, man.p, {});
      break;
    }
    case ManifoldKind::Integer: {
      const double u = std::get<UnitInterval>(draw.z).u;
      x = {integer_join(y.as_integer(), u)};
      break;
    }
  }
  return ambient_log_prob(model, x) + log_factor - draw.log_q;
}

// Objective graph ------------------------------------------------------------

ObjectiveGraph build_objective_graph(const Model& model, ObjectiveKind kind, std::size_t n_mc) {
  if (n_mc < 1) throw ConfigError("n_mc must be at least 1");
  ad::GraphBuilder gb;
  ObjectiveGraph og;
  og.kind = kind;
  og.n_mc = n_mc;
  og.rows_per_datum = rows_per_datum(model, n_mc);
  const auto& man = model.manifold;
  const std::size_t d = model.ambient_dim();
  auto ambient = [&](ad::Var x) {
    if (model.flow_ambient) return flow_log_prob_graph(gb, model.theta, x);
    return gb.scale(gb.row_sum(gb.square(x)), -0.5) + (-0.5 * static_cast<double>(d) * kLog2Pi);
  };
  ad::Var logw;
  double log_k = std::log(static_cast<double>(n_mc));
  if (model.is_modulus()) {
    // Uniform q over the full window: the IS sum is the exact truncated marginal.
    og.kind = ObjectiveKind::ImportanceSampled;
    const double log_w = std::log(static_cast<double>(og.rows_per_datum));
    logw = ambient(gb.leaf("x")) + log_w;
    log_k = log_w;
  } else {
    const ad::Var y = gb.leaf("y");
    const DeqGraph dq = deq_sample_graph(gb, model.phi, y, gb.leaf("noise"));
    switch (man.kind) {
      case ManifoldKind::Sphere: {
        const ad::Var x = y * dq.z;
        logw = ambient(x) + gb.scale(dq.log_z, static_cast<double>(man.m - 1)) - dq.log_q;
        break;
      }
      case ManifoldKind::Torus: {
        Tensor e({man.m, 2 * man.m});
        for (std::size_t i = 0; i < man.m; ++i) e(i, 2 * i) = e(i, 2 * i + 1) = 1.0;
        const ad::Var x = y * gb.matmul(dq.z, gb.constant(e));
        logw = ambient(x) + gb.row_sum(dq.log_z) - dq.log_q;
        break;
      }
      case ManifoldKind::Stiefel:
      case ManifoldKind::Orthogonal:
      case ManifoldKind::SpecialOrthogonal: {
        const std::size_t n = man.n, p = man.p;
        const ad::Var l = gb.matmul(dq.z, gb.constant(tri_scatter(p)));
        const ad::Var pm = gb.batch_matmul(l, l, p, p, p, true);
        const ad::Var m = gb.batch_matmul(gb.leaf("o"), pm, n, p, p);
        auto fn = std::make_shared<ad::RowFunction>(ad::RowFunction{
            "log_gram_jacobian", [n, p](std::span<const double> row, std::span<double> grad) {
              return tri_log_gram(row, n, p, grad);
            }});
        logw = ambient(m) - gb.row_function(dq.z, fn) - dq.log_q;
        break;
      }
      case ManifoldKind::Integer: {
        logw = ambient(gb.leaf("n") + dq.z) - dq.log_q;
        break;
      }
    }
  }
  const ad::Var grouped = gb.reshape(logw, og.rows_per_datum);
  ad::Var per_datum;
  if (og.kind == ObjectiveKind::Elbo) {
    per_datum = gb.scale(gb.row_sum(grouped), 1.0 / static_cast<double>(og.rows_per_datum));
  } else {
    per_datum = gb.logsumexp_rows(grouped) + (-log_k);
  }
  og.graph = gb.build({{"objective", gb.mean(per_datum)}, {"logw", logw}, {"per_datum", per_datum}});
  return og;
}

void bind_parameters(const Model& model, ad::Bindings& b) {
  for (auto& [name, t] : model.parameters()) b[name] = t;
}

ad::Bindings batch_bindings(const Model& model, const ObjectiveGraph& og, const std::vector<ManifoldPoint>& batch,
                            std::uint64_t seed, std::uint64_t stream) {
  if (batch.empty()) throw Error("empty batch");
  const auto& man = model.manifold;
  const std::size_t rpd = og.rows_per_datum;
  const std::size_t rows = batch.size() * rpd;
  ad::Bindings b;
  if (model.is_modulus()) {
    Tensor x({rows, man.m});
    for (std::size_t i = 0; i < batch.size(); ++i) {
      check_point(model, batch[i]);
      const auto angles = torus_angles(batch[i]);
      for (std::size_t c = 0; c < rpd; ++c) {
        const auto k = winding_combination(c, man.m, model.winding_window);
        for (std::size_t j = 0; j < man.m; ++j) x(i * rpd + c, j) = angles[j] + kTwoPi * static_cast<double>(k[j]);
      }
    }
    b["x"] = std::move(x);
    return b;
  }
  const std::size_t din = man.embed_dim();
  const std::size_t daux = aux_dim(model.phi.spec);
  const bool son = man.kind == ManifoldKind::SpecialOrthogonal;
  const std::size_t copies = son ? 2 : 1;
  Tensor y({rows, din}), noise({rows, daux});
  Tensor o = man.is_matrix() ? Tensor({rows, din}) : Tensor();
  Tensor nn = man.kind == ManifoldKind::Integer ? Tensor({rows, 1}) : Tensor();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pt = batch[i];
    check_point(model, pt);
    Rng rng(substream(seed, stream, i));
    Tensor reflected;
    if (son) reflected = matmul(model.reflection, pt.as_matrix());
    for (std::size_t k = 0; k < og.n_mc; ++k) {
      std::vector<double> e(daux);
      for (double& v : e) v = rng.normal();
      for (std::size_t s = 0; s < copies; ++s) {
        const std::size_t row = i * rpd + k * copies + s;
        std::copy(pt.coords.data().begin(), pt.coords.data().end(), y.row_span(row).begin());
        std::copy(e.begin(), e.end(), noise.row_span(row).begin());
        if (man.is_matrix()) {
          const auto src = s == 0 ? pt.coords.data() : std::span<const double>(reflected.data());
          std::copy(src.begin(), src.end(), o.row_span(row).begin());
        }
        if (man.kind == ManifoldKind::Integer) nn(row, 0) = static_cast<double>(pt.as_integer());
      }
    }
  }
  b["y"] = std::move(y);
  b["noise"] = std::move(noise);
  if (man.is_matrix()) b["o"] = std::move(o);
  if (man.kind == ManifoldKind::Integer) b["n"] = std::move(nn);
  return b;
}

ObjectiveResult evaluate_objective(const Model& model, ObjectiveKind kind, const std::vector<ManifoldPoint>& batch,
                                   std::size_t n_mc, std::uint64_t seed, bool with_gradients) {
  const ObjectiveGraph og = build_objective_graph(model, kind, n_mc);
  ad::Bindings b = batch_bindings(model, og, batch, seed, 0);
  bind_parameters(model, b);
  ObjectiveResult out;
  out.rows_per_datum = og.rows_per_datum;
  const ad::Evaluation ev = ad::evaluate_all(og.graph, b);
  out.value = ev.output("objective").item();
  out.log_weights = ev.output("logw").storage();
  out.per_datum = ev.output("per_datum").storage();
  if (with_gradients) {
    auto g = ad::gradient(og.graph, b, model.parameter_names());
    out.gradients = std::move(g.grads);
  }
  return out;
}

ObjectiveResult elbo(const Model& model, const std::vector<ManifoldPoint>& batch, std::size_t n_mc, Rng& rng) {
  return evaluate_objective(model, ObjectiveKind::Elbo, batch, n_mc, rng.next());
}

ObjectiveResult iwll(const Model& model, const std::vector<ManifoldPoint>& batch, std::size_t n_mc, Rng& rng) {
  return evaluate_objective(model, ObjectiveKind::ImportanceSampled, batch, n_mc, rng.next());
}

ObjectiveResult son_elbo(const Model& model, const std::vector<ManifoldPoint>& batch, std::size_t n_mc, Rng& rng) {
  if (model.manifold.kind != ManifoldKind::SpecialOrthogonal) throw FamilyMismatch("son_elbo needs an SO(n) model");
  return elbo(model, batch, n_mc, rng);
}

std::vector<double> marginal_log_density(const Model& model, const std::vector<ManifoldPoint>& points, std::size_t k,
                                         std::uint64_t seed) {
  std::vector<double> out(points.size());
  if (points.empty()) return out;
  const ObjectiveGraph og = build_objective_graph(model, ObjectiveKind::ImportanceSampled, k);
  const std::size_t chunk = std::max<std::size_t>(1, 8192 / og.rows_per_datum);
  const std::size_t n_chunks = (points.size() + chunk - 1) / chunk;
  ad::Bindings params;
  bind_parameters(model, params);
  parallel_for(n_chunks, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(points.size(), lo + chunk);
    const std::vector<ManifoldPoint> part(points.begin() + static_cast<std::ptrdiff_t>(lo),
                                          points.begin() + static_cast<std::ptrdiff_t>(hi));
    ad::Bindings b = batch_bindings(model, og, part, seed, c);
    for (const auto& [name, t] : params) b[name] = t;
    const ad::Evaluation ev = ad::evaluate_all(og.graph, b);
    const Tensor& pd = ev.output("per_datum");
    for (std::size_t i = lo; i < hi; ++i) out[i] = pd[i - lo];
  });
  return out;
}

double marginal_log_density(const Model& model, const ManifoldPoint& y, std::size_t k, Rng& rng) {
  return marginal_log_density(model, std::vector<ManifoldPoint>{y}, k, rng.next())[0];
}

std::vector<ManifoldPoint> model_sample(const Model& model, Rng& rng, std::size_t count) {
  const auto& man = model.manifold;
  const std::size_t d = model.ambient_dim();
  Tensor x;
  if (model.flow_ambient) {
    x = flow_sample(model.theta, rng, count).value;
  } else {
    x = Tensor({count, d});
    for (double& v : x.data()) v = rng.normal();
  }
  std::vector<ManifoldPoint> out;
  out.reserve(count);
  Tensor spare;
  for (std::size_t i = 0; i < count; ++i) {
    auto row = x.row_span(i);
    if (man.is_matrix()) {
      // Ambient points with numerically rank-deficient M (a null set) are redrawn.
      for (;;) {
        const auto m = linalg::to_mat(Tensor({man.n, man.p}, std::vector<double>(row.begin(), row.end())));
        if (linalg::jacobi_eigen(linalg::mul_tn(m, m)).values.front() >= kRankTolerance) break;
        if (model.flow_ambient) {
          spare = flow_sample(model.theta, rng, 1).value;
        } else {
          spare = Tensor({1, d});
          for (double& v : spare.data()) v = rng.normal();
        }
        row = spare.row_span(0);
      }
    }
    const Tensor xi({1, d}, std::vector<double>(row.begin(), row.end()));
    if (model.is_modulus()) {
      out.push_back(torus_from_angles(modulus_split(row).angles));
      continue;
    }
    switch (man.kind) {
      case ManifoldKind::Sphere:
        out.push_back(sphere_split(xi).y);
        break;
      case ManifoldKind::Torus:
        out.push_back(torus_split(xi).y);
        break;
      case ManifoldKind::Stiefel:
      case ManifoldKind::Orthogonal:
      case ManifoldKind::SpecialOrthogonal: {
        Tensor o = cholesky_polar_split(xi.reshaped({man.n, man.p})).y.as_matrix();
        if (man.kind == ManifoldKind::SpecialOrthogonal && linalg::determinant(o) < 0.0) o = matmul(model.reflection, o);
        out.push_back(ManifoldPoint{man, o.reshaped({1, man.n * man.p})});
        break;
      }
      case ManifoldKind::Integer:
        out.push_back(integer_split(row[0]).y);
        break;
    }
  }
  return out;
}

// Training -------------------------------------------------------------------

void TrainingHistory::write_csv(std::ostream& os, const std::string& comment) const {
  if (!comment.empty()) {
    std::istringstream lines(comment);
    std::string line;
    while (std::getline(lines, line)) os << "# " << line << '\n';
  }
  os << "iteration,loss,grad_norm,millis\n";
  for (std::size_t i = 0; i < loss.size(); ++i) {
    os << i << ',' << std::setprecision(17) << loss[i] << ',' << grad_norm[i] << ',' << std::setprecision(6)
       << millis[i] << '\n';
  }
}

TrainResult train(const ObjectiveConfig& config, const DataSource& data, Model initial, const TrainOptions& options) {
  if (config.n_mc < 1) throw ConfigError("n_mc must be at least 1");
  if (!(config.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(config.final_lr_fraction >= 0.0 && config.final_lr_fraction <= 1.0))
    throw ConfigError("final_lr_fraction must lie in [0, 1]");
  if (config.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  TrainResult result{std::move(initial), {}};
  if (config.iterations == 0) return result;
  Model& model = result.model;
  TrainingHistory& hist = result.history;
  const ObjectiveGraph og = build_objective_graph(model, config.kind, config.n_mc);
  const auto names = model.parameter_names();
  ParameterMap params = model.parameters();
  ParameterMap m1, m2;
  for (const auto& n : names) {
    m1[n] = Tensor(params.at(n).shape());
    m2[n] = Tensor(params.at(n).shape());
  }
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const auto batch = data(it, config.batch_size);
    ad::Bindings b = batch_bindings(model, og, batch, options.seed, it);
    for (const auto& [name, t] : params) b[name] = t;
    ad::GradientResult g;
    auto abort = [&](const std::string& why) {
      model.assign(params);
      throw TrainingAborted("training aborted at iteration " + std::to_string(it) + ": " + why, model, hist, it);
    };
    try {
      g = ad::gradient(og.graph, b, names);
    } catch (const NumericalError& e) {
      abort(e.what());
    }
    const double loss = -g.value.item();
    double sq = 0.0;
    for (const auto& [name, t] : g.grads)
      for (double v : t.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(loss) || !std::isfinite(norm)) abort("non-finite loss or gradient");
    const double clip = (config.gradient_clip > 0.0 && norm > config.gradient_clip) ? config.gradient_clip / norm : 1.0;
    b1t *= config.beta1;
    b2t *= config.beta2;
    const double progress = static_cast<double>(it) / static_cast<double>(config.iterations);
    const double lr = config.learning_rate * (config.final_lr_fraction + (1.0 - config.final_lr_fraction) * 0.5 *
                                                                            (1.0 + std::cos(std::numbers::pi * progress)));
    for (const auto& n : names) {
      Tensor& p = params.at(n);
      const Tensor& gr = g.grads.at(n);
      if (config.optimizer == Optimizer::Sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] += lr * clip * gr[i];
        continue;
      }
      Tensor& a = m1.at(n);
      Tensor& v = m2.at(n);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = -clip * gr[i];  // gradient of the loss
        a[i] = config.beta1 * a[i] + (1.0 - config.beta1) * gi;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
        const double mh = a[i] / (1.0 - b1t), vh = v[i] / (1.0 - b2t);
        p[i] -= lr * mh / (std::sqrt(vh) + config.eps);
      }
    }
    hist.loss.push_back(loss);
    hist.grad_norm.push_back(norm);
    double ms = 0.0;
    if (options.record_wall_time)
      ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    hist.millis.push_back(ms);
    if (options.progress) options.progress(it, loss);
  }
  model.assign(params);
  return result;
}

}  // namespace mdeq
