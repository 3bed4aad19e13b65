#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mdeq/experiment.hpp"

namespace py = pybind11;
using namespace mdeq;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<ManifoldPoint>& pts, std::size_t d) {
  Array out({pts.size(), d});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = pts[i].coords[j];
  return out;
}

std::vector<ManifoldPoint> from_array(const Array& a, const Manifold& man) {
  if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(1)) != man.embed_dim())
    throw ShapeError("expected an array of shape (n, " + std::to_string(man.embed_dim()) + ")");
  auto m = a.unchecked<2>();
  std::vector<ManifoldPoint> out;
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    std::vector<double> v(man.embed_dim());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = m(i, static_cast<py::ssize_t>(j));
    out.push_back(ManifoldPoint::make(man, std::move(v)));
  }
  return out;
}

std::vector<double> to_vector(const Array& a) {
  if (a.ndim() != 1) throw ShapeError("expected a one-dimensional array");
  return std::vector<double>(a.data(), a.data() + a.size());
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["mean_mse"] = r.mean_mse;
  d["cov_mse"] = r.cov_mse;
  d["kl_q_p"] = r.kl_q_p;
  d["kl_p_q"] = r.kl_p_q;
  d["relative_ess"] = r.relative_ess;
  d["z_hat"] = r.z_hat;
  d["n_samples"] = r.n_samples;
  return d;
}

}  // namespace

PYBIND11_MODULE(mdeq, m) {
  m.doc() = "Manifold dequantization: targets, rejection sampling, metrics and experiment runs";
  m.attr("__version__") = artifact_version();

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("target_names", &target_names, "Names of the built-in targets");
  m.def(
      "target_info",
      [](const std::string& name) {
        const auto t = make_target(name);
        py::dict d;
        d["name"] = t.name;
        d["manifold"] = t.manifold.name();
        d["dim"] = t.manifold.embed_dim();
        d["log_upper_bound"] = t.log_upper_bound;
        return d;
      },
      py::arg("name"));
  m.def(
      "target_log_unnorm",
      [](const std::string& name, const Array& points) {
        const auto t = make_target(name);
        const auto pts = from_array(points, t.manifold);
        std::vector<double> out;
        for (const auto& p : pts) out.push_back(target_log_unnorm(t, p));
        return py::array(py::cast(out));
      },
      py::arg("name"), py::arg("points"), "Unnormalized target log density at each row of points");
  m.def(
      "rejection_sample",
      [](const std::string& name, std::size_t count, std::uint64_t seed) {
        const auto t = make_target(name);
        RejectionResult r;
        {
          py::gil_scoped_release release;
          r = rejection_sample(t, count, seed);
        }
        return py::make_tuple(to_array(r.points, t.manifold.embed_dim()), r.acceptance_rate);
      },
      py::arg("name"), py::arg("count"), py::arg("seed"), "Exact samples and the acceptance rate");

  m.def(
      "relative_ess",
      [](const Array& log_w) { return relative_ess_from_log_weights(to_vector(log_w)); }, py::arg("log_weights"));
  m.def(
      "relative_ess_from_weights", [](const Array& w) { return relative_ess_from_weights(to_vector(w)); },
      py::arg("weights"));
  m.def(
      "normalizer",
      [](const Array& log_w) {
        const auto z = normalizer_from_log_weights(to_vector(log_w));
        return py::make_tuple(z.z_hat, z.relative_se);
      },
      py::arg("log_weights"), "Importance-sampling normalizer and its relative standard error");
  m.def(
      "moment_errors",
      [](const Array& a, const Array& b) {
        if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("expected two-dimensional arrays");
        auto pts = [](const Array& x) {
          const std::size_t d = static_cast<std::size_t>(x.shape(1));
          std::vector<ManifoldPoint> out;
          for (py::ssize_t i = 0; i < x.shape(0); ++i) {
            const double* row = x.data(i, 0);
            out.push_back(ManifoldPoint{Manifold::sphere(d), Tensor({1, d}, std::vector<double>(row, row + d))});
          }
          return out;
        };
        const auto e = moment_errors(pts(a), pts(b));
        return py::make_tuple(e.mean_error, e.cov_error);
      },
      py::arg("a"), py::arg("b"), "Norm of the mean difference and Frobenius norm of the covariance difference");

  m.def(
      "parse_config", [](const std::string& text) { return parse_config_string(text).to_json(); }, py::arg("text"),
      "Validated config with defaults filled in, as canonical JSON");
  m.def(
      "run_experiment",
      [](const std::string& text, const std::string& out_dir) {
        auto c = parse_config_string(text);
        if (!out_dir.empty()) c.output_dir = out_dir;
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(c);
        }
        return report_dict(r.metrics);
      },
      py::arg("config"), py::arg("out_dir") = "", "Runs an experiment from config JSON and returns its metrics");

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def_property_readonly("target", [](const Checkpoint& c) { return c.config.target; })
      .def_property_readonly("config", [](const Checkpoint& c) { return c.config.to_json(); })
      .def_property_readonly("parameter_count", [](const Checkpoint& c) { return c.model.parameter_count(); })
      .def(
          "sample",
          [](const Checkpoint& c, std::size_t n, std::uint64_t seed) {
            Rng rng(seed);
            return to_array(model_sample(c.model, rng, n), c.model.manifold.embed_dim());
          },
          py::arg("n"), py::arg("seed"))
      .def(
          "log_density",
          [](const Checkpoint& c, const Array& points, std::size_t k, std::uint64_t seed) {
            const auto pts = from_array(points, c.model.manifold);
            std::vector<double> out;
            {
              py::gil_scoped_release release;
              out = marginal_log_density(c.model, pts, k, seed);
            }
            return py::array(py::cast(out));
          },
          py::arg("points"), py::arg("k") = 32, py::arg("seed") = 0, "Importance-sampled marginal log density")
      .def(
          "evaluate",
          [](const Checkpoint& c, const std::string& target, std::size_t n, const std::string& out_dir) {
            return report_dict(evaluate_checkpoint(c, target, n, out_dir));
          },
          py::arg("target"), py::arg("n"), py::arg("out_dir"));
}
