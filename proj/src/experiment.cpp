#include "mdeq/experiment.hpp"

#include <algorithm>
#include <bit>
#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <sstream>

#ifndef MDEQ_VERSION
#define MDEQ_VERSION "0.0.0"
#endif

namespace mdeq {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

// Stream tags for substreams of the experiment seed.
constexpr std::uint64_t kModelStream = 0x6d6f64656c;
constexpr std::uint64_t kTrainStream = 0x747261696e;
constexpr std::uint64_t kDataStream = 0x64617461;
constexpr std::uint64_t kShuffleStream = 0x73687566;
constexpr std::uint64_t kEvalStream = 0x6576616c;
constexpr std::uint64_t kDensityStream = 0x64656e73;
constexpr std::uint64_t kMetricsStream = 0x6d657472;
constexpr std::uint64_t kOutputStream = 0x6f7574;

// Config parsing --------------------------------------------------------------

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "/" : path_, "expected an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    for (const auto& [k, v] : j_.items()) {
      if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
        fail(path_ + "/" + k, "unknown key '" + k + "'");
    }
  }
  bool has(const char* key) const { return j_.contains(key); }
  Reader child(const char* key) const {
    static const json empty = json::object();
    return Reader(has(key) ? j_.at(key) : empty, path_ + "/" + key);
  }

  void get(const char* key, std::string& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_string()) fail(at(key), "expected a string");
    out = j_.at(key).get<std::string>();
  }
  void get(const char* key, bool& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_boolean()) fail(at(key), "expected a boolean");
    out = j_.at(key).get<bool>();
  }
  void get(const char* key, double& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_number()) fail(at(key), "expected a number");
    out = j_.at(key).get<double>();
    if (!std::isfinite(out)) fail(at(key), "expected a finite number");
  }
  void get(const char* key, std::size_t& out, std::size_t min = 0) const {
    if (!has(key)) return;
    if (!j_.at(key).is_number_unsigned()) fail(at(key), "expected a non-negative integer");
    out = j_.at(key).get<std::size_t>();
    if (out < min) fail(at(key), "must be at least " + std::to_string(min));
  }
  void get_u64(const char* key, std::uint64_t& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_number_unsigned()) fail(at(key), "expected a non-negative integer");
    out = j_.at(key).get<std::uint64_t>();
  }
  std::string at(const char* key) const { return path_ + "/" + key; }
  [[noreturn]] static void fail(const std::string& pointer, const std::string& what) {
    throw ConfigError(pointer + ": " + what);
  }

 private:
  const json& j_;
  std::string path_;
};

DeqFamily default_family(const Manifold& m, TorusMap map) {
  switch (m.kind) {
    case ManifoldKind::Sphere:
      return DeqFamily::RadialLogNormal;
    case ManifoldKind::Torus:
      return map == TorusMap::Clifford ? DeqFamily::ProductRadialLogNormal : DeqFamily::WindingCategorical;
    case ManifoldKind::Integer:
      return DeqFamily::IntervalBeta;
    default:
      return DeqFamily::TriPlusGaussian;
  }
}

ordered_json config_json(const ExperimentConfig& c, bool with_paths) {
  const auto t = make_target(c.target);
  ordered_json j;
  j["target"] = c.target;
  j["seed"] = c.seed;
  if (with_paths) j["output_dir"] = c.output_dir;
  j["flow"] = {{"layers", c.model.flow_layers}, {"hidden", c.model.flow_hidden}, {"scale_cap", c.model.scale_cap}};
  j["dequantizer"] = {{"family", to_string(default_family(t.manifold, c.model.torus_map))},
                      {"hidden", c.model.deq_hidden},
                      {"init_sigma", c.model.init_sigma},
                      {"torus_map", to_string(c.model.torus_map)},
                      {"winding_window", c.model.winding_window}};
  const auto& o = c.objective;
  j["objective"] = {{"kind", to_string(o.kind)},
                    {"n_mc", o.n_mc},
                    {"batch_size", o.batch_size},
                    {"iterations", o.iterations},
                    {"learning_rate", o.learning_rate},
                    {"final_lr_fraction", o.final_lr_fraction},
                    {"gradient_clip", o.gradient_clip},
                    {"optimizer", o.optimizer == Optimizer::Adam ? "adam" : "sgd"},
                    {"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"eps", o.eps}};
  ordered_json data = {{"resample_each_iteration", c.data.resample_each_iteration},
                       {"fixed_size", c.data.fixed_size}};
  if (with_paths) data["cache_dir"] = c.data.cache_dir;
  j["data"] = data;
  j["metrics"] = {{"n", c.metrics.n}, {"n_moments", c.metrics.n_moments}, {"k", c.metrics.k}};
  j["output"] = {{"grid_resolution", c.output.grid_resolution},
                 {"sample_count", c.output.sample_count},
                 {"record_wall_time", c.output.record_wall_time}};
  return j;
}

std::string header_comment(const ExperimentConfig& c) {
  return "config_hash " + c.hash() + "\nversion " + artifact_version() + "\ntarget " + c.target + "\nseed " +
         std::to_string(c.seed);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
  if (!os) throw ConfigError("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string metrics_json(const MetricsReport& r, const ExperimentConfig& c) {
  ordered_json j = ordered_json::parse(r.to_json());
  j["config_hash"] = c.hash();
  j["version"] = artifact_version();
  return j.dump(2) + "\n";
}

// Little-endian doubles, base64 encoded.
std::string encode_doubles(const std::vector<double>& v) {
  std::string bytes;
  bytes.reserve(v.size() * 8);
  for (double d : v) {
    const auto u = std::bit_cast<std::uint64_t>(d);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
  }
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::string::const_iterator, 6, 8>>;
  std::string out(It(bytes.begin()), It(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

std::vector<double> decode_doubles(std::string s, std::size_t count) {
  const std::size_t pad = static_cast<std::size_t>(std::count(s.begin(), s.end(), '='));
  std::replace(s.begin(), s.end(), '=', 'A');
  using namespace boost::archive::iterators;
  using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
  std::string bytes;
  try {
    bytes.assign(It(s.begin()), It(s.end()));
  } catch (const std::exception&) {
    throw ConfigError("checkpoint: invalid base64 data");
  }
  if (bytes.size() < pad || bytes.size() - pad != count * 8) throw ConfigError("checkpoint: data length mismatch");
  std::vector<double> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
    v[i] = std::bit_cast<double>(u);
  }
  return v;
}

std::vector<ManifoldPoint> training_pool(const ExperimentConfig& c, const TargetSpec& t) {
  const auto& o = c.objective;
  const std::size_t n = c.data.resample_each_iteration ? o.iterations * o.batch_size : c.data.fixed_size;
  if (n == 0) return {};
  return cached_target_samples(t, substream(c.seed, kDataStream), n, c.data.cache_dir);
}

DataSource make_data_source(const ExperimentConfig& c, const std::vector<ManifoldPoint>& pool) {
  if (c.data.resample_each_iteration) {
    return [&pool](std::size_t it, std::size_t b) {
      return std::vector<ManifoldPoint>(pool.begin() + static_cast<std::ptrdiff_t>(it * b),
                                        pool.begin() + static_cast<std::ptrdiff_t>((it + 1) * b));
    };
  }
  // Epoch-wise shuffles of the fixed dataset, concatenated.
  auto order = std::make_shared<std::vector<std::size_t>>();
  auto epoch = std::make_shared<std::size_t>(0);
  const std::uint64_t seed = c.seed;
  return [&pool, order, epoch, seed](std::size_t it, std::size_t b) {
    std::vector<ManifoldPoint> batch;
    batch.reserve(b);
    const std::size_t n = pool.size();
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t pos = it * b + j;
      const std::size_t e = pos / n;
      if (order->empty() || *epoch != e) {
        order->resize(n);
        std::iota(order->begin(), order->end(), std::size_t{0});
        Rng rng(substream(seed, kShuffleStream, e));
        for (std::size_t i = n; i > 1; --i) std::swap((*order)[i - 1], (*order)[rng.below(i)]);
        *epoch = e;
      }
      batch.push_back(pool[(*order)[pos % n]]);
    }
    return batch;
  };
}

void write_density_grid(const fs::path& path, const ExperimentConfig& c, const Model& model, const TargetSpec& t,
                        double log_z) {
  const std::size_t res = c.output.grid_resolution;
  std::vector<ManifoldPoint> pts;
  std::vector<std::pair<double, double>> coords;
  const bool sphere = t.manifold.kind == ManifoldKind::Sphere;
  for (std::size_t i = 0; i < res; ++i) {
    for (std::size_t j = 0; j < res; ++j) {
      if (sphere) {
        const double lat = -90.0 + 180.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(res);
        const double lon = -180.0 + 360.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(res);
        const double a = lat * std::numbers::pi / 180.0, b = lon * std::numbers::pi / 180.0;
        pts.push_back(
            ManifoldPoint::make(t.manifold, {std::cos(a) * std::cos(b), std::cos(a) * std::sin(b), std::sin(a)}));
        coords.emplace_back(lat, lon);
      } else {
        const double t1 = kTwoPi * (static_cast<double>(i) + 0.5) / static_cast<double>(res);
        const double t2 = kTwoPi * (static_cast<double>(j) + 0.5) / static_cast<double>(res);
        pts.push_back(torus_from_angles(std::vector<double>{t1, t2}));
        coords.emplace_back(t1, t2);
      }
    }
  }
  const auto lq = marginal_log_density(model, pts, c.metrics.k, substream(c.seed, kOutputStream, 1));
  std::ostringstream os;
  std::istringstream lines(header_comment(c));
  for (std::string line; std::getline(lines, line);) os << "# " << line << '\n';
  os << (sphere ? "lat,lon" : "theta1,theta2") << ",model_log_density,target_log_density\n" << std::setprecision(17);
  for (std::size_t i = 0; i < pts.size(); ++i)
    os << coords[i].first << ',' << coords[i].second << ',' << lq[i] << ',' << target_log_unnorm(t, pts[i]) - log_z
       << '\n';
  write_file(path, os.str());
}

bool has_density_grid(const Manifold& m) {
  return (m.kind == ManifoldKind::Sphere && m.m == 3) || (m.kind == ManifoldKind::Torus && m.m == 2);
}

void write_error_log(const fs::path& dir, const ExperimentConfig& c, const std::string& kind, const std::string& what) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = what;
  j["config_hash"] = c.hash();
  j["version"] = artifact_version();
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream(dir / "error.json") << j.dump(2) << '\n';
}

}  // namespace

const std::string& artifact_version() {
  static const std::string v = MDEQ_VERSION;
  return v;
}

std::string ExperimentConfig::to_json() const { return config_json(*this, true).dump(2); }

std::string ExperimentConfig::hash() const {
  const std::string s = config_json(*this, false).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

ExperimentConfig default_config(const std::string& target, ObjectiveKind kind) {
  const auto t = make_target(target);
  ExperimentConfig c;
  c.target = target;
  c.objective.kind = kind;
  c.objective.n_mc = kind == ObjectiveKind::Elbo ? 1 : 4;
  c.objective.learning_rate = 3e-3;
  c.objective.final_lr_fraction = 0.01;
  if (t.manifold.is_matrix()) {
    c.data.resample_each_iteration = false;
    c.data.fixed_size = 200000;
    c.metrics.n_moments = 20000;
  }
  return c;
}

ExperimentConfig parse_config_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("/: invalid JSON: ") + e.what());
  }
  const Reader r(j, "");
  r.allow({"target", "seed", "output_dir", "flow", "dequantizer", "objective", "data", "metrics", "output"});
  if (!r.has("target")) Reader::fail("/target", "required key missing");
  if (!r.has("seed")) Reader::fail("/seed", "required key missing");
  std::string target;
  r.get("target", target);
  const auto names = target_names();
  if (std::find(names.begin(), names.end(), target) == names.end()) Reader::fail("/target", "unknown target '" + target + "'");

  const Reader ro = r.child("objective");
  ro.allow({"kind", "n_mc", "batch_size", "iterations", "learning_rate", "final_lr_fraction", "gradient_clip",
            "optimizer", "beta1", "beta2", "eps"});
  std::string kind = "elbo";
  ro.get("kind", kind);
  if (kind != "elbo" && kind != "is") Reader::fail("/objective/kind", "expected \"elbo\" or \"is\"");
  ExperimentConfig c = default_config(target, kind == "elbo" ? ObjectiveKind::Elbo : ObjectiveKind::ImportanceSampled);
  r.get_u64("seed", c.seed);
  r.get("output_dir", c.output_dir);

  auto& o = c.objective;
  ro.get("n_mc", o.n_mc, 1);
  ro.get("batch_size", o.batch_size, 1);
  ro.get("iterations", o.iterations);
  ro.get("learning_rate", o.learning_rate);
  if (!(o.learning_rate > 0.0)) Reader::fail("/objective/learning_rate", "must be positive");
  ro.get("final_lr_fraction", o.final_lr_fraction);
  if (!(o.final_lr_fraction >= 0.0 && o.final_lr_fraction <= 1.0))
    Reader::fail("/objective/final_lr_fraction", "must lie in [0, 1]");
  ro.get("gradient_clip", o.gradient_clip);
  std::string opt = "adam";
  ro.get("optimizer", opt);
  if (opt != "adam" && opt != "sgd") Reader::fail("/objective/optimizer", "expected \"adam\" or \"sgd\"");
  o.optimizer = opt == "adam" ? Optimizer::Adam : Optimizer::Sgd;
  ro.get("beta1", o.beta1);
  ro.get("beta2", o.beta2);
  ro.get("eps", o.eps);

  const Reader rf = r.child("flow");
  rf.allow({"layers", "hidden", "scale_cap"});
  rf.get("layers", c.model.flow_layers, 1);
  rf.get("hidden", c.model.flow_hidden, 1);
  rf.get("scale_cap", c.model.scale_cap);
  if (!(c.model.scale_cap > 0.0)) Reader::fail("/flow/scale_cap", "must be positive");

  const Reader rd = r.child("dequantizer");
  rd.allow({"family", "hidden", "init_sigma", "torus_map", "winding_window"});
  rd.get("hidden", c.model.deq_hidden, 1);
  rd.get("init_sigma", c.model.init_sigma);
  if (!(c.model.init_sigma >= kSigmaMin && c.model.init_sigma <= kSigmaMax))
    Reader::fail("/dequantizer/init_sigma", "out of range");
  std::string map = "clifford";
  rd.get("torus_map", map);
  if (map != "clifford" && map != "modulus") Reader::fail("/dequantizer/torus_map", "expected \"clifford\" or \"modulus\"");
  c.model.torus_map = map == "clifford" ? TorusMap::Clifford : TorusMap::Modulus;
  rd.get("winding_window", c.model.winding_window);
  const auto manifold = make_target(target).manifold;
  if (c.model.torus_map == TorusMap::Modulus && manifold.kind != ManifoldKind::Torus)
    Reader::fail("/dequantizer/torus_map", "modulus map needs a torus target");
  if (rd.has("family")) {
    std::string fam;
    rd.get("family", fam);
    DeqFamily f;
    try {
      f = deq_family_from_string(fam);
    } catch (const ConfigError& e) {
      Reader::fail("/dequantizer/family", e.what());
    }
    if (f != default_family(manifold, c.model.torus_map))
      Reader::fail("/dequantizer/family", "family " + fam + " does not dequantize " + manifold.name());
  }

  const Reader rdata = r.child("data");
  rdata.allow({"resample_each_iteration", "fixed_size", "cache_dir"});
  rdata.get("resample_each_iteration", c.data.resample_each_iteration);
  rdata.get("fixed_size", c.data.fixed_size, 1);
  rdata.get("cache_dir", c.data.cache_dir);

  const Reader rm = r.child("metrics");
  rm.allow({"n", "n_moments", "k"});
  rm.get("n", c.metrics.n, 2);
  rm.get("n_moments", c.metrics.n_moments);
  rm.get("k", c.metrics.k, 1);

  const Reader rout = r.child("output");
  rout.allow({"grid_resolution", "sample_count", "record_wall_time"});
  rout.get("grid_resolution", c.output.grid_resolution, 1);
  rout.get("sample_count", c.output.sample_count, 1);
  rout.get("record_wall_time", c.output.record_wall_time);
  return c;
}

ExperimentConfig parse_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError(path.string() + ": file not found");
  return parse_config_string(read_file(path));
}

std::string method_label(const ExperimentConfig& c) {
  return std::string("Deq. RealNVP (") + (c.objective.kind == ObjectiveKind::Elbo ? "ELBO" : "I.S.") + ")";
}

void save_checkpoint(const fs::path& path, const ExperimentConfig& config, const Model& model) {
  ordered_json j;
  j["format"] = "mdeq-checkpoint";
  j["version"] = artifact_version();
  j["config_hash"] = config.hash();
  j["config"] = config_json(config, true);
  ordered_json params = ordered_json::object();
  for (const auto& [name, t] : model.parameters())
    params[name] = {{"shape", t.shape()}, {"data", encode_doubles(t.storage())}};
  j["parameters"] = params;
  write_file(path, j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError(path.string() + ": checkpoint not found");
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "mdeq-checkpoint") throw ConfigError(path.string() + ": not a checkpoint");
  Checkpoint ck;
  ck.config = parse_config_string(j.at("config").dump());
  Rng rng(substream(ck.config.seed, kModelStream));
  ck.model = make_model(make_target(ck.config.target).manifold, ck.config.model, rng);
  ParameterMap params = ck.model.parameters();
  const auto& stored = j.at("parameters");
  if (stored.size() != params.size()) throw ConfigError("checkpoint: parameter set does not match the model");
  for (auto& [name, t] : params) {
    if (!stored.contains(name)) throw ConfigError("checkpoint: missing parameter " + name);
    const auto shape = stored.at(name).at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape()) throw ConfigError("checkpoint: parameter " + name + " has the wrong shape");
    t = Tensor(shape, decode_doubles(stored.at(name).at("data").get<std::string>(), t.size()));
  }
  ck.model.assign(params);
  return ck;
}

std::vector<ManifoldPoint> cached_target_samples(const TargetSpec& t, std::uint64_t seed, std::size_t n,
                                                 const std::string& cache_dir) {
  fs::path file;
  if (!cache_dir.empty()) {
    std::ostringstream name;
    name << t.name << "_" << std::hex << seed << std::dec << "_" << n << ".csv";
    file = fs::path(cache_dir) / name.str();
    if (fs::exists(file)) {
      std::ifstream is(file);
      auto pts = read_samples_csv(is, t.manifold);
      if (pts.size() == n) return pts;
    }
  }
  auto pts = rejection_sample(t, n, seed).points;
  if (!file.empty()) {
    fs::create_directories(file.parent_path());
    // Write then rename so concurrent runs never read a partial file.
    const fs::path tmp = file.string() + ".tmp" + std::to_string(seed % 100000);
    {
      std::ofstream os(tmp);
      write_samples_csv(os, pts, "target " + t.name + "\nversion " + artifact_version());
    }
    fs::rename(tmp, file);
  }
  return pts;
}

ExperimentResult run_experiment(const ExperimentConfig& c) {
  if (c.output_dir.empty()) throw ConfigError("/output_dir: no output directory given");
  const fs::path dir(c.output_dir);
  fs::create_directories(dir);
  fs::remove(dir / "error.json");
  const auto t = make_target(c.target);
  const std::string comment = header_comment(c);
  ExperimentResult out;
  try {
    Rng model_rng(substream(c.seed, kModelStream));
    Model initial = make_model(t.manifold, c.model, model_rng);
    const auto pool = training_pool(c, t);
    TrainOptions opts;
    opts.seed = substream(c.seed, kTrainStream);
    opts.record_wall_time = c.output.record_wall_time;
    TrainResult tr;
    try {
      tr = train(c.objective, make_data_source(c, pool), std::move(initial), opts);
    } catch (const TrainingAborted& e) {
      std::ostringstream hs;
      e.history().write_csv(hs, comment);
      write_file(dir / "history.csv", hs.str());
      save_checkpoint(dir / "checkpoint.json", c, e.last_good());
      throw;
    }
    out.model = tr.model;
    out.history = tr.history;

    const std::size_t n_eval = std::max(c.metrics.n, c.metrics.n_moments);
    const auto eval = cached_target_samples(t, substream(c.seed, kEvalStream), n_eval, c.data.cache_dir);
    const auto density = dequantized_density(out.model, c.metrics.k, substream(c.seed, kDensityStream));
    out.metrics =
        evaluate_metrics(density, t, c.metrics.n, substream(c.seed, kMetricsStream), &eval, c.metrics.n_moments);

    auto add = [&](const std::string& name, const std::string& text) {
      write_file(dir / name, text);
      out.files.push_back(name);
    };
    add("metrics.json", metrics_json(out.metrics, c));
    std::ostringstream hs;
    out.history.write_csv(hs, comment);
    add("history.csv", hs.str());
    Rng sample_rng(substream(c.seed, kOutputStream));
    std::ostringstream ms;
    write_samples_csv(ms, model_sample(out.model, sample_rng, c.output.sample_count), comment);
    add("samples_model.csv", ms.str());
    std::ostringstream ts;
    const std::size_t nt = std::min(c.output.sample_count, eval.size());
    write_samples_csv(ts, std::vector<ManifoldPoint>(eval.begin(), eval.begin() + static_cast<std::ptrdiff_t>(nt)),
                      comment);
    add("samples_target.csv", ts.str());
    if (has_density_grid(t.manifold)) {
      write_density_grid(dir / "density_grid.csv", c, out.model, t, std::log(out.metrics.z_hat));
      out.files.push_back("density_grid.csv");
    }
    save_checkpoint(dir / "checkpoint.json", c, out.model);
    out.files.push_back("checkpoint.json");
  } catch (const ConfigError& e) {
    write_error_log(dir, c, "config", e.what());
    throw;
  } catch (const NumericalError& e) {
    write_error_log(dir, c, "numerical", e.what());
    throw;
  } catch (const std::exception& e) {
    write_error_log(dir, c, "internal", e.what());
    throw;
  }
  return out;
}

MetricsReport evaluate_checkpoint(const Checkpoint& ck, const std::string& target, std::size_t n,
                                  const fs::path& out_dir) {
  const auto t = make_target(target);
  if (!(t.manifold == ck.model.manifold))
    throw ConfigError("target " + target + " lives on " + t.manifold.name() + ", the checkpoint on " +
                      ck.model.manifold.name());
  if (n < 2) throw ConfigError("--n must be at least 2");
  ExperimentConfig c = ck.config;
  c.target = target;
  c.metrics.n = n;
  const std::size_t n_eval = std::max(n, c.metrics.n_moments);
  const auto eval = cached_target_samples(t, substream(c.seed, kEvalStream), n_eval, c.data.cache_dir);
  const auto density = dequantized_density(ck.model, c.metrics.k, substream(c.seed, kDensityStream));
  const auto r = evaluate_metrics(density, t, n, substream(c.seed, kMetricsStream), &eval, c.metrics.n_moments);
  fs::create_directories(out_dir);
  write_file(out_dir / "metrics.json", metrics_json(r, c));
  return r;
}

const std::vector<std::string>& suite_columns() {
  static const std::vector<std::string> cols = {"Mean MSE", "Covariance MSE", "KL(q‖p)", "KL(p‖q)", "Relative ESS"};
  return cols;
}

SuiteRow aggregate_trials(const std::string& method, const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) throw ConfigError("aggregate_trials: need at least two trials");
  SuiteRow row;
  row.method = method;
  const auto& cols = suite_columns();
  const std::vector<double MetricsReport::*> fields = {&MetricsReport::mean_mse, &MetricsReport::cov_mse,
                                                       &MetricsReport::kl_q_p, &MetricsReport::kl_p_q,
                                                       &MetricsReport::relative_ess};
  const double n = static_cast<double>(reports.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    double m = 0.0;
    for (const auto& r : reports) m += r.*fields[i];
    m /= n;
    double s = 0.0;
    for (const auto& r : reports) s += (r.*fields[i] - m) * (r.*fields[i] - m);
    row.columns[cols[i]] = {m, std::sqrt(s / (n - 1.0) / n)};
  }
  return row;
}

SuiteRow trial_suite(const ExperimentConfig& config, std::size_t n_trials, bool vary_seed) {
  if (n_trials < 2) throw ConfigError("--trials must be at least 2");
  if (config.output_dir.empty()) throw ConfigError("/output_dir: no output directory given");
  std::vector<MetricsReport> reports;
  for (std::size_t i = 0; i < n_trials; ++i) {
    ExperimentConfig c = config;
    if (vary_seed) c.seed = config.seed + i;
    c.output_dir = (fs::path(config.output_dir) / ("trial_" + std::to_string(i))).string();
    reports.push_back(run_experiment(c).metrics);
  }
  auto row = aggregate_trials(method_label(config), reports);
  std::ostringstream os;
  write_suite_csv(os, {row}, header_comment(config) + "\ntrials " + std::to_string(n_trials));
  write_file(fs::path(config.output_dir) / "suite.csv", os.str());
  return row;
}

void write_suite_csv(std::ostream& os, const std::vector<SuiteRow>& rows, const std::string& comment) {
  std::istringstream lines(comment);
  for (std::string line; std::getline(lines, line);) os << "# " << line << '\n';
  os << "Method";
  for (const auto& c : suite_columns()) os << ',' << c;
  os << '\n' << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.method;
    for (const auto& c : suite_columns()) {
      const auto& [m, se] = r.columns.at(c);
      os << ',' << m << " ± " << se;
    }
    os << '\n';
  }
}

}  // namespace mdeq
