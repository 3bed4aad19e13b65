#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdeq/metrics.hpp"
#include "mdeq/objectives.hpp"
#include "mdeq/targets.hpp"

/// Config-driven experiment runs: sample the target, train, evaluate and
/// write plot-ready outputs.
namespace mdeq {

/// Artifact version written into every output file.
const std::string& artifact_version();

struct DataConfig {
  /// Fresh target samples for every batch; otherwise batches cycle through a
  /// fixed rejection-sampled dataset of fixed_size points.
  bool resample_each_iteration = true;
  std::size_t fixed_size = 10000;
  /// Directory for cached target samples; empty disables the disk cache.
  std::string cache_dir;
};

struct MetricsConfig {
  /// Samples for the density-based estimators (Z, KL, ESS).
  std::size_t n = 10000;
  /// Samples for the moment errors.
  std::size_t n_moments = 100000;
  /// Importance draws per marginal density evaluation.
  std::size_t k = 32;
};

struct OutputConfig {
  std::size_t grid_resolution = 64;
  std::size_t sample_count = 2000;
  bool record_wall_time = false;
};

struct ExperimentConfig {
  std::string target;
  std::uint64_t seed = 0;
  std::string output_dir;
  ModelSpec model;
  ObjectiveConfig objective;
  DataConfig data;
  MetricsConfig metrics;
  OutputConfig output;

  bool operator==(const ExperimentConfig& o) const { return to_json() == o.to_json(); }
  /// Canonical JSON with every field present.
  std::string to_json() const;
  /// FNV-1a 64 of the canonical JSON without output_dir, as 16 hex digits.
  std::string hash() const;
};

/// Defaults filled in for the given target: n_mc 1 (ELBO) or 4 (I.S.), and
/// fixed datasets for matrix-manifold targets.
ExperimentConfig default_config(const std::string& target, ObjectiveKind kind = ObjectiveKind::Elbo);

/// Validates and fills defaults; unknown keys and type errors raise
/// ConfigError naming the JSON pointer of the offending value.
ExperimentConfig parse_config_string(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Label used in suite tables, e.g. "Deq. RealNVP (I.S.)".
std::string method_label(const ExperimentConfig& config);

struct Checkpoint {
  ExperimentConfig config;
  Model model;
};

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config, const Model& model);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rejection samples for (target, seed, n); read from and written to
/// cache_dir when it is non-empty.
std::vector<ManifoldPoint> cached_target_samples(const TargetSpec& t, std::uint64_t seed, std::size_t n,
                                                 const std::string& cache_dir);

struct ExperimentResult {
  MetricsReport metrics;
  TrainingHistory history;
  Model model;
  std::vector<std::string> files;
};

/// Full run into config.output_dir: metrics.json, history.csv,
/// samples_model.csv, samples_target.csv, checkpoint.json and, on S^2 and
/// T^2, density_grid.csv. Identical config and seed give identical files.
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Metrics of a checkpoint against a target, written to out_dir/metrics.json.
MetricsReport evaluate_checkpoint(const Checkpoint& ck, const std::string& target, std::size_t n,
                                  const std::filesystem::path& out_dir);

struct SuiteRow {
  std::string method;
  /// Per-metric mean and standard error across trials, keyed by column name.
  std::map<std::string, std::pair<double, double>> columns;
};

/// Column names of suite tables, in order.
const std::vector<std::string>& suite_columns();
/// Mean and standard error of each metric over the reports.
SuiteRow aggregate_trials(const std::string& method, const std::vector<MetricsReport>& reports);
/// Runs seeds seed, seed+1, ... into out_dir/trial_<i> and writes out_dir/suite.csv.
/// With vary_seed false every trial reuses config.seed.
SuiteRow trial_suite(const ExperimentConfig& config, std::size_t n_trials, bool vary_seed = true);
void write_suite_csv(std::ostream& os, const std::vector<SuiteRow>& rows, const std::string& comment = "");

}  // namespace mdeq
