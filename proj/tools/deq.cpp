#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "mdeq/experiment.hpp"

namespace fs = std::filesystem;
using namespace mdeq;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericalError = 3;

int report_error(const std::string& kind, const std::string& message, int code) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  j["exit_code"] = code;
  std::cerr << j.dump() << '\n';
  return code;
}

void print_metrics(const MetricsReport& r) { std::cout << r.to_json() << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Manifold dequantization experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, target;
  std::uint64_t seed = 0;
  std::size_t trials = 10, n = 0;

  auto* fit = app.add_subcommand("fit", "Train a model and write metrics, samples and a checkpoint");
  fit->add_option("--config", config_path, "Experiment config (JSON)")->required();
  auto* fit_seed = fit->add_option("--seed", seed, "Seed, overriding the config");
  fit->add_option("--out", out_dir, "Output directory, overriding the config");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint against a target");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint.json from fit")->required();
  eval->add_option("--target", target, "Target name (default: the checkpoint's)");
  eval->add_option("--n", n, "Samples for the density-based metrics");
  eval->add_option("--out", out_dir, "Output directory (default: next to the checkpoint)");

  auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint or a target");
  auto* sample_ck = sample->add_option("--checkpoint", checkpoint_path, "checkpoint.json from fit");
  auto* sample_t = sample->add_option("--target", target, "Target name (rejection sampling)");
  sample_ck->excludes(sample_t);
  sample->add_option("--n", n, "Number of samples")->default_val(1000);
  sample->add_option("--seed", seed, "Seed")->default_val(0);
  sample->add_option("--out", out_dir, "Output directory")->required();

  auto* suite = app.add_subcommand("suite", "Run several seeds and aggregate the metrics");
  suite->add_option("--config", config_path, "Experiment config (JSON)")->required();
  auto* suite_seed = suite->add_option("--seed", seed, "First seed, overriding the config");
  suite->add_option("--trials", trials, "Number of trials")->default_val(10);
  suite->add_option("--out", out_dir, "Output directory, overriding the config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), kConfigError);
  }

  try {
    if (fit->parsed() || suite->parsed()) {
      ExperimentConfig c = parse_config(config_path);
      if (*fit_seed || *suite_seed) c.seed = seed;
      if (!out_dir.empty()) c.output_dir = out_dir;
      if (fit->parsed()) {
        print_metrics(run_experiment(c).metrics);
      } else {
        const auto row = trial_suite(c, trials);
        write_suite_csv(std::cout, {row});
      }
    } else if (eval->parsed()) {
      const auto ck = load_checkpoint(checkpoint_path);
      const std::string t = target.empty() ? ck.config.target : target;
      const fs::path dir = out_dir.empty() ? fs::path(checkpoint_path).parent_path() / "eval" : fs::path(out_dir);
      print_metrics(evaluate_checkpoint(ck, t, n == 0 ? ck.config.metrics.n : n, dir));
    } else if (sample->parsed()) {
      if (checkpoint_path.empty() == target.empty()) throw ConfigError("sample: give exactly one of --checkpoint, --target");
      if (n == 0) throw ConfigError("--n must be positive");
      fs::create_directories(out_dir);
      if (!checkpoint_path.empty()) {
        const auto ck = load_checkpoint(checkpoint_path);
        Rng rng(seed);
        std::ofstream os(fs::path(out_dir) / "samples_model.csv");
        write_samples_csv(os, model_sample(ck.model, rng, n),
                          "config_hash " + ck.config.hash() + "\nversion " + artifact_version() + "\nseed " +
                              std::to_string(seed));
      } else {
        const auto t = make_target(target);
        const auto r = rejection_sample(t, n, seed);
        const std::string comment = "target " + target + "\nversion " + artifact_version() + "\nseed " +
                                    std::to_string(seed) + "\nacceptance_rate " + std::to_string(r.acceptance_rate);
        std::ofstream csv(fs::path(out_dir) / "samples_target.csv");
        write_samples_csv(csv, r.points, comment);
        std::ofstream jl(fs::path(out_dir) / "samples_target.jsonl");
        write_samples_jsonl(jl, r.points, t);
      }
    }
  } catch (const ConfigError& e) {
    return report_error("config", e.what(), kConfigError);
  } catch (const FamilyMismatch& e) {
    return report_error("config", e.what(), kConfigError);
  } catch (const NumericalError& e) {
    return report_error("numerical", e.what(), kNumericalError);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return kOk;
}
