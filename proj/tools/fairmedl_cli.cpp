// Command-line front end: prepare | train | audit | report | verify.
//
// Exit codes: 0 success, 2 for configuration and data-ingestion problems
// (including bad command lines), 1 for everything else.

#include <CLI11.hpp>

#include "fairmedl/dataset.hpp"
#include "fairmedl/errors.hpp"
#include "fairmedl/experiment.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;
using namespace fairmedl;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::size_t> repeats;

  void apply(ExperimentConfig& config) const {
    if (seed) config.seed = *seed;
    if (jobs) config.jobs = *jobs;
    if (repeats) config.repeats = *repeats;
  }
};

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << content;
  if (!out) throw IngestionError("short write to " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fairness-aware mixed-effects training pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // let --seed/--jobs/--repeats appear after the subcommand

  std::uint64_t seed_flag = 0;
  std::size_t jobs_flag = 0, repeats_flag = 0;
  auto* seed_opt = app.add_option("--seed", seed_flag, "override the experiment seed");
  auto* jobs_opt = app.add_option("--jobs", jobs_flag, "override the worker count");
  auto* repeats_opt =
      app.add_option("--repeats", repeats_flag, "override the repeat count");

  // prepare ----------------------------------------------------------------
  auto* prepare = app.add_subcommand(
      "prepare", "ingest a CSV, inject probe features, cache the encoded bundle");
  std::string p_data, p_schema, p_out, p_config;
  std::size_t p_top_k = 0;
  prepare->add_option("--data", p_data, "input CSV file");
  prepare->add_option("--schema", p_schema, "column schema (TOML or JSON)");
  prepare->add_option("--out", p_out, "output directory");
  prepare->add_option("--config", p_config, "experiment config supplying defaults");
  prepare->add_option("--top-k", p_top_k, "clusters kept as the seen set");

  // train ------------------------------------------------------------------
  auto* train = app.add_subcommand(
      "train", "train every configured variant over repeated resamples");
  std::string t_config;
  train->add_option("--config", t_config, "experiment config file")->required();

  // audit ------------------------------------------------------------------
  auto* audit = app.add_subcommand(
      "audit", "compute fairness metrics for an external prediction CSV");
  std::string a_predictions, a_task = "classification", a_head, a_split, a_out;
  std::vector<std::string> a_sensitive;
  audit->add_option("--predictions", a_predictions, "prediction CSV file")
      ->required();
  audit
      ->add_option("--sensitive", a_sensitive,
                   "sensitive column names (repeat or comma-separate)")
      ->required()
      ->delimiter(',');
  audit->add_option("--task", a_task, "classification or regression");
  audit->add_option("--head", a_head, "restrict to one prediction head");
  audit->add_option("--split", a_split, "restrict to one data split");
  audit->add_option("--out", a_out, "directory for audit.json and audit.csv");

  // report -----------------------------------------------------------------
  auto* report = app.add_subcommand(
      "report", "merge run directories into summary tables and plot data");
  std::vector<std::string> r_runs;
  std::string r_out;
  report->add_option("--runs", r_runs, "runs directories to merge")
      ->required()
      ->take_all();
  report->add_option("--out", r_out, "output directory")->required();

  // verify -----------------------------------------------------------------
  auto* verify = app.add_subcommand(
      "verify", "recompute every stored metric from checkpoints and compare");
  std::string v_runs, v_cache;
  verify->add_option("--runs", v_runs, "runs directory to verify")->required();
  verify->add_option("--cache", v_cache, "bundle cache override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  Overrides over;
  if (seed_opt->count() > 0) over.seed = seed_flag;
  if (jobs_opt->count() > 0) over.jobs = jobs_flag;
  if (repeats_opt->count() > 0) over.repeats = repeats_flag;

  try {
    if (prepare->parsed()) {
      ExperimentConfig config;
      if (!p_config.empty()) config = load_experiment_config(p_config);
      if (!p_data.empty()) config.data_path = p_data;
      if (!p_schema.empty()) config.schema_path = p_schema;
      if (!p_out.empty()) config.out_dir = p_out;
      if (p_top_k > 0) config.top_k = p_top_k;
      over.apply(config);
      run_prepare(config, std::cout);
    } else if (train->parsed()) {
      ExperimentConfig config = load_experiment_config(t_config);
      over.apply(config);
      const std::size_t trained = run_train(config, std::cout);
      std::cout << "trained " << trained << " new repeats\n";
    } else if (audit->parsed()) {
      AuditOptions options;
      options.predictions_path = a_predictions;
      options.sensitive = a_sensitive;
      options.task = task_kind_from_string(a_task);
      options.head = a_head;
      options.split = a_split;
      const nlohmann::json result = run_audit(options, std::cerr);
      std::cout << result.dump(2) << "\n";
      if (!a_out.empty()) {
        fs::create_directories(a_out);
        write_text(fs::path(a_out) / "audit.json", result.dump(2) + "\n");
        write_text(fs::path(a_out) / "audit.csv", audit_to_csv(result));
      }
    } else if (report->parsed()) {
      run_report(r_runs, r_out, std::cout);
    } else if (verify->parsed()) {
      const double max_diff = run_verify(v_runs, v_cache, std::cout);
      std::cout << "ok (max deviation " << max_diff << ")\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
