#pragma once

#include "fairmedl/dataset.hpp"
#include "fairmedl/stats.hpp"
#include "fairmedl/train.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace fairmedl {

// One declarative document that fully determines an experiment: where the
// data lives, how it is partitioned and encoded, which model variants train,
// and with what plan. Hashing the substance of this config together with the
// prepared data yields the provenance id stamped into every artifact.
struct ExperimentConfig {
  std::string data_path;    // input CSV
  std::string schema_path;  // column roles, TOML or JSON
  std::string out_dir = "fairmedl_out";
  std::string cache_dir;    // "" → $FAIRMEDL_CACHE → out_dir/cache

  std::size_t top_k = 6;    // most frequent clusters form the seen partition
  std::size_t folds = 10;   // rotation count of the canonical split
  std::size_t fold = 0;     // which rotation supplies val and test rows
  ProbeSpec probes{0, 0.5, 0.5, 0.5, 0};  // count 0 → no injected probes

  std::vector<Variant> variants{Variant::armed, Variant::fair_medl};
  ArchConfig arch;   // data-dependent fields are filled from the bundle
  TrainPlan plan;    // the variant field is replaced per requested variant
  std::size_t repeats = 20;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;

  void validate() const;
  std::string resolved_cache_dir() const;
  std::string runs_dir() const;
};

// Tolerant readers for user-written documents: unknown keys are rejected by
// name, missing keys keep their defaults. `base_dir` anchors relative paths.
ExperimentConfig experiment_config_from_json(const nlohmann::json& doc,
                                             const std::string& base_dir);
nlohmann::json experiment_config_to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::string& path);

DatasetSchema schema_from_config(const nlohmann::json& doc);
DatasetSchema load_schema_file(const std::string& path);

// Hash over the experiment substance (partition, probes, variants,
// architecture, plan, seed — not paths or worker counts) plus the prepared
// dataset fingerprint.
std::string experiment_provenance(const ExperimentConfig& config,
                                  const BundleCache& cache);

// CSV + schema → cleaned, probe-injected, partitioned bundle cache on disk.
BundleCache run_prepare(const ExperimentConfig& config, std::ostream& log);

// Cache → per-repeat run artifacts and per-variant statistical summaries
// under runs_dir(). Repeats whose stored artifact already carries the
// current provenance are skipped. Returns the number of repeats trained.
std::size_t run_train(const ExperimentConfig& config, std::ostream& log);

struct AuditOptions {
  std::string predictions_path;
  std::vector<std::string> sensitive;  // column names in the predictions CSV
  TaskKind task = TaskKind::classification;
  std::string head;   // optional row filter on the `head` column
  std::string split;  // optional row filter on the `split` column
};

// Standalone fairness report over a predictions CSV. Counterfactual scores
// are read from optional `cf_<variable>_<category>` columns; per-metric
// failures are recorded in the report, not thrown.
nlohmann::json run_audit(const AuditOptions& options, std::ostream& log);
std::string audit_to_csv(const nlohmann::json& report);

// Merges one or more run directories (same provenance required, duplicate
// repeats dropped) into table.csv, plot_<metric>.csv and importance.csv.
void run_report(const std::vector<std::string>& runs_dirs, const std::string& out_dir,
                std::ostream& log);

// Rebuilds every stored repeat from its checkpoint and the cached bundle,
// recomputes all reported numbers and artifacts, and returns the largest
// absolute difference found (0.0 for a fully faithful store).
double run_verify(const std::string& runs_dir, const std::string& cache_override,
                  std::ostream& log);

}  // namespace fairmedl
