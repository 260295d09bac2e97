#include "fairmedl/experiment.hpp"

#include "fairmedl/config_text.hpp"
#include "fairmedl/errors.hpp"
#include "fairmedl/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <utility>

namespace fairmedl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- small file helpers -------------------------------------------------------

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << content;
  if (!out) throw IngestionError("short write to " + path.string());
}

json parse_artifact(const fs::path& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
}

// ---- strict config field access -------------------------------------------------

void expect_keys(const json& doc, const std::string& context,
                 const std::set<std::string>& allowed) {
  if (!doc.is_object())
    throw ConfigError(context + " must be a table of key = value entries");
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (!allowed.count(key)) {
      std::string known;
      for (const auto& k : allowed) known += (known.empty() ? "" : ", ") + k;
      throw ConfigError("unknown key '" + key + "' in " + context +
                        "; known keys: " + known);
    }
  }
}

std::string get_string(const json& doc, const std::string& key, std::string fallback,
                       const std::string& context) {
  if (!doc.contains(key)) return fallback;
  if (!doc.at(key).is_string())
    throw ConfigError(context + "." + key + " must be a string");
  return doc.at(key).get<std::string>();
}

double get_double(const json& doc, const std::string& key, double fallback,
                  const std::string& context) {
  if (!doc.contains(key)) return fallback;
  if (!doc.at(key).is_number())
    throw ConfigError(context + "." + key + " must be a number");
  return doc.at(key).get<double>();
}

std::size_t get_size(const json& doc, const std::string& key, std::size_t fallback,
                     const std::string& context) {
  if (!doc.contains(key)) return fallback;
  const json& v = doc.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
    throw ConfigError(context + "." + key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

std::uint64_t get_u64(const json& doc, const std::string& key, std::uint64_t fallback,
                      const std::string& context) {
  if (!doc.contains(key)) return fallback;
  const json& v = doc.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<long long>() < 0))
    throw ConfigError(context + "." + key + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

std::vector<std::size_t> get_widths(const json& doc, const std::string& key,
                                    std::vector<std::size_t> fallback,
                                    const std::string& context) {
  if (!doc.contains(key)) return fallback;
  const json& v = doc.at(key);
  if (!v.is_array())
    throw ConfigError(context + "." + key + " must be an array of layer widths");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer() || e.get<long long>() <= 0)
      throw ConfigError(context + "." + key + " entries must be positive integers");
    out.push_back(e.get<std::size_t>());
  }
  return out;
}

std::string resolve_path(const std::string& p, const std::string& base_dir) {
  if (p.empty() || base_dir.empty()) return p;
  const fs::path path(p);
  if (path.is_absolute()) return p;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

// ---- artifact naming ------------------------------------------------------------

std::string repeat_stem(std::size_t r) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "repeat_%03zu", r);
  return buf;
}

constexpr double kVerifyTolerance = 1e-9;

}  // namespace

// ---- config documents ------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out directory must not be empty");
  if (variants.empty()) throw ConfigError("at least one variant must be listed");
  std::set<std::string> seen;
  for (const auto v : variants)
    if (!seen.insert(to_string(v)).second)
      throw ConfigError("variant '" + to_string(v) + "' listed twice");
  if (top_k == 0) throw ConfigError("top_k must be at least 1");
  if (folds < 3) throw ConfigError("folds must be at least 3");
  if (fold >= folds)
    throw ConfigError("fold " + std::to_string(fold) + " out of range for " +
                      std::to_string(folds) + " folds");
  if (repeats == 0) throw ConfigError("repeats must be at least 1");
  if (jobs == 0) throw ConfigError("jobs must be at least 1");
  if (probes.count < 0) throw ConfigError("probes.count must be non-negative");
  plan.validate();
}

std::string ExperimentConfig::resolved_cache_dir() const {
  if (!cache_dir.empty()) return cache_dir;
  if (const char* env = std::getenv("FAIRMEDL_CACHE"); env != nullptr && *env != '\0')
    return env;
  return (fs::path(out_dir) / "cache").string();
}

std::string ExperimentConfig::runs_dir() const {
  return (fs::path(out_dir) / "runs").string();
}

ExperimentConfig experiment_config_from_json(const json& doc,
                                             const std::string& base_dir) {
  ExperimentConfig c;
  expect_keys(doc, "config",
              {"data", "schema", "out", "cache", "top_k", "folds", "fold", "probes",
               "variants", "arch", "plan", "repeats", "jobs", "seed"});
  c.data_path = resolve_path(get_string(doc, "data", "", "config"), base_dir);
  c.schema_path = resolve_path(get_string(doc, "schema", "", "config"), base_dir);
  c.out_dir = resolve_path(get_string(doc, "out", c.out_dir, "config"), base_dir);
  c.cache_dir = resolve_path(get_string(doc, "cache", "", "config"), base_dir);
  c.top_k = get_size(doc, "top_k", c.top_k, "config");
  c.folds = get_size(doc, "folds", c.folds, "config");
  c.fold = get_size(doc, "fold", c.fold, "config");
  c.repeats = get_size(doc, "repeats", c.repeats, "config");
  c.jobs = get_size(doc, "jobs", c.jobs, "config");
  c.seed = get_u64(doc, "seed", c.seed, "config");

  if (doc.contains("probes")) {
    const json& p = doc.at("probes");
    expect_keys(p, "probes", {"count", "label_coeff", "cluster_coeff", "noise_sd"});
    c.probes.count = static_cast<int>(get_size(p, "count", 3, "probes"));
    c.probes.label_coeff = get_double(p, "label_coeff", c.probes.label_coeff, "probes");
    c.probes.cluster_coeff =
        get_double(p, "cluster_coeff", c.probes.cluster_coeff, "probes");
    c.probes.noise_sd = get_double(p, "noise_sd", c.probes.noise_sd, "probes");
  }
  if (doc.contains("variants")) {
    const json& v = doc.at("variants");
    if (!v.is_array()) throw ConfigError("config.variants must be an array of names");
    c.variants.clear();
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError("config.variants entries must be strings");
      c.variants.push_back(variant_from_string(e.get<std::string>()));
    }
  }

  if (doc.contains("arch")) {
    const json& a = doc.at("arch");
    expect_keys(a, "arch",
                {"fe_widths", "adversary_widths", "z_widths", "hidden", "prior_var"});
    c.arch.fe_widths = get_widths(a, "fe_widths", c.arch.fe_widths, "arch");
    c.arch.adversary_widths =
        get_widths(a, "adversary_widths", c.arch.adversary_widths, "arch");
    c.arch.z_widths = get_widths(a, "z_widths", c.arch.z_widths, "arch");
    if (a.contains("hidden"))
      c.arch.hidden = activation_from_string(get_string(a, "hidden", "", "arch"));
    c.arch.prior_var = get_double(a, "prior_var", c.arch.prior_var, "arch");
    if (c.arch.prior_var <= 0.0) throw ConfigError("arch.prior_var must be positive");
  }

  if (doc.contains("plan")) {
    const json& p = doc.at("plan");
    expect_keys(p, "plan",
                {"schedule", "step_size", "batch_size", "max_epochs", "patience",
                 "adversary_steps", "weights"});
    if (p.contains("schedule"))
      c.plan.schedule = schedule_from_string(get_string(p, "schedule", "", "plan"));
    c.plan.step_size = get_double(p, "step_size", c.plan.step_size, "plan");
    c.plan.batch_size = get_size(p, "batch_size", c.plan.batch_size, "plan");
    c.plan.max_epochs = get_size(p, "max_epochs", c.plan.max_epochs, "plan");
    c.plan.patience = get_size(p, "patience", c.plan.patience, "plan");
    c.plan.adversary_steps =
        get_size(p, "adversary_steps", c.plan.adversary_steps, "plan");
    if (p.contains("weights")) {
      const json& w = p.at("weights");
      expect_keys(w, "plan.weights",
                  {"lambda_F", "lambda_g", "lambda_K", "lambda_D", "lambda_y",
                   "lambda_z", "lambda_s"});
      auto& lw = c.plan.weights;
      lw.lambda_F = get_double(w, "lambda_F", lw.lambda_F, "plan.weights");
      lw.lambda_g = get_double(w, "lambda_g", lw.lambda_g, "plan.weights");
      lw.lambda_K = get_double(w, "lambda_K", lw.lambda_K, "plan.weights");
      lw.lambda_D = get_double(w, "lambda_D", lw.lambda_D, "plan.weights");
      lw.lambda_y = get_double(w, "lambda_y", lw.lambda_y, "plan.weights");
      lw.lambda_z = get_double(w, "lambda_z", lw.lambda_z, "plan.weights");
      lw.lambda_s = get_double(w, "lambda_s", lw.lambda_s, "plan.weights");
    }
  }
  c.validate();
  return c;
}

json experiment_config_to_json(const ExperimentConfig& c) {
  json doc;
  doc["data"] = c.data_path;
  doc["schema"] = c.schema_path;
  doc["out"] = c.out_dir;
  if (!c.cache_dir.empty()) doc["cache"] = c.cache_dir;
  doc["top_k"] = c.top_k;
  doc["folds"] = c.folds;
  doc["fold"] = c.fold;
  doc["probes"] = {{"count", c.probes.count},
                   {"label_coeff", c.probes.label_coeff},
                   {"cluster_coeff", c.probes.cluster_coeff},
                   {"noise_sd", c.probes.noise_sd}};
  json variants = json::array();
  for (const auto v : c.variants) variants.push_back(to_string(v));
  doc["variants"] = std::move(variants);
  doc["arch"] = {{"fe_widths", c.arch.fe_widths},
                 {"adversary_widths", c.arch.adversary_widths},
                 {"z_widths", c.arch.z_widths},
                 {"hidden", to_string(c.arch.hidden)},
                 {"prior_var", c.arch.prior_var}};
  doc["plan"] = {{"schedule", to_string(c.plan.schedule)},
                 {"step_size", c.plan.step_size},
                 {"batch_size", c.plan.batch_size},
                 {"max_epochs", c.plan.max_epochs},
                 {"patience", c.plan.patience},
                 {"adversary_steps", c.plan.adversary_steps},
                 {"weights",
                  {{"lambda_F", c.plan.weights.lambda_F},
                   {"lambda_g", c.plan.weights.lambda_g},
                   {"lambda_K", c.plan.weights.lambda_K},
                   {"lambda_D", c.plan.weights.lambda_D},
                   {"lambda_y", c.plan.weights.lambda_y},
                   {"lambda_z", c.plan.weights.lambda_z},
                   {"lambda_s", c.plan.weights.lambda_s}}}};
  doc["repeats"] = c.repeats;
  doc["jobs"] = c.jobs;
  doc["seed"] = c.seed;
  return doc;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  const json doc = load_config_file(path);
  try {
    return experiment_config_from_json(doc, fs::path(path).parent_path().string());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

DatasetSchema schema_from_config(const json& doc) {
  expect_keys(doc, "schema",
              {"task", "positive_label", "missing_markers", "columns"});
  DatasetSchema s;
  s.task = task_kind_from_string(get_string(doc, "task", "classification", "schema"));
  s.positive_label = get_string(doc, "positive_label", "", "schema");
  if (doc.contains("missing_markers")) {
    const json& m = doc.at("missing_markers");
    if (!m.is_array())
      throw ConfigError("schema.missing_markers must be an array of strings");
    s.missing_markers.clear();
    for (const auto& e : m) {
      if (!e.is_string())
        throw ConfigError("schema.missing_markers entries must be strings");
      s.missing_markers.push_back(e.get<std::string>());
    }
  }
  if (!doc.contains("columns") || !doc.at("columns").is_array())
    throw ConfigError("schema needs a [[columns]] list");
  for (const auto& jc : doc.at("columns")) {
    expect_keys(jc, "columns entry", {"name", "role"});
    ColumnSpec spec;
    spec.name = get_string(jc, "name", "", "columns entry");
    if (spec.name.empty()) throw ConfigError("every schema column needs a name");
    if (!jc.contains("role"))
      throw ConfigError("schema column '" + spec.name + "' needs a role");
    spec.role = column_role_from_string(jc.at("role").get<std::string>());
    s.columns.push_back(std::move(spec));
  }
  s.validate();
  return s;
}

DatasetSchema load_schema_file(const std::string& path) {
  const json doc = load_config_file(path);
  try {
    return schema_from_config(doc);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---- provenance -------------------------------------------------------------------

std::string experiment_provenance(const ExperimentConfig& config,
                                  const BundleCache& cache) {
  json j = experiment_config_to_json(config);
  // Paths and worker counts do not change any trained number; the repeat
  // count only selects how many seed-indexed artifacts exist.
  j.erase("data");
  j.erase("schema");
  j.erase("out");
  if (j.contains("cache")) j.erase("cache");
  j.erase("jobs");
  j.erase("repeats");
  const std::string text = j.dump() + "|" + cache.provenance;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

// ---- prepare ---------------------------------------------------------------------

BundleCache run_prepare(const ExperimentConfig& config, std::ostream& log) {
  if (config.data_path.empty()) throw ConfigError("prepare needs a data CSV path");
  if (config.schema_path.empty()) throw ConfigError("prepare needs a schema file");
  if (config.top_k == 0) throw ConfigError("top_k must be at least 1");

  const DatasetSchema schema = load_schema_file(config.schema_path);
  RawDataset raw = load_csv(config.data_path, schema);
  if (config.probes.count > 0) {
    // One entropy root: the probe stream derives from the global seed, so a
    // --seed override reseeds the whole experiment coherently.
    ProbeSpec probes = config.probes;
    probes.seed = derive_seed(config.seed, "probes");
    raw = inject_probes(raw, probes);
  }

  BundleCache cache;
  cache.partition = partition_seen_unseen(raw, config.top_k);
  cache.data = std::move(raw);
  cache.provenance = dataset_fingerprint(cache.data);

  const std::string dir = config.resolved_cache_dir();
  save_bundle_cache(dir, cache);

  log << "prepared " << cache.data.row_count() << " rows ("
      << cache.data.dropped_rows << " dropped) into " << dir << "\n"
      << "  seen clusters: " << cache.partition.seen_clusters.size()
      << ", seen fraction: " << cache.partition.seen_fraction << "\n"
      << "  fingerprint: " << cache.provenance << "\n";
  return cache;
}

// ---- canonical split ----------------------------------------------------------------

namespace {

SplitRows canonical_split(const ExperimentConfig& config, const BundleCache& cache) {
  const RawDataset seen = subset_rows(cache.data, cache.partition.seen_rows);
  const KFoldResult kf = kfold_split(seen, config.folds, config.seed);
  const FoldSplit& fold = kf.folds.at(config.fold);
  SplitRows rows;
  const auto lift = [&](const std::vector<std::size_t>& idx,
                        std::vector<std::size_t>& out) {
    out.reserve(idx.size());
    for (const std::size_t i : idx) out.push_back(cache.partition.seen_rows[i]);
    std::sort(out.begin(), out.end());
  };
  lift(fold.train, rows.train);
  lift(fold.val, rows.val);
  lift(fold.test, rows.test);
  rows.unseen = cache.partition.unseen_rows;
  return rows;
}

ArchConfig derived_arch(const ExperimentConfig& config) {
  ArchConfig arch = config.arch;
  arch.seed = derive_seed(config.seed, "arch");
  return arch;
}

TrainPlan derived_plan(const ExperimentConfig& config, Variant variant) {
  TrainPlan plan = config.plan;
  plan.variant = variant;
  plan.seed = derive_seed(config.seed, "train");
  return plan;
}

std::vector<std::string> sensitive_names(const EncodedDataset& data) {
  std::vector<std::string> names;
  names.reserve(data.sensitive.size());
  for (const auto& block : data.sensitive) names.push_back(block.name);
  return names;
}

std::vector<std::string> probe_feature_names(const EncodedDataset& data) {
  std::vector<std::string> names;
  for (const auto& group : data.groups)
    if (group.probe) names.push_back(group.name);
  return names;
}

}  // namespace

// ---- train ----------------------------------------------------------------------

std::size_t run_train(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  const std::string cache_path = config.resolved_cache_dir();
  BundleCache cache;
  try {
    cache = load_bundle_cache(cache_path);
  } catch (const Error& e) {
    throw ConfigError("no usable bundle cache at " + cache_path +
                      " (run prepare first): " + e.what());
  }

  const std::string provenance = experiment_provenance(config, cache);
  const SplitRows rows = canonical_split(config, cache);
  const EncodedDataset data = encode_and_standardize(cache.data, rows.train);
  const ArchConfig arch = derived_arch(config);
  const std::vector<std::string> s_names = sensitive_names(data);

  const fs::path runs(config.runs_dir());
  fs::create_directories(runs);
  {
    json doc;
    doc["provenance"] = provenance;
    doc["config"] = experiment_config_to_json(config);
    doc["probe_features"] = probe_feature_names(data);
    spill(runs / "config.json", doc.dump(2));
  }

  struct Pending {
    std::size_t variant_idx;
    std::size_t repeat;
  };
  std::vector<Pending> pending;
  // metric maps per variant, indexed by repeat, for the summaries
  std::vector<std::vector<std::map<std::string, double>>> collected(
      config.variants.size(),
      std::vector<std::map<std::string, double>>(config.repeats));

  std::size_t resumed = 0;
  for (std::size_t vi = 0; vi < config.variants.size(); ++vi) {
    const std::string vname = to_string(config.variants[vi]);
    fs::create_directories(runs / vname);
    for (std::size_t r = 0; r < config.repeats; ++r) {
      const fs::path file = runs / vname / (repeat_stem(r) + ".json");
      bool reuse = false;
      if (fs::exists(file)) {
        try {
          const json doc = parse_artifact(file);
          if (doc.at("provenance").get<std::string>() == provenance) {
            collected[vi][r] =
                run_result_from_json(doc.at("run").dump()).metrics;
            reuse = true;
          } else {
            log << "stale artifact " << file.string() << " (different provenance), "
                << "retraining\n";
          }
        } catch (const std::exception& e) {
          log << "unreadable artifact " << file.string() << " (" << e.what()
              << "), retraining\n";
        }
      }
      if (reuse) {
        ++resumed;
      } else {
        pending.push_back({vi, r});
      }
    }
  }
  if (resumed > 0) log << "resumed " << resumed << " completed repeats\n";

  // Workers train; every artifact write happens on this thread.
  struct Done {
    std::size_t variant_idx = 0;
    std::size_t repeat = 0;
    std::optional<RunResult> result;
    std::string error;
  };
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Done> queue;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};

  const auto worker = [&]() {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pending.size()) return;
      const Pending job = pending[i];
      const Variant variant = config.variants[job.variant_idx];
      Done done;
      done.variant_idx = job.variant_idx;
      done.repeat = job.repeat;
      try {
        const TrainPlan plan = derived_plan(config, variant);
        done.result = repeat_run(arch, plan, data, rows, job.repeat);
      } catch (const std::exception& e) {
        done.error = "variant " + to_string(variant) + " repeat " +
                     std::to_string(job.repeat) + " (seed " +
                     std::to_string(derive_seed(derive_seed(config.seed, "train"),
                                                "repeat-train/" +
                                                    std::to_string(job.repeat))) +
                     "): " + e.what();
        stop.store(true);
      }
      {
        const std::lock_guard<std::mutex> lock(mu);
        queue.push_back(std::move(done));
      }
      cv.notify_one();
    }
  };

  std::vector<std::thread> threads;
  const std::size_t n_workers = std::max<std::size_t>(
      1, std::min(config.jobs, pending.empty() ? 1 : pending.size()));
  threads.reserve(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);

  std::string first_error;
  std::size_t trained = 0;
  for (std::size_t finished = 0; finished < pending.size(); ++finished) {
    Done done;
    {
      std::unique_lock<std::mutex> lock(mu);
      cv.wait(lock, [&] { return !queue.empty(); });
      done = std::move(queue.front());
      queue.pop_front();
    }
    if (!done.error.empty()) {
      if (first_error.empty()) first_error = done.error;
      // Workers drain remaining in-flight jobs and exit; nothing else starts.
      continue;
    }
    const std::string vname = to_string(config.variants[done.variant_idx]);
    const fs::path base = runs / vname / repeat_stem(done.repeat);
    json doc;
    doc["provenance"] = provenance;
    doc["variant"] = vname;
    doc["repeat"] = done.repeat;
    doc["run"] = json::parse(run_result_to_json(*done.result));
    spill(fs::path(base.string() + ".json"), doc.dump());
    spill(fs::path(base.string() + ".csv"),
          predictions_to_csv(*done.result, s_names));
    collected[done.variant_idx][done.repeat] = done.result->metrics;
    ++trained;
    log << "trained " << vname << " repeat " << done.repeat << " ("
        << done.result->epochs_run << " epochs)\n";
  }
  for (auto& t : threads) t.join();
  if (!first_error.empty()) throw Error("training failed: " + first_error);

  for (std::size_t vi = 0; vi < config.variants.size(); ++vi) {
    const std::string vname = to_string(config.variants[vi]);
    const StatSummary summary =
        vi == 0 ? summarize_runs(collected[vi])
                : summarize_runs(collected[vi], collected[0]);
    json doc;
    doc["provenance"] = provenance;
    doc["variant"] = vname;
    doc["repeats"] = config.repeats;
    if (vi != 0) doc["baseline"] = to_string(config.variants[0]);
    doc["summary"] = json::parse(stat_summary_to_json(summary));
    spill(runs / vname / "summary.json", doc.dump(2));
  }
  log << "wrote summaries for " << config.variants.size() << " variants under "
      << runs.string() << "\n";
  return trained;
}

// ---- audit ----------------------------------------------------------------------

namespace {

double parse_csv_double(const std::string& s, const std::string& column,
                        std::size_t row) {
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE || !std::isfinite(v))
    throw IngestionError("column '" + column + "' row " + std::to_string(row + 1) +
                         ": cannot parse '" + s + "' as a number");
  return v;
}

}  // namespace

json run_audit(const AuditOptions& options, std::ostream& log) {
  if (options.predictions_path.empty())
    throw ConfigError("audit needs a predictions CSV");
  if (options.sensitive.empty())
    throw ConfigError("audit needs at least one sensitive column name");

  const CsvTable table = read_csv_table(options.predictions_path);
  const bool classification = options.task == TaskKind::classification;
  const std::size_t score_col = table.column("score");
  const std::size_t label_col = table.column("label");
  const std::size_t pred_col = classification ? table.column("pred") : 0;

  std::vector<std::size_t> sensitive_cols;
  for (const auto& name : options.sensitive) sensitive_cols.push_back(table.column(name));

  json notices = json::array();

  // Row filters. Mixing the two heads would score every sample twice, so an
  // ambiguous head column is an error; mixed splits are merely reported.
  std::vector<std::size_t> rows;
  {
    const bool has_head = table.has_column("head");
    const bool has_split = table.has_column("split");
    if (!options.head.empty() && !has_head)
      throw ConfigError("--head given but the file has no 'head' column");
    if (!options.split.empty() && !has_split)
      throw ConfigError("--split given but the file has no 'split' column");
    const std::size_t head_col = has_head ? table.column("head") : 0;
    const std::size_t split_col = has_split ? table.column("split") : 0;
    std::set<std::string> heads, splits;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      const auto& row = table.rows[i];
      if (!options.head.empty() && row[head_col] != options.head) continue;
      if (!options.split.empty() && row[split_col] != options.split) continue;
      if (has_head) heads.insert(row[head_col]);
      if (has_split) splits.insert(row[split_col]);
      rows.push_back(i);
    }
    if (heads.size() > 1) {
      std::string all;
      for (const auto& h : heads) all += (all.empty() ? "" : ", ") + h;
      throw ConfigError("predictions mix heads {" + all +
                        "}; pick one with --head");
    }
    if (splits.size() > 1)
      notices.push_back("rows from " + std::to_string(splits.size()) +
                        " splits are audited together; use --split to narrow");
  }
  if (rows.empty()) throw ConfigError("no prediction rows left to audit");

  std::vector<double> scores(rows.size()), labels(rows.size());
  std::vector<int> hard;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    scores[i] = parse_csv_double(table.rows[rows[i]][score_col], "score", rows[i]);
    labels[i] = parse_csv_double(table.rows[rows[i]][label_col], "label", rows[i]);
  }
  if (classification) {
    hard.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double v = parse_csv_double(table.rows[rows[i]][pred_col], "pred", rows[i]);
      if (v != 0.0 && v != 1.0)
        throw IngestionError("column 'pred' row " + std::to_string(rows[i] + 1) +
                             ": hard predictions must be 0 or 1, got " +
                             table.rows[rows[i]][pred_col]);
      hard[i] = static_cast<int>(v);
    }
  }

  json variables = json::object();
  for (std::size_t s = 0; s < options.sensitive.size(); ++s) {
    const std::string& var = options.sensitive[s];
    const std::size_t col = sensitive_cols[s];

    // Category ids by lexicographic value; "" and "-1" mean unknown.
    std::set<std::string> values;
    for (const std::size_t r : rows) {
      const std::string& v = table.rows[r][col];
      if (!v.empty() && v != "-1") values.insert(v);
    }
    std::vector<std::string> categories(values.begin(), values.end());
    const auto category_id = [&](const std::string& v) -> int {
      const auto it = std::lower_bound(categories.begin(), categories.end(), v);
      if (it == categories.end() || *it != v) return -1;
      return static_cast<int>(it - categories.begin());
    };

    GroupedPredictions gp;
    gp.category_names = categories;
    std::vector<std::size_t> kept;  // indices into `rows`
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int id = category_id(table.rows[rows[i]][col]);
      if (id < 0) continue;
      kept.push_back(i);
      gp.group.push_back(id);
      gp.scores.push_back(scores[i]);
      gp.labels.push_back(labels[i]);
      if (classification) gp.hard_preds.push_back(hard[i]);
    }

    json entry;
    entry["categories"] = categories;
    entry["excluded_rows"] = rows.size() - kept.size();
    json metrics = json::object();
    json errors = json::object();

    const auto record = [&](const std::string& name, const FairnessValue& value) {
      json m;
      m["value"] = value.value;
      json per_group = json::object();
      for (const auto& [cat, v] : value.per_group) per_group[cat] = v;
      m["per_group"] = std::move(per_group);
      metrics[name] = std::move(m);
    };
    const auto guarded = [&](const std::string& name, const auto& fn) {
      try {
        fn();
      } catch (const Error& e) {
        errors[name] = e.what();
      }
    };

    if (classification) {
      guarded("tpr_sd", [&] {
        const auto [tpr, fpr] = equalized_odds_sd(gp);
        json m1;
        m1["value"] = tpr;
        metrics["tpr_sd"] = std::move(m1);
        json m2;
        m2["value"] = fpr;
        metrics["fpr_sd"] = std::move(m2);
      });
      guarded("dp", [&] { record("dp", demographic_parity_cls(gp)); });
    } else {
      guarded("mse_sd", [&] {
        json m;
        m["value"] = equalized_odds_mse_sd(gp);
        metrics["mse_sd"] = std::move(m);
      });
      guarded("dp", [&] { record("dp", demographic_parity_reg(gp)); });
    }

    // Counterfactual scores come from cf_<var>_<category> columns.
    {
      std::vector<std::string> missing;
      std::vector<std::size_t> cf_cols(categories.size());
      for (std::size_t c = 0; c < categories.size(); ++c) {
        const std::string name = "cf_" + var + "_" + categories[c];
        if (table.has_column(name)) {
          cf_cols[c] = table.column(name);
        } else {
          missing.push_back(name);
        }
      }
      if (categories.size() < 2) {
        errors["cf"] = "needs at least two categories";
      } else if (!missing.empty()) {
        std::string all;
        for (const auto& m : missing) all += (all.empty() ? "" : ", ") + m;
        notices.push_back("counterfactual columns missing for '" + var +
                          "' (" + all + "); cf skipped");
      } else {
        guarded("cf", [&] {
          std::vector<double> factual;
          std::vector<std::vector<double>> alternatives(categories.size() - 1);
          for (const std::size_t i : kept) {
            const std::size_t row = rows[i];
            const int own = category_id(table.rows[row][col]);
            factual.push_back(scores[i]);
            std::size_t slot = 0;
            for (std::size_t c = 0; c < categories.size(); ++c) {
              if (static_cast<int>(c) == own) continue;
              alternatives[slot++].push_back(parse_csv_double(
                  table.rows[row][cf_cols[c]], "cf_" + var + "_" + categories[c], row));
            }
          }
          record("cf", classification
                           ? counterfactual_fairness_cls(factual, alternatives)
                           : counterfactual_fairness_reg(factual, alternatives));
        });
      }
    }

    entry["metrics"] = std::move(metrics);
    entry["errors"] = std::move(errors);
    variables[var] = std::move(entry);
  }

  json report;
  report["task"] = to_string(options.task);
  report["rows_used"] = rows.size();
  if (!options.head.empty()) report["head"] = options.head;
  if (!options.split.empty()) report["split"] = options.split;
  report["notices"] = std::move(notices);
  report["variables"] = std::move(variables);

  for (const auto& n : report["notices"]) log << "note: " << n.get<std::string>() << "\n";
  return report;
}

std::string audit_to_csv(const json& report) {
  std::string out = "variable,metric,value\n";
  for (const auto& [var, entry] : report.at("variables").items()) {
    for (const auto& [metric, m] : entry.at("metrics").items()) {
      out += csv_escape(var) + "," + csv_escape(metric) + "," +
             format_double(m.at("value").get<double>()) + "\n";
    }
  }
  return out;
}

// ---- report ---------------------------------------------------------------------

namespace {

struct MergedRuns {
  std::string provenance;
  std::vector<std::string> variant_order;  // from the stored config
  std::vector<std::string> probe_features;
  // variant → repeat index → artifacts
  std::map<std::string, std::map<std::size_t, std::map<std::string, double>>> metrics;
  std::map<std::string, std::map<std::size_t, std::vector<std::pair<std::string, double>>>>
      importance;
};

MergedRuns merge_runs(const std::vector<std::string>& runs_dirs, std::ostream& log) {
  if (runs_dirs.empty()) throw ConfigError("at least one runs directory is required");
  MergedRuns merged;
  for (const auto& dir : runs_dirs) {
    const fs::path root(dir);
    if (!fs::exists(root / "config.json"))
      throw ConfigError(dir + " has no config.json; not a runs directory");
    const json cfg = parse_artifact(root / "config.json");
    const std::string provenance = cfg.at("provenance").get<std::string>();
    if (merged.provenance.empty()) {
      merged.provenance = provenance;
      for (const auto& v : cfg.at("config").at("variants"))
        merged.variant_order.push_back(v.get<std::string>());
      if (cfg.contains("probe_features"))
        for (const auto& p : cfg.at("probe_features"))
          merged.probe_features.push_back(p.get<std::string>());
    } else if (provenance != merged.provenance) {
      throw ConfigError("refusing to merge runs with different provenance: " +
                        merged.provenance + " vs " + provenance + " (" + dir + ")");
    }

    for (const auto& vname : merged.variant_order) {
      const fs::path vdir = root / vname;
      if (!fs::exists(vdir)) continue;
      for (const auto& entry : fs::directory_iterator(vdir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("repeat_", 0) != 0 || entry.path().extension() != ".json")
          continue;
        const json doc = parse_artifact(entry.path());
        if (doc.at("provenance").get<std::string>() != merged.provenance)
          throw ConfigError(entry.path().string() +
                            " carries a different provenance; remove stale artifacts");
        const std::size_t r = doc.at("repeat").get<std::size_t>();
        if (merged.metrics[vname].count(r)) {
          log << "duplicate " << vname << " repeat " << r << " from " << dir
              << " ignored\n";
          continue;
        }
        const RunResult run = run_result_from_json(doc.at("run").dump());
        merged.metrics[vname][r] = run.metrics;
        merged.importance[vname][r] = run.importance;
      }
    }
  }
  std::size_t total = 0;
  for (const auto& [vname, reps] : merged.metrics) total += reps.size();
  if (total == 0) throw ConfigError("no run artifacts found to report on");
  return merged;
}

struct ParsedKey {
  std::string split, head, metric, variable;
};

ParsedKey parse_metric_key(const std::string& key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t slash = key.find('/', start);
    if (slash == std::string::npos) {
      parts.push_back(key.substr(start));
      break;
    }
    parts.push_back(key.substr(start, slash - start));
    start = slash + 1;
  }
  ParsedKey out;
  if (parts.size() < 3) {
    out.metric = key;
    return out;
  }
  out.split = parts[0];
  out.head = parts[1];
  out.metric = parts[2];
  for (std::size_t i = 3; i < parts.size(); ++i)
    out.variable += (i == 3 ? "" : "/") + parts[i];
  return out;
}

}  // namespace

void run_report(const std::vector<std::string>& runs_dirs, const std::string& out_dir,
                std::ostream& log) {
  const MergedRuns merged = merge_runs(runs_dirs, log);
  fs::create_directories(out_dir);

  // Per-variant summaries over the merged repeats, first stored variant as
  // the p-value baseline.
  std::vector<std::string> present;
  for (const auto& vname : merged.variant_order)
    if (merged.metrics.count(vname)) present.push_back(vname);

  const auto series = [&](const std::string& vname) {
    std::vector<std::map<std::string, double>> out;
    for (const auto& [r, m] : merged.metrics.at(vname)) out.push_back(m);
    return out;
  };
  const auto baseline_series = series(present.front());
  std::map<std::string, StatSummary> summaries;
  for (const auto& vname : present) {
    summaries[vname] = vname == present.front()
                           ? summarize_runs(series(vname))
                           : summarize_runs(series(vname), baseline_series);
  }

  // (a) the full statistics table
  {
    std::string csv = "variant,head,split,variable,metric,mean,ci_lo,ci_hi,p\n";
    for (const auto& vname : present) {
      for (const auto& [key, s] : summaries.at(vname)) {
        const ParsedKey k = parse_metric_key(key);
        csv += csv_escape(vname) + "," + csv_escape(k.head) + "," +
               csv_escape(k.split) + "," + csv_escape(k.variable) + "," +
               csv_escape(k.metric) + "," + format_double(s.mean) + "," +
               format_double(s.ci_lo) + "," + format_double(s.ci_hi) + ",";
        if (!std::isnan(s.p_value)) csv += format_double(s.p_value);
        csv += "\n";
      }
    }
    spill(fs::path(out_dir) / "table.csv", csv);
  }

  // (b) plot data: one file per fairness dispersion metric on the test split
  {
    const std::set<std::string> fairness_bases = {"tpr_sd", "fpr_sd", "dp", "cf",
                                                  "mse_sd"};
    std::map<std::string, std::string> plots;
    for (const auto& vname : present) {
      for (const auto& [key, s] : summaries.at(vname)) {
        const ParsedKey k = parse_metric_key(key);
        if (k.split != "test" || k.variable.empty() || !fairness_bases.count(k.metric))
          continue;
        auto& body = plots[k.metric];
        if (body.empty()) body = "metric,variable,variant,value\n";
        body += csv_escape(k.metric) + "," + csv_escape(k.variable) + "," +
                csv_escape(vname + "/" + k.head) + "," + format_double(s.mean) + "\n";
      }
    }
    for (const auto& [metric, body] : plots)
      spill(fs::path(out_dir) / ("plot_" + metric + ".csv"), body);
    log << "wrote table.csv and " << plots.size() << " plot files to " << out_dir
        << "\n";
  }

  // (c) feature importance ranking with probe flags, averaged over repeats
  {
    const std::set<std::string> probes(merged.probe_features.begin(),
                                       merged.probe_features.end());
    std::string csv = "variant,rank,feature,importance,probe\n";
    for (const auto& vname : present) {
      const auto it = merged.importance.find(vname);
      if (it == merged.importance.end() || it->second.empty()) continue;
      std::map<std::string, double> mean_importance;
      std::size_t n = 0;
      for (const auto& [r, ranking] : it->second) {
        ++n;
        for (const auto& [feature, value] : ranking) mean_importance[feature] += value;
      }
      std::vector<std::pair<std::string, double>> ranked(mean_importance.begin(),
                                                         mean_importance.end());
      for (auto& [feature, value] : ranked) value /= static_cast<double>(n);
      std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
      });
      for (std::size_t i = 0; i < ranked.size(); ++i) {
        csv += csv_escape(vname) + "," + std::to_string(i + 1) + "," +
               csv_escape(ranked[i].first) + "," + format_double(ranked[i].second) +
               "," + (probes.count(ranked[i].first) ? "true" : "false") + "\n";
      }
    }
    spill(fs::path(out_dir) / "importance.csv", csv);
  }
}

// ---- verify ---------------------------------------------------------------------

namespace {

// Largest absolute difference, treating a disagreement about which numbers
// exist as infinite.
void diff_maps(const std::map<std::string, double>& stored,
               const std::map<std::string, double>& fresh, const std::string& where,
               double& max_diff, std::string& detail) {
  for (const auto& [key, value] : stored) {
    const auto it = fresh.find(key);
    if (it == fresh.end()) {
      max_diff = std::numeric_limits<double>::infinity();
      if (detail.empty()) detail = where + ": stored metric '" + key + "' not recomputable";
      return;
    }
    const double d = std::abs(value - it->second);
    if (d > max_diff) {
      max_diff = d;
      detail = where + ": " + key + " stored " + format_double(value) +
               " recomputed " + format_double(it->second);
    }
  }
  for (const auto& [key, value] : fresh) {
    (void)value;
    if (!stored.count(key)) {
      max_diff = std::numeric_limits<double>::infinity();
      if (detail.empty()) detail = where + ": recomputed extra metric '" + key + "'";
      return;
    }
  }
}

void diff_value(double stored, double fresh, const std::string& where,
                double& max_diff, std::string& detail) {
  const double d = std::abs(stored - fresh);
  if (d > max_diff) {
    max_diff = d;
    detail = where + ": stored " + format_double(stored) + " recomputed " +
             format_double(fresh);
  }
}

}  // namespace

double run_verify(const std::string& runs_dir, const std::string& cache_override,
                  std::ostream& log) {
  const fs::path root(runs_dir);
  if (!fs::exists(root / "config.json"))
    throw ConfigError(runs_dir + " has no config.json; not a runs directory");
  const json stored_cfg = parse_artifact(root / "config.json");
  const ExperimentConfig config =
      experiment_config_from_json(stored_cfg.at("config"), "");
  const std::string stored_provenance = stored_cfg.at("provenance").get<std::string>();

  const std::string cache_path =
      cache_override.empty() ? config.resolved_cache_dir() : cache_override;
  BundleCache cache;
  try {
    cache = load_bundle_cache(cache_path);
  } catch (const Error& e) {
    throw ConfigError("cannot load the bundle cache at " + cache_path + ": " +
                      e.what());
  }
  if (experiment_provenance(config, cache) != stored_provenance)
    throw Error("provenance mismatch: the data or config changed since training");

  const SplitRows rows = canonical_split(config, cache);
  const EncodedDataset data = encode_and_standardize(cache.data, rows.train);
  const std::uint64_t plan_seed = derive_seed(config.seed, "train");

  double max_diff = 0.0;
  std::string detail;
  std::size_t checked = 0;

  for (const auto vt : config.variants) {
    const std::string vname = to_string(vt);
    const fs::path vdir = root / vname;
    if (!fs::exists(vdir)) continue;

    std::map<std::size_t, std::map<std::string, double>> repeat_metrics;
    for (const auto& entry : fs::directory_iterator(vdir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("repeat_", 0) != 0 || entry.path().extension() != ".json")
        continue;
      const json doc = parse_artifact(entry.path());
      if (doc.at("provenance").get<std::string>() != stored_provenance)
        throw Error(entry.path().string() + ": stale provenance");
      const std::size_t r = doc.at("repeat").get<std::size_t>();
      const RunResult stored = run_result_from_json(doc.at("run").dump());
      repeat_metrics[r] = stored.metrics;
      const std::string where = vname + "/" + repeat_stem(r);

      const ModelStack stack = ModelStack::from_checkpoint_json(stored.checkpoint);
      const SplitRows split = repeat_split(rows, plan_seed, r);
      const RunResult fresh = evaluate(stack, data, split, stored.threshold);

      diff_maps(stored.metrics, fresh.metrics, where, max_diff, detail);

      if (stored.importance.size() != fresh.importance.size()) {
        max_diff = std::numeric_limits<double>::infinity();
        detail = where + ": importance list length changed";
      } else {
        for (std::size_t i = 0; i < stored.importance.size(); ++i) {
          if (stored.importance[i].first != fresh.importance[i].first) {
            max_diff = std::numeric_limits<double>::infinity();
            detail = where + ": importance order changed at rank " +
                     std::to_string(i + 1);
            break;
          }
          diff_value(stored.importance[i].second, fresh.importance[i].second,
                     where + " importance '" + stored.importance[i].first + "'",
                     max_diff, detail);
        }
      }

      // The prediction file is the canonical score store; recompute it.
      const fs::path csv_path = vdir / (repeat_stem(r) + ".csv");
      const CsvTable preds = read_csv_table(csv_path.string());
      if (preds.rows.size() != fresh.predictions.size()) {
        max_diff = std::numeric_limits<double>::infinity();
        detail = where + ".csv: " + std::to_string(preds.rows.size()) +
                 " rows stored, " + std::to_string(fresh.predictions.size()) +
                 " recomputed";
      } else {
        const std::size_t id_col = preds.column("id");
        const std::size_t split_col = preds.column("split");
        const std::size_t head_col = preds.column("head");
        const std::size_t score_col = preds.column("score");
        const std::size_t pred_col = preds.column("pred");
        const std::size_t label_col = preds.column("label");
        for (std::size_t i = 0; i < preds.rows.size(); ++i) {
          const auto& row = preds.rows[i];
          const PredictionRow& p = fresh.predictions[i];
          if (row[id_col] != std::to_string(p.id) || row[split_col] != p.split ||
              row[head_col] != p.head || row[pred_col] != std::to_string(p.hard)) {
            max_diff = std::numeric_limits<double>::infinity();
            detail = where + ".csv row " + std::to_string(i + 1) +
                     ": identity fields changed";
            break;
          }
          diff_value(parse_csv_double(row[score_col], "score", i), p.score,
                     where + ".csv row " + std::to_string(i + 1) + " score", max_diff,
                     detail);
          diff_value(parse_csv_double(row[label_col], "label", i), p.label,
                     where + ".csv row " + std::to_string(i + 1) + " label", max_diff,
                     detail);
        }
      }
      ++checked;
    }

    // Recompute the variant summary from the stored repeat metrics.
    const fs::path summary_path = vdir / "summary.json";
    if (fs::exists(summary_path) && !repeat_metrics.empty()) {
      const json sdoc = parse_artifact(summary_path);
      const StatSummary stored_summary =
          stat_summary_from_json(sdoc.at("summary").dump());
      std::vector<std::map<std::string, double>> runs_series;
      for (const auto& [r, m] : repeat_metrics) runs_series.push_back(m);
      StatSummary fresh_summary;
      if (sdoc.contains("baseline")) {
        const fs::path bdir = root / sdoc.at("baseline").get<std::string>();
        std::map<std::size_t, std::map<std::string, double>> base_metrics;
        for (const auto& entry : fs::directory_iterator(bdir)) {
          const std::string name = entry.path().filename().string();
          if (name.rfind("repeat_", 0) != 0 || entry.path().extension() != ".json")
            continue;
          const json bdoc = parse_artifact(entry.path());
          base_metrics[bdoc.at("repeat").get<std::size_t>()] =
              run_result_from_json(bdoc.at("run").dump()).metrics;
        }
        std::vector<std::map<std::string, double>> base_series;
        for (const auto& [r, m] : base_metrics) base_series.push_back(m);
        fresh_summary = summarize_runs(runs_series, base_series);
      } else {
        fresh_summary = summarize_runs(runs_series);
      }
      for (const auto& [key, stored_s] : stored_summary) {
        const auto it = fresh_summary.find(key);
        if (it == fresh_summary.end()) {
          max_diff = std::numeric_limits<double>::infinity();
          detail = vname + "/summary: key '" + key + "' not recomputable";
          continue;
        }
        const std::string where = vname + "/summary " + key;
        diff_value(stored_s.mean, it->second.mean, where + " mean", max_diff, detail);
        diff_value(stored_s.sd, it->second.sd, where + " sd", max_diff, detail);
        diff_value(stored_s.ci_lo, it->second.ci_lo, where + " ci_lo", max_diff, detail);
        diff_value(stored_s.ci_hi, it->second.ci_hi, where + " ci_hi", max_diff, detail);
        if (!(std::isnan(stored_s.p_value) && std::isnan(it->second.p_value)))
          diff_value(stored_s.p_value, it->second.p_value, where + " p", max_diff,
                     detail);
      }
    }
    log << "verified " << vname << ": " << repeat_metrics.size() << " repeats\n";
  }

  if (checked == 0) throw ConfigError("no run artifacts found under " + runs_dir);
  if (max_diff >= kVerifyTolerance) {
    throw Error("verification failed: max deviation " + format_double(max_diff) +
                (detail.empty() ? "" : " (" + detail + ")"));
  }
  log << "verified " << checked << " repeats, max deviation " << max_diff << "\n";
  return max_diff;
}

}  // namespace fairmedl
