#include "fairmedl/search.hpp"

#include "fairmedl/errors.hpp"
#include "fairmedl/rng.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

namespace fairmedl {

namespace {

double* weight_slot(LossWeights& w, const std::string& name) {
  if (name == "lambda_F") return &w.lambda_F;
  if (name == "lambda_g") return &w.lambda_g;
  if (name == "lambda_K") return &w.lambda_K;
  if (name == "lambda_D") return &w.lambda_D;
  if (name == "lambda_y") return &w.lambda_y;
  if (name == "lambda_z") return &w.lambda_z;
  if (name == "lambda_s") return &w.lambda_s;
  return nullptr;
}

// Metric leaf names that measure dispersion across sensitive categories.
bool is_fairness_metric(const std::string& key) {
  const auto second = key.find('/', key.find('/') + 1);
  if (second == std::string::npos) return false;
  const std::string leaf = key.substr(second + 1);
  const std::string base = leaf.substr(0, leaf.find('/'));
  return base == "tpr_sd" || base == "fpr_sd" || base == "dp" || base == "cf" ||
         base == "mse_sd";
}

}  // namespace

void SearchSpace::validate() const {
  if (weight_ranges.empty())
    throw ConfigError("search space has no weight ranges to sample");
  LossWeights probe;
  for (const auto& [name, range] : weight_ranges) {
    if (weight_slot(probe, name) == nullptr)
      throw ConfigError("unknown loss weight '" + name + "' in search space");
    if (!(range.lo > 0.0) || !(range.hi >= range.lo) || !std::isfinite(range.hi))
      throw ConfigError("weight '" + name +
                        "' needs a positive log-uniform range with lo <= hi");
  }
  if (!(fairness_penalty >= 0.0) || !std::isfinite(fairness_penalty))
    throw ConfigError("fairness penalty must be finite and non-negative");
}

SearchResult random_search(const SearchSpace& space, std::size_t budget,
                           const ArchConfig& arch, const TrainPlan& base_plan,
                           const EncodedDataset& data, const SplitRows& rows,
                           std::size_t jobs) {
  space.validate();
  if (budget == 0) throw ConfigError("search budget must be at least 1");
  if (jobs == 0) throw ConfigError("jobs must be at least 1");
  base_plan.validate();

  const bool me_head = base_plan.variant == Variant::armed ||
                       base_plan.variant == Variant::fair_medl;
  const std::string head = me_head ? "me" : "fe";
  const std::string val_prefix = "val/" + head + "/";
  const bool cls = data.task == TaskKind::classification;

  SearchResult result;
  result.trials.resize(budget);
  std::atomic<std::size_t> next{0};

  const auto run_trial = [&](std::size_t t) {
    Trial& trial = result.trials[t];
    trial.plan = base_plan;
    Rng sampler(derive_seed(base_plan.seed, "search/" + std::to_string(t)));
    for (const auto& [name, range] : space.weight_ranges) {
      const double v = sampler.log_uniform(range.lo, range.hi);
      *weight_slot(trial.plan.weights, name) = v;
      trial.sampled[name] = v;
    }
    trial.plan.seed = derive_seed(base_plan.seed, "search-train/" + std::to_string(t));

    const RunResult run = train_run(arch, trial.plan, data, rows);

    double fairness_sum = 0.0;
    std::size_t fairness_n = 0;
    for (const auto& [key, value] : run.metrics) {
      if (key.rfind(val_prefix, 0) != 0) continue;
      if (!is_fairness_metric(key)) continue;
      fairness_sum += value;
      ++fairness_n;
    }
    trial.fairness_term = fairness_n > 0 ? fairness_sum / static_cast<double>(fairness_n)
                                         : 0.0;

    const std::string acc_key = val_prefix + (cls ? "balanced_accuracy" : "mse");
    const auto it = run.metrics.find(acc_key);
    if (it == run.metrics.end()) {
      // Degenerate validation split for this trial: never the best.
      trial.accuracy_term = -std::numeric_limits<double>::infinity();
    } else {
      trial.accuracy_term = cls ? it->second : -it->second;
    }
    trial.objective =
        trial.accuracy_term - space.fairness_penalty * trial.fairness_term;
  };

  if (jobs <= 1 || budget == 1) {
    for (std::size_t t = 0; t < budget; ++t) run_trial(t);
  } else {
    std::vector<std::thread> workers;
    const std::size_t n_workers = std::min(jobs, budget);
    workers.reserve(n_workers);
    for (std::size_t wi = 0; wi < n_workers; ++wi)
      workers.emplace_back([&]() {
        for (std::size_t t = next.fetch_add(1); t < budget; t = next.fetch_add(1))
          run_trial(t);
      });
    for (auto& w : workers) w.join();
  }

  for (std::size_t t = 1; t < result.trials.size(); ++t)
    if (result.trials[t].objective > result.trials[result.best_index].objective)
      result.best_index = t;
  return result;
}

}  // namespace fairmedl
