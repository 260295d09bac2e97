#pragma once

#include "fairmedl/train.hpp"

#include <map>
#include <string>
#include <vector>

namespace fairmedl {

// Log-uniform sampling range for one loss weight; both ends must be positive.
struct SearchRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct SearchSpace {
  // Keyed by weight name: lambda_F, lambda_g, lambda_K, lambda_D, lambda_y,
  // lambda_z, lambda_s.
  std::map<std::string, SearchRange> weight_ranges;
  // Objective = validation accuracy term - fairness_penalty * mean fairness
  // dispersion, both measured on the deployment head.
  double fairness_penalty = 1.0;

  void validate() const;
};

struct Trial {
  std::map<std::string, double> sampled;  // weight name -> sampled value
  TrainPlan plan;                         // full plan the trial trained with
  double accuracy_term = 0.0;  // balanced accuracy, or -mse for regression
  double fairness_term = 0.0;  // mean fairness dispersion on validation
  double objective = 0.0;
};

struct SearchResult {
  std::vector<Trial> trials;   // in trial order
  std::size_t best_index = 0;  // highest objective, earliest trial on ties
};

// Samples `budget` weight settings log-uniformly, trains each, and scores it
// on the validation split. Deterministic for a fixed base plan seed; ties in
// the objective keep the earliest trial.
SearchResult random_search(const SearchSpace& space, std::size_t budget,
                           const ArchConfig& arch, const TrainPlan& base_plan,
                           const EncodedDataset& data, const SplitRows& rows,
                           std::size_t jobs = 1);

}  // namespace fairmedl
