#pragma once

#include <string>
#include <utility>
#include <vector>

namespace fairmedl {

// Predictions for one sensitive variable. `group` holds the category id of
// each sample; `hard_preds` is empty unless thresholded outputs exist.
struct GroupedPredictions {
  std::vector<double> scores;
  std::vector<double> labels;
  std::vector<int> hard_preds;
  std::vector<int> group;
  std::vector<std::string> category_names;

  std::size_t category_count() const;
};

struct GroupRate {
  int category = 0;
  double tpr = 0.0;
  double fpr = 0.0;
  bool tpr_defined = false;  // category had at least one positive label
  bool fpr_defined = false;  // category had at least one negative label
};

struct FairnessValue {
  std::string metric;
  double value = 0.0;
  std::vector<std::pair<std::string, double>> per_group;
};

// Per-category confusion rates. Categories with no positive (or negative)
// labels get their TPR (or FPR) flagged undefined and are skipped by the
// dispersion metrics instead of being counted as zero.
std::vector<GroupRate> group_rates(const GroupedPredictions& gp);

// Population standard deviation of per-category TPRs and FPRs.
std::pair<double, double> equalized_odds_sd(const GroupedPredictions& gp);

// Population standard deviation of per-category MSEs (regression).
double equalized_odds_mse_sd(const GroupedPredictions& gp);

// Mean absolute difference of positive-prediction rates (or mean predictions
// for the regression form) over all unordered category pairs.
FairnessValue demographic_parity_cls(const GroupedPredictions& gp);
FairnessValue demographic_parity_reg(const GroupedPredictions& gp);

// Mean absolute change in score when each sample's sensitive category is
// swapped for every alternative. counterfactual[j] holds the scores after
// substituting alternative j, aligned with factual by sample index.
FairnessValue counterfactual_fairness_cls(
    const std::vector<double>& factual,
    const std::vector<std::vector<double>>& counterfactual);
FairnessValue counterfactual_fairness_reg(
    const std::vector<double>& factual,
    const std::vector<std::vector<double>>& counterfactual);

}  // namespace fairmedl
