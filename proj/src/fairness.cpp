#include "fairmedl/fairness.hpp"

#include "fairmedl/errors.hpp"

#include <algorithm>
#include <cmath>

namespace fairmedl {

namespace {

std::string category_label(const GroupedPredictions& gp, int cat) {
  if (static_cast<std::size_t>(cat) < gp.category_names.size())
    return gp.category_names[cat];
  return "category_" + std::to_string(cat);
}

void validate_common(const GroupedPredictions& gp, const char* op) {
  const std::size_t n = gp.scores.size();
  if (n == 0) throw ContractError(std::string(op) + ": empty predictions");
  if (gp.labels.size() != n || gp.group.size() != n) {
    throw ContractError(std::string(op) + ": scores, labels and group lengths differ");
  }
  if (!gp.hard_preds.empty() && gp.hard_preds.size() != n) {
    throw ContractError(std::string(op) + ": hard_preds length differs");
  }
  const std::size_t k = gp.category_count();
  if (k < 2) throw ContractError(std::string(op) + ": need at least 2 categories");
  for (int g : gp.group) {
    if (g < 0 || static_cast<std::size_t>(g) >= k) {
      throw ContractError(std::string(op) + ": group id " + std::to_string(g) +
                          " outside [0, " + std::to_string(k) + ")");
    }
  }
}

void require_binary_labels(const GroupedPredictions& gp, const char* op) {
  bool has_pos = false, has_neg = false;
  for (double y : gp.labels) {
    if (y == 1.0) {
      has_pos = true;
    } else if (y == 0.0) {
      has_neg = true;
    } else {
      throw ContractError(std::string(op) + ": labels must be 0/1, got " +
                          std::to_string(y));
    }
  }
  if (!has_pos || !has_neg) {
    throw ContractError(std::string(op) + ": both classes must be present overall");
  }
}

void require_hard_preds(const GroupedPredictions& gp, const char* op) {
  if (gp.hard_preds.empty()) {
    throw ContractError(std::string(op) + ": hard_preds required");
  }
}

double population_sd(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / n);
}

double mean_pairwise_abs_diff(const std::vector<double>& vals, const char* op) {
  if (vals.size() < 2) {
    throw ContractError(std::string(op) + ": need at least 2 categories");
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < vals.size(); ++i)
    for (std::size_t j = i + 1; j < vals.size(); ++j) {
      total += std::fabs(vals[i] - vals[j]);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

FairnessValue counterfactual_mean_abs(const std::vector<double>& factual,
                                      const std::vector<std::vector<double>>& cf,
                                      const char* metric) {
  if (factual.empty()) throw ContractError(std::string(metric) + ": empty predictions");
  if (cf.empty()) {
    throw ContractError(std::string(metric) + ": no counterfactual score sets");
  }
  FairnessValue out;
  out.metric = metric;
  double total = 0.0;
  for (std::size_t j = 0; j < cf.size(); ++j) {
    if (cf[j].size() != factual.size()) {
      throw ContractError(std::string(metric) + ": counterfactual set " +
                          std::to_string(j) + " has " + std::to_string(cf[j].size()) +
                          " scores, expected " + std::to_string(factual.size()));
    }
    double sub = 0.0;
    for (std::size_t i = 0; i < factual.size(); ++i)
      sub += std::fabs(factual[i] - cf[j][i]);
    out.per_group.emplace_back("alternative_" + std::to_string(j),
                               sub / static_cast<double>(factual.size()));
    total += sub;
  }
  out.value = total / (static_cast<double>(factual.size()) * static_cast<double>(cf.size()));
  return out;
}

}  // namespace

std::size_t GroupedPredictions::category_count() const {
  if (!category_names.empty()) return category_names.size();
  int mx = -1;
  for (int g : group) mx = std::max(mx, g);
  return static_cast<std::size_t>(mx + 1);
}

std::vector<GroupRate> group_rates(const GroupedPredictions& gp) {
  validate_common(gp, "group_rates");
  require_binary_labels(gp, "group_rates");
  require_hard_preds(gp, "group_rates");
  const std::size_t k = gp.category_count();
  std::vector<std::size_t> tp(k, 0), fn(k, 0), fp(k, 0), tn(k, 0);
  for (std::size_t i = 0; i < gp.scores.size(); ++i) {
    const std::size_t g = static_cast<std::size_t>(gp.group[i]);
    const bool pos = gp.labels[i] == 1.0;
    const bool pred = gp.hard_preds[i] != 0;
    if (pos && pred) ++tp[g];
    if (pos && !pred) ++fn[g];
    if (!pos && pred) ++fp[g];
    if (!pos && !pred) ++tn[g];
  }
  std::vector<GroupRate> rates;
  for (std::size_t g = 0; g < k; ++g) {
    GroupRate r;
    r.category = static_cast<int>(g);
    const std::size_t pos = tp[g] + fn[g];
    const std::size_t neg = fp[g] + tn[g];
    if (pos > 0) {
      r.tpr = static_cast<double>(tp[g]) / static_cast<double>(pos);
      r.tpr_defined = true;
    }
    if (neg > 0) {
      r.fpr = static_cast<double>(fp[g]) / static_cast<double>(neg);
      r.fpr_defined = true;
    }
    rates.push_back(r);
  }
  return rates;
}

std::pair<double, double> equalized_odds_sd(const GroupedPredictions& gp) {
  const auto rates = group_rates(gp);
  std::vector<double> tprs, fprs;
  for (const auto& r : rates) {
    if (r.tpr_defined) tprs.push_back(r.tpr);
    if (r.fpr_defined) fprs.push_back(r.fpr);
  }
  if (tprs.size() < 2 || fprs.size() < 2) {
    throw ContractError("equalized_odds_sd: fewer than 2 categories with defined rates");
  }
  return {population_sd(tprs), population_sd(fprs)};
}

double equalized_odds_mse_sd(const GroupedPredictions& gp) {
  validate_common(gp, "equalized_odds_mse_sd");
  const std::size_t k = gp.category_count();
  std::vector<double> se(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < gp.scores.size(); ++i) {
    const std::size_t g = static_cast<std::size_t>(gp.group[i]);
    const double d = gp.scores[i] - gp.labels[i];
    se[g] += d * d;
    ++count[g];
  }
  std::vector<double> mses;
  for (std::size_t g = 0; g < k; ++g) {
    if (count[g] == 0) {
      throw ContractError("equalized_odds_mse_sd: category " + std::to_string(g) +
                          " has no samples");
    }
    mses.push_back(se[g] / static_cast<double>(count[g]));
  }
  return population_sd(mses);
}

FairnessValue demographic_parity_cls(const GroupedPredictions& gp) {
  validate_common(gp, "demographic_parity_cls");
  require_hard_preds(gp, "demographic_parity_cls");
  const std::size_t k = gp.category_count();
  std::vector<double> pos(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < gp.scores.size(); ++i) {
    const std::size_t g = static_cast<std::size_t>(gp.group[i]);
    if (gp.hard_preds[i] != 0) pos[g] += 1.0;
    ++count[g];
  }
  FairnessValue out;
  out.metric = "demographic_parity";
  std::vector<double> rates(k);
  for (std::size_t g = 0; g < k; ++g) {
    if (count[g] == 0) {
      throw ContractError("demographic_parity_cls: category " + std::to_string(g) +
                          " has no samples");
    }
    rates[g] = pos[g] / static_cast<double>(count[g]);
    out.per_group.emplace_back(category_label(gp, static_cast<int>(g)), rates[g]);
  }
  out.value = mean_pairwise_abs_diff(rates, "demographic_parity_cls");
  return out;
}

FairnessValue demographic_parity_reg(const GroupedPredictions& gp) {
  validate_common(gp, "demographic_parity_reg");
  const std::size_t k = gp.category_count();
  std::vector<double> total(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < gp.scores.size(); ++i) {
    const std::size_t g = static_cast<std::size_t>(gp.group[i]);
    total[g] += gp.scores[i];
    ++count[g];
  }
  FairnessValue out;
  out.metric = "demographic_parity";
  std::vector<double> means(k);
  for (std::size_t g = 0; g < k; ++g) {
    if (count[g] == 0) {
      throw ContractError("demographic_parity_reg: category " + std::to_string(g) +
                          " has no samples");
    }
    means[g] = total[g] / static_cast<double>(count[g]);
    out.per_group.emplace_back(category_label(gp, static_cast<int>(g)), means[g]);
  }
  out.value = mean_pairwise_abs_diff(means, "demographic_parity_reg");
  return out;
}

FairnessValue counterfactual_fairness_cls(
    const std::vector<double>& factual,
    const std::vector<std::vector<double>>& counterfactual) {
  return counterfactual_mean_abs(factual, counterfactual, "counterfactual_fairness");
}

FairnessValue counterfactual_fairness_reg(
    const std::vector<double>& factual,
    const std::vector<std::vector<double>>& counterfactual) {
  return counterfactual_mean_abs(factual, counterfactual, "counterfactual_fairness");
}

}  // namespace fairmedl
