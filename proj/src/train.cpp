#include "fairmedl/train.hpp"

#include "fairmedl/errors.hpp"
#include "fairmedl/losses.hpp"
#include "fairmedl/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>
#include <utility>

namespace fairmedl {

Schedule schedule_from_string(const std::string& name) {
  if (name == "alternating") return Schedule::alternating;
  if (name == "reversal") return Schedule::reversal;
  throw ConfigError("unknown schedule '" + name + "' (expected alternating or reversal)");
}

std::string to_string(Schedule schedule) {
  return schedule == Schedule::alternating ? "alternating" : "reversal";
}

void TrainPlan::validate() const {
  weights.validate();
  if (!(step_size > 0.0) || !std::isfinite(step_size))
    throw ConfigError("step_size must be positive and finite");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (adversary_steps < 1) throw ConfigError("adversary_steps must be at least 1");
}

// ---- optimizer -------------------------------------------------------------

Adam::Adam(std::vector<NamedParam> params, double step)
    : params_(std::move(params)), step_(step) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].value.size(), 0.0);
    v_[i].assign(params_[i].value.size(), 0.0);
  }
}

void Adam::step() {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].value;
    const double* g = p.has_grad() ? p.grad().data() : nullptr;
    auto& vals = p.mutable_values();
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const double gk = g ? g[k] : 0.0;
      m_[i][k] = kBeta1 * m_[i][k] + (1.0 - kBeta1) * gk;
      v_[i][k] = kBeta2 * v_[i][k] + (1.0 - kBeta2) * gk * gk;
      vals[k] -= step_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + kEps);
    }
    p.zero_grad();
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

// ---- threshold and ranking metrics -----------------------------------------

double youden_threshold(const std::vector<double>& labels,
                        const std::vector<double>& scores) {
  if (labels.size() != scores.size())
    throw DimensionError("youden_threshold: labels and scores differ in length");
  if (scores.empty()) throw ContractError("youden_threshold: no scores");
  double total_pos = 0.0;
  for (double l : labels) total_pos += l > 0.5 ? 1.0 : 0.0;
  const double total_neg = static_cast<double>(labels.size()) - total_pos;
  if (total_pos == 0.0 || total_neg == 0.0)
    throw ContractError("youden_threshold: both classes must be present");

  // Count positives/negatives per unique score value, ascending.
  std::vector<std::pair<double, bool>> by_score(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    by_score[i] = {scores[i], labels[i] > 0.5};
  std::sort(by_score.begin(), by_score.end());
  std::vector<double> uniq;
  std::vector<double> pos_at, neg_at;
  for (const auto& [s, is_pos] : by_score) {
    if (uniq.empty() || s != uniq.back()) {
      uniq.push_back(s);
      pos_at.push_back(0.0);
      neg_at.push_back(0.0);
    }
    (is_pos ? pos_at.back() : neg_at.back()) += 1.0;
  }

  // Candidate k predicts positive for scores >= uniq[k]; its threshold is the
  // lowest unique score for k == 0 and the midpoint below uniq[k] otherwise.
  // Scanning ascending with strict improvement keeps the smallest tied value.
  double tp = total_pos, fp = total_neg;
  double best_j = -std::numeric_limits<double>::infinity();
  double best_t = uniq.front();
  for (std::size_t k = 0; k < uniq.size(); ++k) {
    if (k > 0) {
      tp -= pos_at[k - 1];
      fp -= neg_at[k - 1];
    }
    const double t = k == 0 ? uniq.front() : (uniq[k - 1] + uniq[k]) / 2.0;
    const double j = tp / total_pos - fp / total_neg;
    if (j > best_j) {
      best_j = j;
      best_t = t;
    }
  }
  return best_t;
}

double auroc(const std::vector<double>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size())
    throw DimensionError("auroc: labels and scores differ in length");
  std::size_t pos = 0;
  for (double l : labels) pos += l > 0.5 ? 1 : 0;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ContractError("auroc: both classes must be present");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks for ties: every member of a tie run gets the average rank.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double midrank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[idx[k]] > 0.5) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

// ---- gathering helpers ------------------------------------------------------

namespace {

Tensor gather_x(const EncodedDataset& data, const std::vector<std::size_t>& rows,
                bool requires_grad = false) {
  std::vector<double> vals(rows.size() * data.d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = data.X.data() + rows[i] * data.d;
    std::copy(src, src + data.d, vals.data() + i * data.d);
  }
  return Tensor({rows.size(), data.d}, std::move(vals), requires_grad);
}

std::vector<double> gather_y(const EncodedDataset& data,
                             const std::vector<std::size_t>& rows) {
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = data.y[rows[i]];
  return out;
}

std::vector<int> gather_z(const EncodedDataset& data,
                          const std::vector<std::size_t>& rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = data.z[rows[i]];
  return out;
}

std::vector<std::vector<int>> gather_sensitive(const EncodedDataset& data,
                                               const std::vector<std::size_t>& rows) {
  std::vector<std::vector<int>> out(data.sensitive.size());
  for (std::size_t v = 0; v < data.sensitive.size(); ++v) {
    out[v].resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      out[v][i] = data.sensitive[v].ids[rows[i]];
  }
  return out;
}

// Indicator columns of every sensitive variable, for the correlation penalty.
std::vector<std::vector<double>> gather_sensitive_columns(
    const EncodedDataset& data, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<double>> out;
  for (const auto& block : data.sensitive) {
    for (std::size_t c = 0; c < block.block_width; ++c) {
      std::vector<double> col(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i)
        col[i] = data.X[rows[i] * data.d + block.block_offset + c];
      out.push_back(std::move(col));
    }
  }
  return out;
}

Tensor detach(const Tensor& t) { return Tensor(t.shape(), t.values()); }

Tensor column_tensor(const std::vector<double>& v) {
  return Tensor({v.size(), 1}, v);
}

// Equal-width batches; a trailing singleton is folded into the previous batch
// so per-batch statistics (correlations in particular) stay defined.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n,
                                                              std::size_t bs) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < n; start += bs)
    out.emplace_back(start, std::min(start + bs, n));
  if (out.size() >= 2 && out.back().second - out.back().first == 1) {
    out[out.size() - 2].second = n;
    out.pop_back();
  }
  return out;
}

Tensor sum_terms(std::vector<Tensor> terms) {
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

Tensor average_cce(const std::vector<std::vector<int>>& s,
                   const std::vector<Tensor>& logits) {
  std::vector<Tensor> terms;
  terms.reserve(logits.size());
  for (std::size_t v = 0; v < logits.size(); ++v) terms.push_back(cce(s[v], logits[v]));
  Tensor total = sum_terms(std::move(terms));
  return logits.size() > 1 ? mul_scalar(total, 1.0 / static_cast<double>(logits.size()))
                           : total;
}

bool constant_values(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] != v[0]) return false;
  return true;
}

// Direct |corr(prediction, indicator)| penalty; degenerate batches (constant
// prediction or constant column) contribute nothing. Undefined tensor when
// every column degenerates.
Tensor correlation_penalty(const Tensor& pred,
                           const std::vector<std::vector<double>>& cols) {
  if (pred.size() < 2 || constant_values(pred.values())) return Tensor();
  Tensor total;
  for (const auto& col : cols) {
    if (constant_values(col)) continue;
    Tensor term = abs_(pearson_correlation(pred, col));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

void check_rows_in_range(const std::vector<std::size_t>& rows, std::size_t n,
                         const char* split) {
  for (std::size_t r : rows)
    if (r >= n)
      throw ContractError(std::string("row index ") + std::to_string(r) + " in the " +
                          split + " split is outside the dataset");
}

void check_stack_matches(const ModelStack& stack, const EncodedDataset& data) {
  if (stack.config().task != data.task)
    throw ContractError("model task (" + to_string(stack.config().task) +
                        ") does not match dataset task (" + to_string(data.task) + ")");
  if (stack.config().input_dim != data.d)
    throw ContractError("model expects " + std::to_string(stack.config().input_dim) +
                        " input features, dataset has " + std::to_string(data.d));
  const bool needs_clusters = stack.has_cluster_adversary() ||
                              stack.has_random_effects() || stack.has_z_predictor();
  if (needs_clusters && stack.config().clusters != data.cluster_names.size())
    throw ContractError("model expects " + std::to_string(stack.config().clusters) +
                        " clusters, dataset has " +
                        std::to_string(data.cluster_names.size()));
  if (stack.has_debias_fe() || stack.has_debias_me()) {
    const auto& widths = stack.config().sensitive_widths;
    if (widths.size() != data.sensitive.size())
      throw ContractError("model expects " + std::to_string(widths.size()) +
                          " sensitive variables, dataset has " +
                          std::to_string(data.sensitive.size()));
    for (std::size_t v = 0; v < widths.size(); ++v)
      if (widths[v] != data.sensitive[v].categories.size())
        throw ContractError("sensitive variable '" + data.sensitive[v].name + "' has " +
                            std::to_string(data.sensitive[v].categories.size()) +
                            " categories, model head expects " +
                            std::to_string(widths[v]));
  }
}

std::vector<std::vector<double>> snapshot_params(const std::vector<NamedParam>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value.values());
  return out;
}

void restore_params(std::vector<NamedParam>& params,
                    const std::vector<std::vector<double>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].value.mutable_values() = saved[i];
}

// Task loss of the deployment head (posterior-mean mixed head when random
// effects exist, fixed-effects head otherwise).
double holdout_task_loss(const ModelStack& stack, const EncodedDataset& data,
                         const std::vector<std::size_t>& rows) {
  const Tensor x = gather_x(data, rows);
  const FEOut out = stack.fe_forward(x);
  Tensor pred = out.pred;
  if (stack.has_random_effects())
    pred = stack.me_pred(out.latent, stack.re_mean(gather_z(data, rows)));
  return task_loss(data.task, gather_y(data, rows), pred).value();
}

// Combined single-optimizer objective: adversary cross-entropies sit behind a
// sign-flipping layer so one backward pass trains them while pushing the main
// network the other way. The correlation penalty acts on the prediction
// directly and needs no reversal. The membership head's cross-entropy touches
// no main parameter, so adding it trains that head in the same pass.
Tensor reversal_objective(const ModelStack& stack, const TrainPlan& plan,
                          TaskKind kind, const Tensor& xb,
                          const std::vector<double>& yb, const Tensor& y_col,
                          const std::vector<int>& zb,
                          const std::vector<std::vector<int>>& sb,
                          const std::vector<std::vector<double>>& s_cols,
                          const REDraw& u) {
  const LossWeights& w = plan.weights;
  const FEOut fe = stack.fe_forward(xb);
  std::vector<Tensor> terms;
  const auto push = [&terms](const Tensor& t, double c) {
    if (c == 0.0 || !t.defined()) return;
    terms.push_back(c == 1.0 ? t : mul_scalar(t, c));
  };

  switch (plan.variant) {
    case Variant::base:
      push(task_loss(kind, yb, fe.pred), 1.0);
      break;
    case Variant::da:
    case Variant::fair_da:
    case Variant::fair_da_acl: {
      push(task_loss(kind, yb, fe.pred), w.lambda_y);
      if (w.lambda_z != 0.0)
        push(cce(zb, stack.cluster_logits(gradient_reversal(fe.latent, 1.0))),
             w.lambda_z);
      if (plan.variant == Variant::fair_da && w.lambda_s != 0.0)
        push(average_cce(sb, stack.debias_fe_logits(gradient_reversal(fe.pred, 1.0),
                                                    y_col)),
             w.lambda_s);
      if (plan.variant == Variant::fair_da_acl && w.lambda_s != 0.0)
        push(correlation_penalty(fe.pred, s_cols), w.lambda_s);
      break;
    }
    case Variant::armed:
    case Variant::fair_medl: {
      const Tensor me_pred = stack.me_pred(fe.latent, u);
      push(task_loss(kind, yb, me_pred), 1.0);
      push(task_loss(kind, yb, fe.pred), w.lambda_F);
      if (w.lambda_g != 0.0)
        push(cce(zb, stack.cluster_logits(gradient_reversal(fe.latent, 1.0))),
             w.lambda_g);
      push(stack.re_kl(), w.lambda_K);
      if (plan.variant == Variant::fair_medl && w.lambda_D != 0.0) {
        push(average_cce(sb, stack.debias_fe_logits(gradient_reversal(fe.pred, 1.0),
                                                    y_col)),
             w.lambda_D / 2.0);
        push(average_cce(sb, stack.debias_me_logits(gradient_reversal(me_pred, 1.0),
                                                    y_col)),
             w.lambda_D / 2.0);
      }
      break;
    }
  }
  if (stack.has_z_predictor()) push(cce(zb, stack.z_logits(xb)), 1.0);
  if (terms.empty())
    throw ConfigError("every term of the training objective is weighted zero");
  return sum_terms(std::move(terms));
}

}  // namespace

// ---- counterfactual rescoring ----------------------------------------------

CounterfactualScores counterfactual_rescore(
    const EncodedDataset& data, const std::vector<std::size_t>& rows,
    const std::string& sensitive_name,
    const std::function<std::vector<double>(const Tensor&)>& forward) {
  const SensitiveBlock* block = nullptr;
  for (const auto& b : data.sensitive)
    if (b.name == sensitive_name) block = &b;
  if (block == nullptr)
    throw ContractError("no sensitive variable named '" + sensitive_name + "'");
  if (block->categories.size() < 2)
    throw DegenerateInputError("sensitive variable '" + sensitive_name +
                               "' has fewer than two categories");
  check_rows_in_range(rows, data.n, "counterfactual");

  CounterfactualScores out;
  for (std::size_t r : rows)
    if (block->ids[r] >= 0) out.rows.push_back(r);
  if (out.rows.empty())
    throw DegenerateInputError("no rows with a known '" + sensitive_name +
                               "' category to rescore");

  const Tensor x = gather_x(data, out.rows);
  out.factual = forward(x);
  if (out.factual.size() != out.rows.size())
    throw ContractError("counterfactual forward returned " +
                        std::to_string(out.factual.size()) + " scores for " +
                        std::to_string(out.rows.size()) + " rows");

  const std::size_t n_cat = block->categories.size();
  // Alternative j of a sample is the j-th category, ascending, that is not its
  // factual one; swapping rewrites only this variable's indicator block.
  for (std::size_t j = 0; j + 1 < n_cat; ++j) {
    std::vector<double> vals = x.values();
    for (std::size_t i = 0; i < out.rows.size(); ++i) {
      const int factual = block->ids[out.rows[i]];
      std::size_t alt = j < static_cast<std::size_t>(factual) ? j : j + 1;
      double* cell = vals.data() + i * data.d + block->block_offset;
      std::fill(cell, cell + block->block_width, 0.0);
      cell[alt] = 1.0;
    }
    Tensor x_cf({out.rows.size(), data.d}, std::move(vals));
    out.alternatives.push_back(forward(x_cf));
  }
  return out;
}

CounterfactualScores counterfactual_rescore(const ModelStack& stack,
                                            const EncodedDataset& data,
                                            const std::vector<std::size_t>& rows,
                                            const std::string& sensitive_name) {
  return counterfactual_rescore(
      data, rows, sensitive_name, [&stack](const Tensor& x) {
        const FEOut out = stack.fe_forward(x);
        return out.pred.values();
      });
}

// ---- gradient-based feature importance ---------------------------------------

std::vector<std::pair<std::string, double>> feature_importance(
    const ModelStack& stack, const EncodedDataset& data,
    const std::vector<std::size_t>& rows) {
  if (rows.empty())
    throw ContractError("feature importance needs at least one row");
  check_stack_matches(stack, data);
  check_rows_in_range(rows, data.n, "importance");

  Tensor x = gather_x(data, rows, /*requires_grad=*/true);
  const FEOut out = stack.fe_forward(x);
  backward(sum(out.pred));
  const auto& g = x.grad();

  std::vector<double> per_column(data.d, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < data.d; ++j)
      per_column[j] += std::abs(g[i * data.d + j]);
  for (double& v : per_column) v /= static_cast<double>(rows.size());

  std::vector<std::pair<std::string, double>> scores;
  scores.reserve(data.groups.size());
  for (const auto& group : data.groups) {
    double total = 0.0;
    for (std::size_t c : group.cols) total += per_column[c];
    scores.emplace_back(group.name, total);
  }
  std::sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return scores;
}

// ---- evaluation ---------------------------------------------------------------

namespace {

struct HeadView {
  std::string head;  // "fe" | "me"
  std::vector<double> scores;
};

std::vector<double> head_scores(const ModelStack& stack, const EncodedDataset& data,
                                const std::vector<std::size_t>& rows,
                                const std::string& head, bool unseen) {
  const Tensor x = gather_x(data, rows);
  if (head == "fe") {
    const FEOut out = stack.fe_forward(x);
    return out.pred.values();
  }
  if (unseen) {
    const Tensor pred = stack.ood_pred(x);
    return pred.values();
  }
  const FEOut out = stack.fe_forward(x);
  const Tensor pred = stack.me_pred(out.latent, stack.re_mean(gather_z(data, rows)));
  return pred.values();
}

struct Confusion {
  double tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion_at(const std::vector<double>& labels,
                       const std::vector<double>& scores, double threshold) {
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred_pos = scores[i] >= threshold;
    const bool is_pos = labels[i] > 0.5;
    if (is_pos)
      (pred_pos ? c.tp : c.fn) += 1.0;
    else
      (pred_pos ? c.fp : c.tn) += 1.0;
  }
  return c;
}

void classification_metrics(const std::string& prefix,
                            const std::vector<double>& labels,
                            const std::vector<double>& scores, double threshold,
                            std::map<std::string, double>& out) {
  const Confusion c = confusion_at(labels, scores, threshold);
  const double n = c.tp + c.fp + c.tn + c.fn;
  out[prefix + "accuracy"] = (c.tp + c.tn) / n;
  const bool has_pos = c.tp + c.fn > 0.0;
  const bool has_neg = c.fp + c.tn > 0.0;
  if (has_pos) out[prefix + "sensitivity"] = c.tp / (c.tp + c.fn);
  if (has_neg) out[prefix + "specificity"] = c.tn / (c.fp + c.tn);
  if (has_pos && has_neg) {
    out[prefix + "balanced_accuracy"] =
        (out[prefix + "sensitivity"] + out[prefix + "specificity"]) / 2.0;
    out[prefix + "auroc"] = auroc(labels, scores);
  }
  if (c.tp + c.fp > 0.0) out[prefix + "ppv"] = c.tp / (c.tp + c.fp);
  if (c.tn + c.fn > 0.0) out[prefix + "npv"] = c.tn / (c.tn + c.fn);
}

void regression_metrics(const std::string& prefix, const std::vector<double>& labels,
                        const std::vector<double>& scores,
                        std::map<std::string, double>& out) {
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double d = scores[i] - labels[i];
    se += d * d;
    ae += std::abs(d);
  }
  out[prefix + "mse"] = se / static_cast<double>(labels.size());
  out[prefix + "mae"] = ae / static_cast<double>(labels.size());
}

// Fairness metrics for one (split, head); rows whose category is unknown for a
// variable are excluded from that variable only. Degenerate groupings (one
// category present, no counterfactual categories) skip the metric rather than
// aborting the evaluation.
void fairness_metrics(const ModelStack& stack, const EncodedDataset& data,
                      const std::vector<std::size_t>& rows,
                      const std::string& prefix, const std::string& head,
                      bool unseen, const std::vector<double>& labels,
                      const std::vector<double>& scores, double threshold,
                      std::map<std::string, double>& out) {
  const bool cls = data.task == TaskKind::classification;
  for (const auto& block : data.sensitive) {
    GroupedPredictions gp;
    gp.category_names = block.categories;
    std::vector<std::size_t> known_rows;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int id = block.ids[rows[i]];
      if (id < 0) continue;
      known_rows.push_back(rows[i]);
      gp.scores.push_back(scores[i]);
      gp.labels.push_back(labels[i]);
      gp.group.push_back(id);
      if (cls) gp.hard_preds.push_back(scores[i] >= threshold ? 1 : 0);
    }
    if (known_rows.empty()) continue;
    try {
      if (cls) {
        const auto [tpr_sd, fpr_sd] = equalized_odds_sd(gp);
        out[prefix + "tpr_sd/" + block.name] = tpr_sd;
        out[prefix + "fpr_sd/" + block.name] = fpr_sd;
        out[prefix + "dp/" + block.name] = demographic_parity_cls(gp).value;
      } else {
        out[prefix + "mse_sd/" + block.name] = equalized_odds_mse_sd(gp);
        out[prefix + "dp/" + block.name] = demographic_parity_reg(gp).value;
      }
    } catch (const Error&) {
      // fewer than two categories with defined rates in this split
    }
    try {
      const auto forward = [&stack, &data, &known_rows, head,
                            unseen](const Tensor& x) {
        if (head == "fe") {
          const FEOut o = stack.fe_forward(x);
          return o.pred.values();
        }
        if (unseen) {
          const Tensor pred = stack.ood_pred(x);
          return pred.values();
        }
        const FEOut o = stack.fe_forward(x);
        const Tensor pred =
            stack.me_pred(o.latent, stack.re_mean(gather_z(data, known_rows)));
        return pred.values();
      };
      const CounterfactualScores cf =
          counterfactual_rescore(data, known_rows, block.name, forward);
      const FairnessValue v =
          cls ? counterfactual_fairness_cls(cf.factual, cf.alternatives)
              : counterfactual_fairness_reg(cf.factual, cf.alternatives);
      out[prefix + "cf/" + block.name] = v.value;
    } catch (const Error&) {
      // variable degenerate under counterfactual swaps for this split
    }
  }
}

}  // namespace

RunResult evaluate(const ModelStack& stack, const EncodedDataset& data,
                   const SplitRows& rows, double threshold) {
  check_stack_matches(stack, data);
  if (rows.test.empty()) throw ContractError("evaluation needs a non-empty test split");
  const bool cls = data.task == TaskKind::classification;

  RunResult result;
  result.variant = stack.variant();
  result.threshold = threshold;

  std::vector<std::string> heads = {"fe"};
  if (stack.has_random_effects()) heads.push_back("me");

  const std::vector<std::pair<std::string, const std::vector<std::size_t>*>> splits = {
      {"train", &rows.train},
      {"val", &rows.val},
      {"test", &rows.test},
      {"unseen", &rows.unseen},
  };

  for (const auto& [split_name, split_rows] : splits) {
    if (split_rows->empty()) continue;
    check_rows_in_range(*split_rows, data.n, split_name.c_str());
    const bool unseen = split_name == "unseen";
    const std::vector<double> labels = gather_y(data, *split_rows);
    for (const auto& head : heads) {
      const std::vector<double> scores =
          head_scores(stack, data, *split_rows, head, unseen);
      for (std::size_t i = 0; i < split_rows->size(); ++i) {
        PredictionRow row;
        row.id = (*split_rows)[i];
        row.split = split_name;
        row.head = head;
        row.score = scores[i];
        row.hard = cls ? (scores[i] >= threshold ? 1 : 0) : -1;
        row.label = labels[i];
        row.sensitive.reserve(data.sensitive.size());
        for (const auto& block : data.sensitive)
          row.sensitive.push_back(block.ids[row.id]);
        result.predictions.push_back(std::move(row));
      }
      if (split_name == "train") continue;  // predictions only
      const std::string prefix = split_name + "/" + head + "/";
      if (cls)
        classification_metrics(prefix, labels, scores, threshold, result.metrics);
      else
        regression_metrics(prefix, labels, scores, result.metrics);
      fairness_metrics(stack, data, *split_rows, prefix, head, unseen, labels,
                       scores, threshold, result.metrics);
    }
  }

  result.importance = feature_importance(stack, data, rows.test);
  return result;
}

// ---- training -----------------------------------------------------------------

RunResult train(ModelStack& stack, const EncodedDataset& data, const SplitRows& rows,
                const TrainPlan& plan) {
  plan.validate();
  if (stack.variant() != plan.variant)
    throw ContractError("plan is for variant '" + to_string(plan.variant) +
                        "' but the stack is '" + to_string(stack.variant()) + "'");
  check_stack_matches(stack, data);
  if (rows.train.empty() || rows.val.empty() || rows.test.empty())
    throw ContractError("train, val and test splits must all be non-empty");
  check_rows_in_range(rows.train, data.n, "train");
  check_rows_in_range(rows.val, data.n, "val");
  check_rows_in_range(rows.test, data.n, "test");
  check_rows_in_range(rows.unseen, data.n, "unseen");

  const bool need_z = stack.has_cluster_adversary() || stack.has_random_effects() ||
                      stack.has_z_predictor();
  if (need_z) {
    for (const auto* split : {&rows.train, &rows.val, &rows.test})
      for (std::size_t r : *split)
        if (data.z[r] < 0)
          throw ContractError("row " + std::to_string(r) +
                              " has an unseen cluster; route it to the unseen split");
  }
  const bool need_s = stack.has_debias_fe() || stack.has_debias_me();
  if (need_s) {
    for (const auto& block : data.sensitive)
      for (std::size_t r : rows.train)
        if (block.ids[r] < 0)
          throw ContractError("training row " + std::to_string(r) +
                              " has no known category for sensitive variable '" +
                              block.name + "'");
  }

  const TaskKind kind = data.task;
  const bool cls = kind == TaskKind::classification;
  const bool alternating = plan.schedule == Schedule::alternating;
  const bool me = stack.has_random_effects();
  const bool acl = plan.variant == Variant::fair_da_acl;
  const bool has_adversary = stack.has_cluster_adversary() || need_s;

  Rng shuffle_rng(derive_seed(plan.seed, "train/shuffle"));
  Rng re_rng(derive_seed(plan.seed, "train/re"));

  Adam main_opt, adversary_opt, z_opt, all_opt;
  if (alternating) {
    main_opt = Adam(stack.main_params(), plan.step_size);
    if (has_adversary) adversary_opt = Adam(stack.adversary_params(), plan.step_size);
    if (stack.has_z_predictor()) z_opt = Adam(stack.z_params(), plan.step_size);
  } else {
    all_opt = Adam(stack.all_params(), plan.step_size);
  }

  std::vector<NamedParam> all_params = stack.all_params();
  std::vector<std::vector<double>> best_weights = snapshot_params(all_params);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  RunResult result;
  for (std::size_t epoch = 0; epoch < plan.max_epochs; ++epoch) {
    std::vector<std::size_t> order = rows.train;
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    const auto ranges = batch_ranges(order.size(), plan.batch_size);
    for (const auto& [b0, b1] : ranges) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                           order.begin() + static_cast<std::ptrdiff_t>(b1));
      const Tensor xb = gather_x(data, batch);
      const std::vector<double> yb = gather_y(data, batch);
      const std::vector<int> zb = need_z ? gather_z(data, batch) : std::vector<int>{};
      const std::vector<std::vector<int>> sb =
          need_s ? gather_sensitive(data, batch) : std::vector<std::vector<int>>{};
      const std::vector<std::vector<double>> s_cols =
          acl ? gather_sensitive_columns(data, batch)
              : std::vector<std::vector<double>>{};
      const Tensor y_col = need_s ? column_tensor(yb) : Tensor();

      // One posterior draw per batch, shared by every phase that needs it.
      REDraw u;
      if (me) u = stack.re_sample(zb, re_rng);

      double batch_loss = 0.0;
      if (alternating) {
        if (has_adversary) {
          // Adversaries minimize their own cross-entropy on frozen inputs.
          const FEOut probe = stack.fe_forward(xb);
          const Tensor latent_in = detach(probe.latent);
          const Tensor pred_in = detach(probe.pred);
          Tensor me_in;
          if (stack.has_debias_me()) me_in = detach(stack.me_pred(probe.latent, u));
          for (std::size_t k = 0; k < plan.adversary_steps; ++k) {
            std::vector<Tensor> terms;
            if (stack.has_cluster_adversary())
              terms.push_back(cce(zb, stack.cluster_logits(latent_in)));
            if (stack.has_debias_fe()) {
              const auto heads = stack.debias_fe_logits(pred_in, y_col);
              for (std::size_t v = 0; v < sb.size(); ++v)
                terms.push_back(cce(sb[v], heads[v]));
            }
            if (stack.has_debias_me()) {
              const auto heads = stack.debias_me_logits(me_in, y_col);
              for (std::size_t v = 0; v < sb.size(); ++v)
                terms.push_back(cce(sb[v], heads[v]));
            }
            backward(sum_terms(std::move(terms)));
            adversary_opt.step();
          }
        }
        if (stack.has_z_predictor()) {
          backward(cce(zb, stack.z_logits(xb)));
          z_opt.step();
        }

        // Main step on the composed objective with adversaries frozen.
        const FEOut fe = stack.fe_forward(xb);
        Tensor loss;
        switch (plan.variant) {
          case Variant::base:
            loss = task_loss(kind, yb, fe.pred);
            break;
          case Variant::da:
            loss = compose_da(kind, yb, fe.pred, zb, stack.cluster_logits(fe.latent),
                              plan.weights);
            break;
          case Variant::fair_da:
            loss = compose_fair_da(
                kind, yb, fe.pred, zb, stack.cluster_logits(fe.latent), sb,
                plan.weights.lambda_s > 0.0 ? stack.debias_fe_logits(fe.pred, y_col)
                                            : std::vector<Tensor>{},
                plan.weights);
            break;
          case Variant::fair_da_acl:
            loss = compose_fair_da_acl(kind, yb, fe.pred, zb,
                                       stack.cluster_logits(fe.latent), s_cols,
                                       plan.weights);
            break;
          case Variant::armed: {
            const Tensor me_pred = stack.me_pred(fe.latent, u);
            loss = compose_armed(kind, yb, me_pred, fe.pred, zb,
                                 stack.cluster_logits(fe.latent), stack.re_kl(),
                                 plan.weights);
            break;
          }
          case Variant::fair_medl: {
            const Tensor me_pred = stack.me_pred(fe.latent, u);
            const bool debias = plan.weights.lambda_D > 0.0;
            loss = compose_fair_medl(
                kind, yb, me_pred, fe.pred, zb, stack.cluster_logits(fe.latent),
                stack.re_kl(), sb,
                debias ? stack.debias_fe_logits(fe.pred, y_col) : std::vector<Tensor>{},
                debias ? stack.debias_me_logits(me_pred, y_col) : std::vector<Tensor>{},
                plan.weights);
            break;
          }
        }
        batch_loss = loss.value();
        if (!std::isfinite(batch_loss))
          throw Error("training diverged: non-finite loss at epoch " +
                      std::to_string(epoch + 1) + ", batch " +
                      std::to_string(batch_index + 1) +
                      "; try a smaller step size or weaker adversary weights");
        backward(loss);
        main_opt.step();
        // The composed graph reaches frozen subnets; drop those gradients.
        adversary_opt.zero_grad();
        z_opt.zero_grad();
      } else {
        const Tensor loss =
            reversal_objective(stack, plan, kind, xb, yb, y_col, zb, sb, s_cols, u);
        batch_loss = loss.value();
        if (!std::isfinite(batch_loss))
          throw Error("training diverged: non-finite loss at epoch " +
                      std::to_string(epoch + 1) + ", batch " +
                      std::to_string(batch_index + 1) +
                      "; try a smaller step size or weaker adversary weights");
        backward(loss);
        all_opt.step();
      }
      loss_sum += batch_loss;
      ++batch_index;
    }
    result.train_curve.push_back(loss_sum / static_cast<double>(ranges.size()));

    const double val_loss = holdout_task_loss(stack, data, rows.val);
    if (!std::isfinite(val_loss))
      throw Error("training diverged: non-finite validation loss at epoch " +
                  std::to_string(epoch + 1));
    result.val_curve.push_back(val_loss);
    result.epochs_run = epoch + 1;

    if (val_loss < best_val) {
      best_val = val_loss;
      best_weights = snapshot_params(all_params);
      since_best = 0;
    } else if (++since_best >= plan.patience) {
      result.early_stopped = true;
      break;
    }
  }
  restore_params(all_params, best_weights);

  double threshold = 0.5;
  if (cls) {
    const std::vector<double> labels = gather_y(data, rows.train);
    const std::vector<double> scores =
        head_scores(stack, data, rows.train, me ? "me" : "fe", /*unseen=*/false);
    threshold = youden_threshold(labels, scores);
  }

  RunResult evaluated = evaluate(stack, data, rows, threshold);
  evaluated.train_curve = std::move(result.train_curve);
  evaluated.val_curve = std::move(result.val_curve);
  evaluated.epochs_run = result.epochs_run;
  evaluated.early_stopped = result.early_stopped;
  evaluated.checkpoint = stack.to_checkpoint_json();
  return evaluated;
}

RunResult train_run(const ArchConfig& arch, const TrainPlan& plan,
                    const EncodedDataset& data, const SplitRows& rows) {
  // Dimensions that are properties of the bundle are filled in from it.
  ArchConfig a = arch;
  a.input_dim = data.d;
  a.task = data.task;
  a.clusters = data.cluster_names.size();
  a.sensitive_widths.clear();
  for (const auto& block : data.sensitive)
    a.sensitive_widths.push_back(block.categories.size());
  ModelStack stack(plan.variant, a);
  return train(stack, data, rows, plan);
}

SplitRows repeat_split(const SplitRows& rows, std::uint64_t plan_seed, std::size_t r) {
  std::vector<std::size_t> pool = rows.train;
  pool.insert(pool.end(), rows.val.begin(), rows.val.end());
  std::sort(pool.begin(), pool.end());

  Rng resample(derive_seed(plan_seed, "repeat/" + std::to_string(r)));
  resample.shuffle(pool);
  SplitRows split;
  split.train.assign(pool.begin(),
                     pool.begin() + static_cast<std::ptrdiff_t>(rows.train.size()));
  split.val.assign(pool.begin() + static_cast<std::ptrdiff_t>(rows.train.size()),
                   pool.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  split.test = rows.test;
  split.unseen = rows.unseen;
  return split;
}

RunResult repeat_run(const ArchConfig& arch, const TrainPlan& plan,
                     const EncodedDataset& data, const SplitRows& rows,
                     std::size_t r) {
  const SplitRows split = repeat_split(rows, plan.seed, r);

  ArchConfig a = arch;
  a.seed = derive_seed(arch.seed, "repeat-arch/" + std::to_string(r));
  TrainPlan p = plan;
  p.seed = derive_seed(plan.seed, "repeat-train/" + std::to_string(r));
  return train_run(a, p, data, split);
}

std::vector<std::map<std::string, double>> repeated_runs(
    const ArchConfig& arch, const TrainPlan& plan, const EncodedDataset& data,
    const SplitRows& rows, std::size_t n_repeats, std::size_t jobs) {
  if (n_repeats == 0) throw ConfigError("repeated runs need at least one repeat");
  if (jobs == 0) throw ConfigError("jobs must be at least 1");

  std::vector<std::map<std::string, double>> results(n_repeats);
  std::atomic<std::size_t> next{0};
  const auto run_one = [&](std::size_t r) {
    results[r] = repeat_run(arch, plan, data, rows, r).metrics;
  };

  if (jobs <= 1) {
    for (std::size_t r = 0; r < n_repeats; ++r) run_one(r);
    return results;
  }
  std::vector<std::thread> workers;
  const std::size_t n_workers = std::min(jobs, n_repeats);
  workers.reserve(n_workers);
  for (std::size_t wi = 0; wi < n_workers; ++wi)
    workers.emplace_back([&]() {
      for (std::size_t r = next.fetch_add(1); r < n_repeats; r = next.fetch_add(1))
        run_one(r);
    });
  for (auto& w : workers) w.join();
  return results;
}

// ---- serialization --------------------------------------------------------------

std::string run_result_to_json(const RunResult& result) {
  nlohmann::json doc;
  doc["variant"] = to_string(result.variant);
  doc["threshold"] = result.threshold;
  doc["metrics"] = result.metrics;
  nlohmann::json imp = nlohmann::json::array();
  for (const auto& [name, value] : result.importance)
    imp.push_back({{"feature", name}, {"value", value}});
  doc["importance"] = std::move(imp);
  doc["train_curve"] = result.train_curve;
  doc["val_curve"] = result.val_curve;
  doc["epochs_run"] = result.epochs_run;
  doc["early_stopped"] = result.early_stopped;
  doc["checkpoint"] = result.checkpoint;
  // Predictions travel as CSV, not JSON; see predictions_to_csv.
  return doc.dump(2);
}

RunResult run_result_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("run result is not valid JSON: ") + e.what());
  }
  RunResult result;
  try {
    result.variant = variant_from_string(doc.at("variant").get<std::string>());
    result.threshold = doc.at("threshold").get<double>();
    result.metrics = doc.at("metrics").get<std::map<std::string, double>>();
    for (const auto& item : doc.at("importance"))
      result.importance.emplace_back(item.at("feature").get<std::string>(),
                                     item.at("value").get<double>());
    result.train_curve = doc.at("train_curve").get<std::vector<double>>();
    result.val_curve = doc.at("val_curve").get<std::vector<double>>();
    result.epochs_run = doc.at("epochs_run").get<std::size_t>();
    result.early_stopped = doc.at("early_stopped").get<bool>();
    result.checkpoint = doc.at("checkpoint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("run result document is malformed: ") + e.what());
  }
  return result;
}

std::string predictions_to_csv(const RunResult& result,
                               const std::vector<std::string>& sensitive_names) {
  std::ostringstream out;
  out << "id,split,head,score,pred,label";
  for (const auto& name : sensitive_names) out << ',' << csv_escape(name);
  out << '\n';
  for (const auto& row : result.predictions) {
    if (row.sensitive.size() != sensitive_names.size())
      throw ContractError("prediction row carries " +
                          std::to_string(row.sensitive.size()) +
                          " sensitive ids, header names " +
                          std::to_string(sensitive_names.size()));
    out << row.id << ',' << row.split << ',' << row.head << ','
        << format_double(row.score) << ',' << row.hard << ','
        << format_double(row.label);
    for (int id : row.sensitive) out << ',' << id;
    out << '\n';
  }
  return out.str();
}

}  // namespace fairmedl
