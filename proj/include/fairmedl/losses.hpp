#pragma once

#include "fairmedl/tensor.hpp"

#include <vector>

namespace fairmedl {

enum class TaskKind { classification, regression };

TaskKind task_kind_from_string(const std::string& name);
std::string to_string(TaskKind kind);

// Weights for the composed objectives. All must be finite and non-negative;
// a weight of exactly zero removes its term from the graph entirely, so
// ablated runs are bitwise identical to runs of the smaller model.
struct LossWeights {
  double lambda_F = 1.0;  // FE prediction term
  double lambda_g = 1.0;  // cluster adversary term
  double lambda_K = 1.0;  // variational KL term
  double lambda_D = 1.0;  // debias adversary term
  double lambda_y = 1.0;  // DA-family task term
  double lambda_z = 1.0;  // DA-family cluster adversary term
  double lambda_s = 1.0;  // DA-family sensitive term

  void validate() const;
};

// Mean binary cross-entropy. p holds probabilities, clamped to
// [1e-12, 1-1e-12] before the logs.
Tensor bce(const std::vector<double>& y, const Tensor& p);

// Mean categorical cross-entropy over logits (fused log-softmax).
Tensor cce(const std::vector<int>& labels, const Tensor& logits);

// Mean squared error.
Tensor mse(const std::vector<double>& y, const Tensor& y_hat);

Tensor task_loss(TaskKind kind, const std::vector<double>& y, const Tensor& y_hat);

// KL(N(mu_q, var_q) || N(0, var_p)) summed over parameters. The tensor form
// takes log-variances so the positivity precondition holds by construction.
double kl_gaussian(const std::vector<double>& mu_q, const std::vector<double>& var_q,
                   double var_p);
Tensor kl_gaussian(const Tensor& mu_q, const Tensor& logvar_q, double var_p);

// Pearson r, differentiable w.r.t. a. The op output is clamped to
// [-1+1e-9, 1-1e-9] (value only; the gradient is the raw derivative).
// pearson_value returns the unclamped scalar.
Tensor pearson_correlation(const Tensor& a, const std::vector<double>& b);
double pearson_value(const std::vector<double>& a, const std::vector<double>& b);

// Composed objectives. These return the literal weighted sums of the written
// equations as differentiable scalars; adversarial gradient routing (reversal
// or alternating updates) is wired where the training graph is built, not
// here. Zero-weighted terms are skipped, not multiplied by zero.
Tensor compose_da(TaskKind kind, const std::vector<double>& y, const Tensor& y_hat_F,
                  const std::vector<int>& z, const Tensor& z_logits,
                  const LossWeights& w);

Tensor compose_fair_da(TaskKind kind, const std::vector<double>& y,
                       const Tensor& y_hat_F, const std::vector<int>& z,
                       const Tensor& z_logits,
                       const std::vector<std::vector<int>>& s,
                       const std::vector<Tensor>& s_logits, const LossWeights& w);

// sensitive_columns: indicator columns of every sensitive variable, already
// expanded. Zero-variance columns (or a constant prediction batch) contribute
// zero instead of raising, so saturated early batches do not abort training.
Tensor compose_fair_da_acl(TaskKind kind, const std::vector<double>& y,
                           const Tensor& y_hat_F, const std::vector<int>& z,
                           const Tensor& z_logits,
                           const std::vector<std::vector<double>>& sensitive_columns,
                           const LossWeights& w);

Tensor compose_armed(TaskKind kind, const std::vector<double>& y, const Tensor& y_hat_M,
                     const Tensor& y_hat_F, const std::vector<int>& z,
                     const Tensor& z_logits, const Tensor& kl, const LossWeights& w);

Tensor compose_fair_medl(TaskKind kind, const std::vector<double>& y,
                         const Tensor& y_hat_M, const Tensor& y_hat_F,
                         const std::vector<int>& z, const Tensor& z_logits,
                         const Tensor& kl, const std::vector<std::vector<int>>& s,
                         const std::vector<Tensor>& s_logits_F,
                         const std::vector<Tensor>& s_logits_M, const LossWeights& w);

}  // namespace fairmedl
