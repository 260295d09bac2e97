#include "fairmedl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fairmedl {

namespace {

constexpr double kProbClamp = 1e-12;
constexpr double kPearsonClamp = 1e-9;

void require_vector_like(const Tensor& t, std::size_t n, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  const auto& s = t.shape();
  const bool ok = (s.size() == 1 && s[0] == n) || (s.size() == 2 && s[0] == n && s[1] == 1);
  if (!ok) {
    throw ContractError(std::string(op) + ": expected " + std::to_string(n) +
                        " predictions, got shape " + shape_to_string(s));
  }
}

void require_finite_weight(double v, const char* name) {
  if (!std::isfinite(v) || v < 0.0) {
    throw ConfigError(std::string("loss weight ") + name + " must be finite and >= 0, got " +
                      std::to_string(v));
  }
}

Tensor weighted(const Tensor& term, double w) {
  return w == 1.0 ? term : mul_scalar(term, w);
}

// acc += sign * w * term, skipping the node entirely when w == 0.
void accumulate(Tensor& acc, const Tensor& term, double w, bool subtract = false) {
  if (w == 0.0) return;
  Tensor scaled = weighted(term, w);
  if (!acc.defined()) {
    acc = subtract ? mul_scalar(scaled, -1.0) : scaled;
  } else {
    acc = subtract ? sub(acc, scaled) : add(acc, scaled);
  }
}

Tensor averaged_cce(const std::vector<std::vector<int>>& labels,
                    const std::vector<Tensor>& logits, const char* op) {
  if (labels.empty() || labels.size() != logits.size()) {
    throw ContractError(std::string(op) + ": need one logits tensor per sensitive variable");
  }
  Tensor total;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    Tensor term = cce(labels[v], logits[v]);
    total = total.defined() ? add(total, term) : term;
  }
  return labels.size() == 1 ? total
                            : mul_scalar(total, 1.0 / static_cast<double>(labels.size()));
}

}  // namespace

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "regression") return TaskKind::regression;
  throw ConfigError("unknown task kind: " + name);
}

std::string to_string(TaskKind kind) {
  return kind == TaskKind::classification ? "classification" : "regression";
}

void LossWeights::validate() const {
  require_finite_weight(lambda_F, "lambda_F");
  require_finite_weight(lambda_g, "lambda_g");
  require_finite_weight(lambda_K, "lambda_K");
  require_finite_weight(lambda_D, "lambda_D");
  require_finite_weight(lambda_y, "lambda_y");
  require_finite_weight(lambda_z, "lambda_z");
  require_finite_weight(lambda_s, "lambda_s");
}

Tensor bce(const std::vector<double>& y, const Tensor& p) {
  require_vector_like(p, y.size(), "bce");
  if (y.empty()) throw ContractError("bce: empty batch");
  const std::size_t n = y.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(p.values()[i], kProbClamp, 1.0 - kProbClamp);
    total += -(y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc));
  }
  auto pp = p.node_ptr();
  return make_op_result(
      {1}, {total / static_cast<double>(n)}, {pp}, [pp, y, n](detail::TapeNode& self) {
        if (pp->adj.empty()) pp->adj.assign(pp->size(), 0.0);
        const double g = self.adj[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double raw = pp->values[i];
          if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;
          pp->adj[i] += g * (raw - y[i]) / (raw * (1.0 - raw));
        }
      });
}

Tensor cce(const std::vector<int>& labels, const Tensor& logits) {
  if (!logits.defined()) throw ContractError("cce: undefined logits");
  if (logits.shape().size() != 2 || logits.rows() != labels.size()) {
    throw ContractError("cce: logits shape " + shape_to_string(logits.shape()) +
                        " does not match " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("cce: empty batch");
  const std::size_t n = logits.rows(), k = logits.cols();
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw ContractError("cce: label " + std::to_string(l) + " outside [0, " +
                          std::to_string(k) + ")");
    }
  }
  // softmax probabilities captured for the fused backward
  std::vector<double> probs(n * k);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double mx = logits.values()[r * k];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits.values()[r * k + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      probs[r * k + c] = std::exp(logits.values()[r * k + c] - mx);
      z += probs[r * k + c];
    }
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] /= z;
    total += std::log(z) + mx - logits.values()[r * k + static_cast<std::size_t>(labels[r])];
  }
  auto pl = logits.node_ptr();
  return make_op_result(
      {1}, {total / static_cast<double>(n)}, {pl},
      [pl, labels, probs = std::move(probs), n, k](detail::TapeNode& self) {
        if (pl->adj.empty()) pl->adj.assign(pl->size(), 0.0);
        const double g = self.adj[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < k; ++c) {
            const double onehot = (static_cast<std::size_t>(labels[r]) == c) ? 1.0 : 0.0;
            pl->adj[r * k + c] += g * (probs[r * k + c] - onehot);
          }
      });
}

Tensor mse(const std::vector<double>& y, const Tensor& y_hat) {
  require_vector_like(y_hat, y.size(), "mse");
  if (y.empty()) throw ContractError("mse: empty batch");
  Tensor target(y_hat.shape(), y_hat.shape().size() == 1
                                   ? y
                                   : std::vector<double>(y.begin(), y.end()));
  return mean(square(sub(y_hat, target)));
}

Tensor task_loss(TaskKind kind, const std::vector<double>& y, const Tensor& y_hat) {
  return kind == TaskKind::classification ? bce(y, y_hat) : mse(y, y_hat);
}

double kl_gaussian(const std::vector<double>& mu_q, const std::vector<double>& var_q,
                   double var_p) {
  if (mu_q.size() != var_q.size()) {
    throw ContractError("kl_gaussian: mu and var lengths differ");
  }
  if (!(var_p > 0.0)) throw ContractError("kl_gaussian: prior variance must be > 0");
  double total = 0.0;
  for (std::size_t i = 0; i < mu_q.size(); ++i) {
    if (!(var_q[i] > 0.0)) {
      throw ContractError("kl_gaussian: variance must be > 0, got " +
                          std::to_string(var_q[i]));
    }
    const double ratio = var_q[i] / var_p;
    total += 0.5 * (ratio + mu_q[i] * mu_q[i] / var_p - 1.0 - std::log(ratio));
  }
  return total;
}

Tensor kl_gaussian(const Tensor& mu_q, const Tensor& logvar_q, double var_p) {
  if (!mu_q.defined() || !logvar_q.defined() || mu_q.shape() != logvar_q.shape()) {
    throw ContractError("kl_gaussian: mu and logvar shapes differ");
  }
  if (!(var_p > 0.0)) throw ContractError("kl_gaussian: prior variance must be > 0");
  // 0.5 * sum(var/var_p + mu^2/var_p - 1 - logvar + log var_p)
  Tensor inner = add_scalar(
      sub(add(mul_scalar(exp_(logvar_q), 1.0 / var_p), mul_scalar(square(mu_q), 1.0 / var_p)),
          logvar_q),
      std::log(var_p) - 1.0);
  return mul_scalar(sum(inner), 0.5);
}

namespace {

struct PearsonParts {
  double a_mean, b_mean, s_aa, s_bb, s_ab, r;
};

PearsonParts pearson_parts(const std::vector<double>& a, const std::vector<double>& b,
                           const char* op) {
  if (a.size() != b.size()) throw ContractError(std::string(op) + ": lengths differ");
  if (a.size() < 2) throw ContractError(std::string(op) + ": need at least 2 samples");
  const double n = static_cast<double>(a.size());
  PearsonParts p{0, 0, 0, 0, 0, 0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    p.a_mean += a[i];
    p.b_mean += b[i];
  }
  p.a_mean /= n;
  p.b_mean /= n;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - p.a_mean, db = b[i] - p.b_mean;
    p.s_aa += da * da;
    p.s_bb += db * db;
    p.s_ab += da * db;
  }
  if (p.s_aa == 0.0 || p.s_bb == 0.0) {
    throw DegenerateInputError(std::string(op) + ": zero variance input");
  }
  p.r = p.s_ab / std::sqrt(p.s_aa * p.s_bb);
  return p;
}

}  // namespace

double pearson_value(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson_parts(a, b, "pearson_value").r;
}

Tensor pearson_correlation(const Tensor& a, const std::vector<double>& b) {
  require_vector_like(a, b.size(), "pearson_correlation");
  PearsonParts p = pearson_parts(a.values(), b, "pearson_correlation");
  const double clamped = std::clamp(p.r, -1.0 + kPearsonClamp, 1.0 - kPearsonClamp);
  auto pa = a.node_ptr();
  return make_op_result({1}, {clamped}, {pa}, [pa, b, p](detail::TapeNode& self) {
    if (pa->adj.empty()) pa->adj.assign(pa->size(), 0.0);
    const double g = self.adj[0];
    const double denom = std::sqrt(p.s_aa * p.s_bb);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double da = pa->values[i] - p.a_mean, db = b[i] - p.b_mean;
      pa->adj[i] += g * (db / denom - p.r * da / p.s_aa);
    }
  });
}

Tensor compose_da(TaskKind kind, const std::vector<double>& y, const Tensor& y_hat_F,
                  const std::vector<int>& z, const Tensor& z_logits,
                  const LossWeights& w) {
  w.validate();
  Tensor total;
  accumulate(total, task_loss(kind, y, y_hat_F), w.lambda_y);
  if (w.lambda_z > 0.0) {
    if (!z_logits.defined()) throw ContractError("compose_da: missing adversary logits");
    accumulate(total, cce(z, z_logits), w.lambda_z, /*subtract=*/true);
  }
  if (!total.defined()) return Tensor::scalar(0.0);
  return total;
}

Tensor compose_fair_da(TaskKind kind, const std::vector<double>& y,
                       const Tensor& y_hat_F, const std::vector<int>& z,
                       const Tensor& z_logits,
                       const std::vector<std::vector<int>>& s,
                       const std::vector<Tensor>& s_logits, const LossWeights& w) {
  Tensor total = compose_da(kind, y, y_hat_F, z, z_logits, w);
  if (w.lambda_s > 0.0) {
    Tensor adv = averaged_cce(s, s_logits, "compose_fair_da");
    total = sub(total, weighted(adv, w.lambda_s));
  }
  return total;
}

Tensor compose_fair_da_acl(TaskKind kind, const std::vector<double>& y,
                           const Tensor& y_hat_F, const std::vector<int>& z,
                           const Tensor& z_logits,
                           const std::vector<std::vector<double>>& sensitive_columns,
                           const LossWeights& w) {
  Tensor total = compose_da(kind, y, y_hat_F, z, z_logits, w);
  if (w.lambda_s == 0.0 || sensitive_columns.empty()) return total;

  const auto& pred = y_hat_F.values();
  bool constant_pred = true;
  for (std::size_t i = 1; i < pred.size(); ++i) {
    if (pred[i] != pred[0]) {
      constant_pred = false;
      break;
    }
  }
  if (constant_pred) return total;

  Tensor acl;
  for (const auto& col : sensitive_columns) {
    bool constant_col = true;
    for (std::size_t i = 1; i < col.size(); ++i) {
      if (col[i] != col[0]) {
        constant_col = false;
        break;
      }
    }
    if (constant_col) continue;
    Tensor term = abs_(pearson_correlation(y_hat_F, col));
    acl = acl.defined() ? add(acl, term) : term;
  }
  if (!acl.defined()) return total;
  return add(total, weighted(acl, w.lambda_s));
}

Tensor compose_armed(TaskKind kind, const std::vector<double>& y, const Tensor& y_hat_M,
                     const Tensor& y_hat_F, const std::vector<int>& z,
                     const Tensor& z_logits, const Tensor& kl, const LossWeights& w) {
  w.validate();
  if (!y_hat_M.defined()) throw ContractError("compose_armed: missing ME prediction");
  Tensor total = task_loss(kind, y, y_hat_M);
  if (w.lambda_F > 0.0) {
    if (!y_hat_F.defined()) throw ContractError("compose_armed: missing FE prediction");
    total = add(total, weighted(task_loss(kind, y, y_hat_F), w.lambda_F));
  }
  if (w.lambda_g > 0.0) {
    if (!z_logits.defined()) throw ContractError("compose_armed: missing adversary logits");
    total = sub(total, weighted(cce(z, z_logits), w.lambda_g));
  }
  if (w.lambda_K > 0.0) {
    if (!kl.defined()) throw ContractError("compose_armed: missing KL term");
    if (kl.value() < 0.0) {
      throw ContractError("compose_armed: KL must be non-negative, got " +
                          std::to_string(kl.value()));
    }
    total = add(total, weighted(kl, w.lambda_K));
  }
  return total;
}

Tensor compose_fair_medl(TaskKind kind, const std::vector<double>& y,
                         const Tensor& y_hat_M, const Tensor& y_hat_F,
                         const std::vector<int>& z, const Tensor& z_logits,
                         const Tensor& kl, const std::vector<std::vector<int>>& s,
                         const std::vector<Tensor>& s_logits_F,
                         const std::vector<Tensor>& s_logits_M, const LossWeights& w) {
  Tensor total = compose_armed(kind, y, y_hat_M, y_hat_F, z, z_logits, kl, w);
  if (w.lambda_D > 0.0) {
    Tensor adv_F = averaged_cce(s, s_logits_F, "compose_fair_medl");
    Tensor adv_M = averaged_cce(s, s_logits_M, "compose_fair_medl");
    total = sub(total, weighted(mul_scalar(add(adv_F, adv_M), 0.5), w.lambda_D));
  }
  return total;
}

}  // namespace fairmedl
