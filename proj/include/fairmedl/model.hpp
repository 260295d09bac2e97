#pragma once

#include "fairmedl/losses.hpp"
#include "fairmedl/rng.hpp"
#include "fairmedl/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fairmedl {

// Model variants, from plain feed-forward to the full fairness-aware
// mixed-effects stack. Each adds subnetworks on top of the previous ones:
//   base         feature extractor only
//   da           + cluster adversary
//   fair_da      + debias adversary on the main prediction
//   fair_da_acl  cluster adversary + correlation penalty (no debias net)
//   armed        + variational random effects, mixing head, cluster-membership net
//   fair_medl    all of the above plus debias adversaries on both heads
enum class Variant { base, da, fair_da, fair_da_acl, armed, fair_medl };

Variant variant_from_string(const std::string& name);
std::string to_string(Variant variant);

struct ArchConfig {
  std::size_t input_dim = 0;
  std::size_t clusters = 0;                   // seen clusters K
  std::vector<std::size_t> sensitive_widths;  // category count per sensitive variable
  TaskKind task = TaskKind::classification;
  std::vector<std::size_t> fe_widths{32, 32};
  std::vector<std::size_t> adversary_widths{16, 16};
  std::vector<std::size_t> z_widths{32, 32};
  Activation hidden = Activation::relu;
  double prior_var = 1.0;  // variance of the random-effect prior
  std::uint64_t seed = 0;

  std::size_t latent_dim() const { return fe_widths.empty() ? input_dim : fe_widths.back(); }
};

struct NamedParam {
  std::string name;
  Tensor value;
};

// One dense layer; the activation is optional so output heads stay linear.
struct Dense {
  Tensor W, b;
  std::optional<Activation> act;

  Tensor forward(const Tensor& x) const;
  std::size_t param_count() const { return W.size() + b.size(); }
};

Dense make_dense(std::size_t in, std::size_t out, std::optional<Activation> act, Rng& rng);

// Dense trunk: hidden layers with a shared activation.
class MLP {
 public:
  MLP() = default;
  MLP(std::size_t in, const std::vector<std::size_t>& widths, Activation act, Rng& rng);

  Tensor forward(const Tensor& x) const;
  std::size_t out_dim() const { return out_dim_; }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
  std::size_t param_count() const;

 private:
  std::vector<Dense> layers_;
  std::size_t out_dim_ = 0;
};

struct FEOut {
  Tensor latent;  // penultimate representation g [n x h]
  Tensor eta;     // task-head output before the link [n x 1]
  Tensor pred;    // sigmoid(eta) for classification, eta for regression
};

// Per-cluster variational posteriors over a latent slope vector and a scalar
// intercept, with reparameterized sampling.
struct REDraw {
  Tensor slope;      // [n x h]
  Tensor intercept;  // [n x 1]
};

class VariationalREBlock {
 public:
  VariationalREBlock() = default;
  VariationalREBlock(std::size_t clusters, std::size_t latent_dim, double prior_var,
                     Rng& rng);

  REDraw sample(const std::vector<int>& z, Rng& rng) const;  // u = mu + sigma*eps
  REDraw posterior_mean(const std::vector<int>& z) const;    // eval path, u = mu
  REDraw mix(const Tensor& membership) const;  // weights [n x K] over posterior means
  Tensor kl() const;  // scalar KL(q || N(0, prior_var)), summed over clusters

  std::size_t clusters() const { return clusters_; }
  void collect(std::vector<NamedParam>& out) const;
  std::size_t param_count() const;

 private:
  Tensor mu_slope_, logvar_slope_;  // [K x h]
  Tensor mu_int_, logvar_int_;     // [K x 1]
  std::size_t clusters_ = 0;
  double prior_var_ = 1.0;
};

// A full model stack for one variant. Copying shares parameters; training
// code owns one stack per run.
class ModelStack {
 public:
  ModelStack(Variant variant, ArchConfig config);

  Variant variant() const { return variant_; }
  const ArchConfig& config() const { return config_; }

  // subnetwork presence
  bool has_cluster_adversary() const;
  bool has_debias_fe() const;
  bool has_debias_me() const;
  bool has_random_effects() const;
  bool has_z_predictor() const;
  bool uses_acl_penalty() const { return variant_ == Variant::fair_da_acl; }

  // forward paths
  FEOut fe_forward(const Tensor& x) const;
  Tensor me_eta(const Tensor& g, const REDraw& u) const;   // mixing rule
  Tensor me_pred(const Tensor& g, const REDraw& u) const;  // link applied
  REDraw re_sample(const std::vector<int>& z, Rng& rng) const;
  REDraw re_mean(const std::vector<int>& z) const;
  Tensor re_kl() const;
  Tensor cluster_logits(const Tensor& g) const;  // adversary over seen clusters
  std::vector<Tensor> debias_fe_logits(const Tensor& pred, const Tensor& y) const;
  std::vector<Tensor> debias_me_logits(const Tensor& pred, const Tensor& y) const;
  Tensor z_logits(const Tensor& x) const;  // pre-softmax membership logits
  Tensor z_probs(const Tensor& x) const;   // membership simplex [n x K]
  Tensor ood_pred(const Tensor& x) const; // mixed-effects prediction for unseen clusters

  // parameter groups for the alternating optimizers
  std::vector<NamedParam> main_params() const;       // FE head/trunk + RE posteriors
  std::vector<NamedParam> adversary_params() const;  // cluster + debias adversaries
  std::vector<NamedParam> z_params() const;
  std::vector<NamedParam> all_params() const;
  std::size_t param_count() const;

  std::string to_checkpoint_json() const;
  static ModelStack from_checkpoint_json(const std::string& text);

 private:
  Variant variant_;
  ArchConfig config_;
  MLP fe_trunk_;
  Dense fe_head_;
  MLP ac_trunk_;
  Dense ac_head_;
  MLP af_trunk_, am_trunk_;
  std::vector<Dense> af_heads_, am_heads_;
  VariationalREBlock re_;
  MLP z_trunk_;
  Dense z_head_;
};

}  // namespace fairmedl
