#include "fairmedl/model.hpp"

#include "fairmedl/errors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <utility>

namespace fairmedl {

using nlohmann::json;

Variant variant_from_string(const std::string& name) {
  if (name == "base") return Variant::base;
  if (name == "da") return Variant::da;
  if (name == "fair_da") return Variant::fair_da;
  if (name == "fair_da_acl") return Variant::fair_da_acl;
  if (name == "armed") return Variant::armed;
  if (name == "fair_medl") return Variant::fair_medl;
  throw ConfigError("unknown model variant: " + name);
}

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::base: return "base";
    case Variant::da: return "da";
    case Variant::fair_da: return "fair_da";
    case Variant::fair_da_acl: return "fair_da_acl";
    case Variant::armed: return "armed";
    case Variant::fair_medl: return "fair_medl";
  }
  throw ConfigError("unknown model variant");
}

// ---- dense layers -----------------------------------------------------------

Dense make_dense(std::size_t in, std::size_t out, std::optional<Activation> act,
                 Rng& rng) {
  if (in == 0 || out == 0) throw ConfigError("dense layer dimensions must be >= 1");
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-a, a);
  Dense d;
  d.W = Tensor({in, out}, std::move(w), true);
  d.b = Tensor({out}, std::vector<double>(out, 0.0), true);
  d.act = act;
  return d;
}

Tensor Dense::forward(const Tensor& x) const {
  Tensor h = add_rowvec(matmul(x, W), b);
  return act ? activation(h, *act) : h;
}

MLP::MLP(std::size_t in, const std::vector<std::size_t>& widths, Activation act,
         Rng& rng) {
  std::size_t prev = in;
  for (std::size_t w : widths) {
    layers_.push_back(make_dense(prev, w, act, rng));
    prev = w;
  }
  out_dim_ = prev;
}

Tensor MLP::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& layer : layers_) h = layer.forward(h);
  return h;
}

void MLP::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string base = prefix + ".h" + std::to_string(i);
    out.push_back({base + ".W", layers_[i].W});
    out.push_back({base + ".b", layers_[i].b});
  }
}

std::size_t MLP::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.param_count();
  return n;
}

// ---- variational random effects ------------------------------------------------

VariationalREBlock::VariationalREBlock(std::size_t clusters, std::size_t latent_dim,
                                       double prior_var, Rng& rng)
    : clusters_(clusters), prior_var_(prior_var) {
  if (clusters == 0 || latent_dim == 0) {
    throw ConfigError("random-effect block needs clusters >= 1 and latent dim >= 1");
  }
  if (prior_var <= 0.0) throw ConfigError("random-effect prior variance must be > 0");
  auto init_mu = [&](std::size_t rows, std::size_t cols) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.normal(0.0, 0.1);
    return Tensor({rows, cols}, std::move(v), true);
  };
  // posteriors start tight around small means so early samples stay mild
  mu_slope_ = init_mu(clusters, latent_dim);
  logvar_slope_ =
      Tensor({clusters, latent_dim}, std::vector<double>(clusters * latent_dim, -2.0), true);
  mu_int_ = init_mu(clusters, 1);
  logvar_int_ = Tensor({clusters, 1}, std::vector<double>(clusters, -2.0), true);
}

namespace {

void check_cluster_ids(const std::vector<int>& z, std::size_t clusters) {
  for (int id : z) {
    if (id < 0) {
      throw ContractError(
          "cluster id -1 has no posterior; unseen clusters go through the "
          "membership-weighted path");
    }
    if (static_cast<std::size_t>(id) >= clusters) {
      throw ContractError("cluster id " + std::to_string(id) + " out of range (K=" +
                          std::to_string(clusters) + ")");
    }
  }
}

}  // namespace

REDraw VariationalREBlock::sample(const std::vector<int>& z, Rng& rng) const {
  check_cluster_ids(z, clusters_);
  const std::size_t n = z.size();
  const std::size_t h = mu_slope_.cols();
  std::vector<double> eps_s(n * h), eps_i(n);
  for (auto& v : eps_s) v = rng.normal();
  for (auto& v : eps_i) v = rng.normal();
  const Tensor noise_s({n, h}, std::move(eps_s));
  const Tensor noise_i({n, 1}, std::move(eps_i));
  REDraw u;
  u.slope = add(gather_rows(mu_slope_, z),
                mul(exp_(mul_scalar(gather_rows(logvar_slope_, z), 0.5)), noise_s));
  u.intercept = add(gather_rows(mu_int_, z),
                    mul(exp_(mul_scalar(gather_rows(logvar_int_, z), 0.5)), noise_i));
  return u;
}

REDraw VariationalREBlock::posterior_mean(const std::vector<int>& z) const {
  check_cluster_ids(z, clusters_);
  return {gather_rows(mu_slope_, z), gather_rows(mu_int_, z)};
}

REDraw VariationalREBlock::mix(const Tensor& membership) const {
  if (membership.cols() != clusters_) {
    throw ContractError("membership width " + std::to_string(membership.cols()) +
                        " != cluster count " + std::to_string(clusters_));
  }
  return {matmul(membership, mu_slope_), matmul(membership, mu_int_)};
}

Tensor VariationalREBlock::kl() const {
  return add(kl_gaussian(mu_slope_, logvar_slope_, prior_var_),
             kl_gaussian(mu_int_, logvar_int_, prior_var_));
}

void VariationalREBlock::collect(std::vector<NamedParam>& out) const {
  out.push_back({"re.mu_slope", mu_slope_});
  out.push_back({"re.logvar_slope", logvar_slope_});
  out.push_back({"re.mu_int", mu_int_});
  out.push_back({"re.logvar_int", logvar_int_});
}

std::size_t VariationalREBlock::param_count() const {
  return mu_slope_.size() + logvar_slope_.size() + mu_int_.size() + logvar_int_.size();
}

// ---- model stack ----------------------------------------------------------------

bool ModelStack::has_cluster_adversary() const { return variant_ != Variant::base; }
bool ModelStack::has_debias_fe() const {
  return variant_ == Variant::fair_da || variant_ == Variant::fair_medl;
}
bool ModelStack::has_debias_me() const { return variant_ == Variant::fair_medl; }
bool ModelStack::has_random_effects() const {
  return variant_ == Variant::armed || variant_ == Variant::fair_medl;
}
bool ModelStack::has_z_predictor() const {
  return variant_ == Variant::armed || variant_ == Variant::fair_medl;
}

ModelStack::ModelStack(Variant variant, ArchConfig config)
    : variant_(variant), config_(std::move(config)) {
  if (config_.input_dim == 0) throw ConfigError("model needs input_dim >= 1");
  for (std::size_t w : config_.fe_widths) {
    if (w == 0) throw ConfigError("hidden widths must be >= 1");
  }

  Rng fe_rng(derive_seed(config_.seed, "init/fe"));
  fe_trunk_ = MLP(config_.input_dim, config_.fe_widths, config_.hidden, fe_rng);
  fe_head_ = make_dense(fe_trunk_.out_dim(), 1, std::nullopt, fe_rng);

  if (has_cluster_adversary() || has_z_predictor()) {
    if (config_.clusters < 2) {
      throw ConfigError("variant " + to_string(variant_) + " needs clusters >= 2");
    }
  }
  if (has_cluster_adversary()) {
    Rng rng(derive_seed(config_.seed, "init/ac"));
    ac_trunk_ = MLP(fe_trunk_.out_dim(), config_.adversary_widths, config_.hidden, rng);
    ac_head_ = make_dense(ac_trunk_.out_dim(), config_.clusters, std::nullopt, rng);
  }
  if (has_debias_fe() || has_debias_me()) {
    if (config_.sensitive_widths.empty()) {
      throw ConfigError("variant " + to_string(variant_) +
                        " needs at least one sensitive variable");
    }
    for (std::size_t w : config_.sensitive_widths) {
      if (w < 2) throw ConfigError("sensitive variables need >= 2 categories");
    }
  }
  auto build_debias = [&](const char* stream, MLP& trunk, std::vector<Dense>& heads) {
    Rng rng(derive_seed(config_.seed, stream));
    trunk = MLP(2, config_.adversary_widths, config_.hidden, rng);
    for (std::size_t w : config_.sensitive_widths) {
      heads.push_back(make_dense(trunk.out_dim(), w, std::nullopt, rng));
    }
  };
  if (has_debias_fe()) build_debias("init/af", af_trunk_, af_heads_);
  if (has_debias_me()) build_debias("init/am", am_trunk_, am_heads_);
  if (has_random_effects()) {
    Rng rng(derive_seed(config_.seed, "init/re"));
    re_ = VariationalREBlock(config_.clusters, fe_trunk_.out_dim(), config_.prior_var,
                             rng);
  }
  if (has_z_predictor()) {
    Rng rng(derive_seed(config_.seed, "init/zp"));
    z_trunk_ = MLP(config_.input_dim, config_.z_widths, config_.hidden, rng);
    z_head_ = make_dense(z_trunk_.out_dim(), config_.clusters, std::nullopt, rng);
  }
}

FEOut ModelStack::fe_forward(const Tensor& x) const {
  if (x.cols() != config_.input_dim) {
    throw ContractError("input width " + std::to_string(x.cols()) +
                        " != configured " + std::to_string(config_.input_dim));
  }
  FEOut out;
  out.latent = fe_trunk_.forward(x);
  out.eta = fe_head_.forward(out.latent);
  out.pred = config_.task == TaskKind::classification ? sigmoid(out.eta) : out.eta;
  return out;
}

Tensor ModelStack::me_eta(const Tensor& g, const REDraw& u) const {
  if (g.cols() != fe_trunk_.out_dim()) {
    throw ContractError("latent width " + std::to_string(g.cols()) + " != " +
                        std::to_string(fe_trunk_.out_dim()));
  }
  if (u.slope.shape() != g.shape() || u.intercept.rows() != g.rows()) {
    throw ContractError("random-effect draw does not match the latent batch");
  }
  Tensor scaled = mul(g, add_scalar(u.slope, 1.0));
  return add(fe_head_.forward(scaled), u.intercept);
}

Tensor ModelStack::me_pred(const Tensor& g, const REDraw& u) const {
  Tensor eta = me_eta(g, u);
  return config_.task == TaskKind::classification ? sigmoid(eta) : eta;
}

REDraw ModelStack::re_sample(const std::vector<int>& z, Rng& rng) const {
  if (!has_random_effects()) {
    throw ContractError("variant " + to_string(variant_) + " has no random effects");
  }
  return re_.sample(z, rng);
}

REDraw ModelStack::re_mean(const std::vector<int>& z) const {
  if (!has_random_effects()) {
    throw ContractError("variant " + to_string(variant_) + " has no random effects");
  }
  return re_.posterior_mean(z);
}

Tensor ModelStack::re_kl() const {
  if (!has_random_effects()) {
    throw ContractError("variant " + to_string(variant_) + " has no random effects");
  }
  return re_.kl();
}

Tensor ModelStack::cluster_logits(const Tensor& g) const {
  if (!has_cluster_adversary()) {
    throw ContractError("variant " + to_string(variant_) + " has no cluster adversary");
  }
  return ac_head_.forward(ac_trunk_.forward(g));
}

namespace {

std::vector<Tensor> debias_forward(const MLP& trunk, const std::vector<Dense>& heads,
                                   const Tensor& pred, const Tensor& y) {
  const Tensor input = concat_cols(pred, y);
  const Tensor h = trunk.forward(input);
  std::vector<Tensor> out;
  out.reserve(heads.size());
  for (const auto& head : heads) out.push_back(head.forward(h));
  return out;
}

}  // namespace

std::vector<Tensor> ModelStack::debias_fe_logits(const Tensor& pred,
                                                 const Tensor& y) const {
  if (!has_debias_fe()) {
    throw ContractError("variant " + to_string(variant_) + " has no debias adversary");
  }
  return debias_forward(af_trunk_, af_heads_, pred, y);
}

std::vector<Tensor> ModelStack::debias_me_logits(const Tensor& pred,
                                                 const Tensor& y) const {
  if (!has_debias_me()) {
    throw ContractError("variant " + to_string(variant_) +
                        " has no mixed-effects debias adversary");
  }
  return debias_forward(am_trunk_, am_heads_, pred, y);
}

Tensor ModelStack::z_logits(const Tensor& x) const {
  if (!has_z_predictor()) {
    throw ContractError("variant " + to_string(variant_) + " has no membership network");
  }
  return z_head_.forward(z_trunk_.forward(x));
}

Tensor ModelStack::z_probs(const Tensor& x) const { return softmax_rows(z_logits(x)); }

Tensor ModelStack::ood_pred(const Tensor& x) const {
  const Tensor membership = z_probs(x);  // throws when the variant lacks the network
  const REDraw u = re_.mix(membership);
  const FEOut fe = fe_forward(x);
  return me_pred(fe.latent, u);
}

std::vector<NamedParam> ModelStack::main_params() const {
  std::vector<NamedParam> out;
  fe_trunk_.collect("fe", out);
  out.push_back({"fe.head.W", fe_head_.W});
  out.push_back({"fe.head.b", fe_head_.b});
  if (has_random_effects()) re_.collect(out);
  return out;
}

std::vector<NamedParam> ModelStack::adversary_params() const {
  std::vector<NamedParam> out;
  if (has_cluster_adversary()) {
    ac_trunk_.collect("ac", out);
    out.push_back({"ac.head.W", ac_head_.W});
    out.push_back({"ac.head.b", ac_head_.b});
  }
  auto collect_debias = [&](const char* prefix, const MLP& trunk,
                            const std::vector<Dense>& heads) {
    trunk.collect(prefix, out);
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const std::string base = std::string(prefix) + ".head" + std::to_string(i);
      out.push_back({base + ".W", heads[i].W});
      out.push_back({base + ".b", heads[i].b});
    }
  };
  if (has_debias_fe()) collect_debias("af", af_trunk_, af_heads_);
  if (has_debias_me()) collect_debias("am", am_trunk_, am_heads_);
  return out;
}

std::vector<NamedParam> ModelStack::z_params() const {
  std::vector<NamedParam> out;
  if (has_z_predictor()) {
    z_trunk_.collect("zp", out);
    out.push_back({"zp.head.W", z_head_.W});
    out.push_back({"zp.head.b", z_head_.b});
  }
  return out;
}

std::vector<NamedParam> ModelStack::all_params() const {
  auto out = main_params();
  for (auto& p : adversary_params()) out.push_back(std::move(p));
  for (auto& p : z_params()) out.push_back(std::move(p));
  return out;
}

std::size_t ModelStack::param_count() const {
  std::size_t n = 0;
  for (const auto& p : all_params()) n += p.value.size();
  return n;
}

// ---- checkpointing -----------------------------------------------------------------

std::string ModelStack::to_checkpoint_json() const {
  json j;
  j["variant"] = to_string(variant_);
  j["config"] = {
      {"input_dim", config_.input_dim},
      {"clusters", config_.clusters},
      {"sensitive_widths", config_.sensitive_widths},
      {"task", to_string(config_.task)},
      {"fe_widths", config_.fe_widths},
      {"adversary_widths", config_.adversary_widths},
      {"z_widths", config_.z_widths},
      {"hidden", to_string(config_.hidden)},
      {"prior_var", config_.prior_var},
      {"seed", config_.seed},
  };
  json params = json::object();
  for (const auto& p : all_params()) params[p.name] = p.value.values();
  j["params"] = std::move(params);
  return j.dump(2);
}

ModelStack ModelStack::from_checkpoint_json(const std::string& text) {
  const json j = json::parse(text);
  const json& jc = j.at("config");
  ArchConfig cfg;
  cfg.input_dim = jc.at("input_dim").get<std::size_t>();
  cfg.clusters = jc.at("clusters").get<std::size_t>();
  cfg.sensitive_widths = jc.at("sensitive_widths").get<std::vector<std::size_t>>();
  cfg.task = task_kind_from_string(jc.at("task").get<std::string>());
  cfg.fe_widths = jc.at("fe_widths").get<std::vector<std::size_t>>();
  cfg.adversary_widths = jc.at("adversary_widths").get<std::vector<std::size_t>>();
  cfg.z_widths = jc.at("z_widths").get<std::vector<std::size_t>>();
  cfg.hidden = activation_from_string(jc.at("hidden").get<std::string>());
  cfg.prior_var = jc.at("prior_var").get<double>();
  cfg.seed = jc.at("seed").get<std::uint64_t>();

  ModelStack stack(variant_from_string(j.at("variant").get<std::string>()), cfg);
  const json& params = j.at("params");
  std::size_t restored = 0;
  for (auto& p : stack.all_params()) {
    if (!params.contains(p.name)) {
      throw ContractError("checkpoint is missing parameter " + p.name);
    }
    const auto values = params.at(p.name).get<std::vector<double>>();
    if (values.size() != p.value.size()) {
      throw ContractError("checkpoint parameter " + p.name + " has " +
                          std::to_string(values.size()) + " values, expected " +
                          std::to_string(p.value.size()));
    }
    std::copy(values.begin(), values.end(), p.value.mutable_values().begin());
    ++restored;
  }
  if (restored != params.size()) {
    throw ContractError("checkpoint contains " + std::to_string(params.size()) +
                        " parameters, model has " + std::to_string(restored));
  }
  return stack;
}

}  // namespace fairmedl
