#include "fairmedl/errors.hpp"
#include "fairmedl/model.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

using namespace fairmedl;

namespace {

Tensor random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.normal();
  return Tensor({n, d}, std::move(v));
}

void set_param(ModelStack& m, const std::string& name, const std::vector<double>& v) {
  for (auto& p : m.all_params()) {
    if (p.name == name) {
      REQUIRE(p.value.size() == v.size());
      std::copy(v.begin(), v.end(), p.value.mutable_values().begin());
      return;
    }
  }
  FAIL("no parameter named ", name);
}

void fill_params(ModelStack& m, const std::string& prefix, double v) {
  for (auto& p : m.all_params()) {
    if (p.name.rfind(prefix, 0) == 0) {
      auto& vals = p.value.mutable_values();
      std::fill(vals.begin(), vals.end(), v);
    }
  }
}

std::vector<double> get_param(const ModelStack& m, const std::string& name) {
  for (const auto& p : m.all_params()) {
    if (p.name == name) return p.value.values();
  }
  FAIL("no parameter named ", name);
  return {};
}

ArchConfig small_config() {
  ArchConfig cfg;
  cfg.input_dim = 7;
  cfg.clusters = 4;
  cfg.sensitive_widths = {2, 3};
  cfg.fe_widths = {8, 5};
  cfg.adversary_widths = {6};
  cfg.z_widths = {6};
  cfg.seed = 3;
  return cfg;
}

REDraw zero_draw(std::size_t n, std::size_t h) {
  return {Tensor({n, h}, std::vector<double>(n * h, 0.0)),
          Tensor({n, 1}, std::vector<double>(n, 0.0))};
}

}  // namespace

TEST_CASE("feature extractor forward: saturation, determinism, width checks") {
  ModelStack m(Variant::base, small_config());
  const Tensor x = random_input(9, 7, 1);

  SUBCASE("all-zero weights and biases output probability one half") {
    fill_params(m, "fe.", 0.0);
    const auto out = m.fe_forward(x);
    for (double p : out.pred.values()) CHECK(p == 0.5);
  }
  SUBCASE("same input twice gives bitwise identical outputs") {
    const auto a = m.fe_forward(x);
    const auto b = m.fe_forward(x);
    CHECK(a.latent.values() == b.latent.values());
    CHECK(a.eta.values() == b.eta.values());
    CHECK(a.pred.values() == b.pred.values());
  }
  SUBCASE("classification predictions live strictly inside (0,1)") {
    const auto out = m.fe_forward(x);
    for (double p : out.pred.values()) {
      CHECK(p > 0.0);
      CHECK(p < 1.0);
    }
  }
  SUBCASE("feature width mismatch is rejected") {
    CHECK_THROWS_AS(m.fe_forward(random_input(4, 6, 1)), ContractError);
  }
  SUBCASE("regression head is the identity link") {
    ArchConfig cfg = small_config();
    cfg.task = TaskKind::regression;
    ModelStack r(Variant::da, cfg);
    const auto out = r.fe_forward(x);
    CHECK(out.pred.values() == out.eta.values());
  }
}

TEST_CASE("mixing rule: identity at zero, saturation, hand-computed value") {
  ArchConfig cfg = small_config();
  ModelStack m(Variant::armed, cfg);
  const Tensor x = random_input(11, 7, 2);
  const auto fe = m.fe_forward(x);
  const std::size_t h = cfg.latent_dim();

  SUBCASE("zero slopes and intercepts reproduce the FE logit") {
    const Tensor eta_m = m.me_eta(fe.latent, zero_draw(11, h));
    REQUIRE(eta_m.size() == fe.eta.size());
    for (std::size_t i = 0; i < eta_m.size(); ++i) {
      CHECK(std::abs(eta_m.values()[i] - fe.eta.values()[i]) <= 1e-12);
    }
  }
  SUBCASE("a +10 intercept saturates the classification output") {
    REDraw u = zero_draw(11, h);
    u.intercept = Tensor({11, 1}, std::vector<double>(11, 10.0));
    const Tensor pred = m.me_pred(fe.latent, u);
    for (double p : pred.values()) CHECK(p > 0.99);
  }
  SUBCASE("two-dimensional hand oracle") {
    ArchConfig tiny;
    tiny.input_dim = 2;
    tiny.clusters = 2;
    tiny.fe_widths = {};  // latent = input
    tiny.seed = 9;
    ModelStack t(Variant::armed, tiny);
    set_param(t, "fe.head.W", {0.5, -1.0});
    set_param(t, "fe.head.b", {0.25});
    const Tensor g({1, 2}, {1.0, 2.0});
    REDraw u{Tensor({1, 2}, {0.1, -0.2}), Tensor({1, 1}, {0.3})};
    // 0.5*(1*1.1) - 1*(2*0.8) + 0.25 + 0.3 = -0.5
    CHECK(t.me_eta(g, u).value() == doctest::Approx(-0.5).epsilon(1e-12));
  }
  SUBCASE("draw shape mismatches are rejected") {
    CHECK_THROWS_AS(m.me_eta(fe.latent, zero_draw(11, h + 1)), ContractError);
    CHECK_THROWS_AS(m.me_eta(fe.latent, zero_draw(10, h)), ContractError);
  }
}

TEST_CASE("variational random effects: sampling statistics and gradients") {
  ArchConfig cfg;
  cfg.input_dim = 4;
  cfg.clusters = 3;
  cfg.fe_widths = {3};
  cfg.seed = 17;
  ModelStack m(Variant::armed, cfg);

  // cluster 0: intercept posterior N(0.7, 0.09), slope posterior N(0.5, 0.04)
  auto mu_int = get_param(m, "re.mu_int");
  auto lv_int = get_param(m, "re.logvar_int");
  mu_int[0] = 0.7;
  lv_int[0] = std::log(0.09);
  set_param(m, "re.mu_int", mu_int);
  set_param(m, "re.logvar_int", lv_int);
  auto mu_slope = get_param(m, "re.mu_slope");
  auto lv_slope = get_param(m, "re.logvar_slope");
  for (int j = 0; j < 3; ++j) {
    mu_slope[j] = 0.5;
    lv_slope[j] = std::log(0.04);
  }
  set_param(m, "re.mu_slope", mu_slope);
  set_param(m, "re.logvar_slope", lv_slope);

  SUBCASE("empirical moments of 1e5 reparameterized draws match the posterior") {
    const std::size_t n = 100000;
    Rng rng(123);
    const REDraw u = m.re_sample(std::vector<int>(n, 0), rng);
    double mean = 0;
    for (double v : u.intercept.values()) mean += v;
    mean /= n;
    double var = 0;
    for (double v : u.intercept.values()) var += (v - mean) * (v - mean);
    var /= n;
    CHECK(std::abs(mean - 0.7) < 0.02 * 0.7);
    CHECK(std::abs(var - 0.09) < 0.02 * 0.09);

    double smean = 0, svar = 0;
    const auto& sv = u.slope.values();
    for (std::size_t i = 0; i < n; ++i) smean += sv[i * 3];  // first latent dim
    smean /= n;
    for (std::size_t i = 0; i < n; ++i) svar += (sv[i * 3] - smean) * (sv[i * 3] - smean);
    svar /= n;
    CHECK(std::abs(smean - 0.5) < 0.02 * 0.5);
    CHECK(std::abs(svar - 0.04) < 0.02 * 0.04);
  }
  SUBCASE("identical generator state reproduces draws bitwise") {
    Rng a(7), b(7);
    const REDraw ua = m.re_sample({0, 1, 2, 0}, a);
    const REDraw ub = m.re_sample({0, 1, 2, 0}, b);
    CHECK(ua.slope.values() == ub.slope.values());
    CHECK(ua.intercept.values() == ub.intercept.values());
  }
  SUBCASE("posterior-mean path is sampling free") {
    const REDraw u = m.re_mean({0, 2});
    CHECK(u.intercept.values()[0] == 0.7);
    CHECK(u.slope.values()[0] == 0.5);
  }
  SUBCASE("gradients reach the posterior parameters through a sample") {
    const Tensor x = random_input(6, 4, 5);
    const auto fe = m.fe_forward(x);
    Rng rng(11);
    const REDraw u = m.re_sample({0, 1, 2, 0, 1, 2}, rng);
    backward(mean(square(m.me_eta(fe.latent, u))));
    bool mu_grad = false, lv_grad = false;
    for (const auto& p : m.all_params()) {
      if (p.name == "re.mu_slope") mu_grad = p.value.has_grad();
      if (p.name == "re.logvar_slope") lv_grad = p.value.has_grad();
    }
    CHECK(mu_grad);
    CHECK(lv_grad);
  }
  SUBCASE("unseen and out-of-range cluster ids are rejected") {
    Rng rng(1);
    CHECK_THROWS_AS(m.re_sample({0, -1}, rng), ContractError);
    CHECK_THROWS_AS(m.re_sample({3}, rng), ContractError);
    CHECK_THROWS_AS(m.re_mean({-1}), ContractError);
  }
  SUBCASE("kl is positive once posteriors drift from the prior") {
    CHECK(m.re_kl().value() > 0.0);
  }
}

TEST_CASE("membership network and out-of-distribution inference") {
  ArchConfig cfg = small_config();
  ModelStack m(Variant::armed, cfg);
  const Tensor x = random_input(13, 7, 4);

  SUBCASE("membership rows form a probability simplex") {
    const Tensor probs = m.z_probs(x);
    REQUIRE(probs.cols() == 4);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      double sum = 0;
      for (std::size_t k = 0; k < 4; ++k) sum += probs.values()[i * 4 + k];
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
  SUBCASE("uniform membership mixes posterior means equally") {
    fill_params(m, "zp.", 0.0);  // all logits zero -> uniform
    const auto mu_slope = get_param(m, "re.mu_slope");
    const auto mu_int = get_param(m, "re.mu_int");
    const std::size_t h = cfg.latent_dim();
    std::vector<double> slope_avg(h, 0.0);
    double int_avg = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t j = 0; j < h; ++j) slope_avg[j] += mu_slope[k * h + j] / 4.0;
      int_avg += mu_int[k] / 4.0;
    }
    std::vector<double> slope_rows, int_rows;
    for (std::size_t i = 0; i < 13; ++i) {
      slope_rows.insert(slope_rows.end(), slope_avg.begin(), slope_avg.end());
      int_rows.push_back(int_avg);
    }
    const auto fe = m.fe_forward(x);
    const Tensor expected = m.me_pred(
        fe.latent, {Tensor({13, h}, slope_rows), Tensor({13, 1}, int_rows)});
    const Tensor got = m.ood_pred(x);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got.values()[i] == doctest::Approx(expected.values()[i]).epsilon(1e-12));
    }
  }
  SUBCASE("one-hot membership reduces to the per-cluster posterior mean") {
    fill_params(m, "zp.", 0.0);
    set_param(m, "zp.head.b", {50.0, 0.0, 0.0, 0.0});  // softmax -> cluster 0
    const auto fe = m.fe_forward(x);
    const Tensor expected = m.me_pred(fe.latent, m.re_mean(std::vector<int>(13, 0)));
    const Tensor got = m.ood_pred(x);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got.values()[i] == doctest::Approx(expected.values()[i]).epsilon(1e-9));
    }
  }
  SUBCASE("random instance matches the explicit weighted-sum oracle") {
    const Tensor probs = m.z_probs(x);
    const auto mu_slope = get_param(m, "re.mu_slope");
    const auto mu_int = get_param(m, "re.mu_int");
    const std::size_t h = cfg.latent_dim();
    std::vector<double> slope(13 * h, 0.0), intercept(13, 0.0);
    for (std::size_t i = 0; i < 13; ++i) {
      for (std::size_t k = 0; k < 4; ++k) {
        const double p = probs.values()[i * 4 + k];
        for (std::size_t j = 0; j < h; ++j) slope[i * h + j] += p * mu_slope[k * h + j];
        intercept[i] += p * mu_int[k];
      }
    }
    const auto fe = m.fe_forward(x);
    const Tensor expected =
        m.me_pred(fe.latent, {Tensor({13, h}, slope), Tensor({13, 1}, intercept)});
    const Tensor got = m.ood_pred(x);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got.values()[i] == doctest::Approx(expected.values()[i]).epsilon(1e-12));
    }
  }
  SUBCASE("ood inference is deterministic") {
    CHECK(m.ood_pred(x).values() == m.ood_pred(x).values());
  }
}

TEST_CASE("variant assembly: subnetwork presence and ablation nesting") {
  const ArchConfig cfg = small_config();

  SUBCASE("presence flags per variant") {
    ModelStack base(Variant::base, cfg);
    CHECK_FALSE(base.has_cluster_adversary());
    CHECK(base.adversary_params().empty());
    CHECK(base.z_params().empty());

    ModelStack da(Variant::da, cfg);
    CHECK(da.has_cluster_adversary());
    CHECK_FALSE(da.has_debias_fe());
    CHECK_FALSE(da.has_random_effects());

    ModelStack fair_da(Variant::fair_da, cfg);
    CHECK(fair_da.has_debias_fe());
    CHECK_FALSE(fair_da.has_debias_me());
    CHECK_FALSE(fair_da.uses_acl_penalty());

    ModelStack acl(Variant::fair_da_acl, cfg);
    CHECK(acl.uses_acl_penalty());
    CHECK_FALSE(acl.has_debias_fe());
    CHECK(acl.has_cluster_adversary());

    ModelStack armed(Variant::armed, cfg);
    CHECK(armed.has_random_effects());
    CHECK(armed.has_z_predictor());
    CHECK_FALSE(armed.has_debias_fe());

    ModelStack full(Variant::fair_medl, cfg);
    CHECK(full.has_cluster_adversary());
    CHECK(full.has_debias_fe());
    CHECK(full.has_debias_me());
    CHECK(full.has_random_effects());
    CHECK(full.has_z_predictor());
  }
  SUBCASE("missing subnetworks raise contract errors when used") {
    ModelStack base(Variant::base, cfg);
    const Tensor x = random_input(3, 7, 1);
    const auto fe = base.fe_forward(x);
    CHECK_THROWS_AS(base.cluster_logits(fe.latent), ContractError);
    CHECK_THROWS_AS(base.z_probs(x), ContractError);
    CHECK_THROWS_AS(base.ood_pred(x), ContractError);
    Rng rng(1);
    CHECK_THROWS_AS(base.re_sample({0}, rng), ContractError);
    ModelStack da(Variant::da, cfg);
    const Tensor y({3, 1}, {1.0, 0.0, 1.0});
    CHECK_THROWS_AS(da.debias_fe_logits(fe.pred, y), ContractError);
    ModelStack fair_da(Variant::fair_da, cfg);
    CHECK_THROWS_AS(fair_da.debias_me_logits(fe.pred, y), ContractError);
  }
  SUBCASE("shared components are bitwise identical across variants of one seed") {
    ModelStack da(Variant::da, cfg);
    ModelStack full(Variant::fair_medl, cfg);
    const Tensor x = random_input(10, 7, 8);
    CHECK(da.fe_forward(x).pred.values() == full.fe_forward(x).pred.values());
    CHECK(da.cluster_logits(da.fe_forward(x).latent).values() ==
          full.cluster_logits(full.fe_forward(x).latent).values());
  }
  SUBCASE("adversary and membership outputs have the configured widths") {
    ModelStack full(Variant::fair_medl, cfg);
    const Tensor x = random_input(5, 7, 2);
    const auto fe = full.fe_forward(x);
    CHECK(full.cluster_logits(fe.latent).cols() == 4);
    const Tensor y({5, 1}, std::vector<double>(5, 1.0));
    const auto heads = full.debias_fe_logits(fe.pred, y);
    REQUIRE(heads.size() == 2);
    CHECK(heads[0].cols() == 2);
    CHECK(heads[1].cols() == 3);
    const auto me_heads = full.debias_me_logits(fe.pred, y);
    CHECK(me_heads.size() == 2);
  }
}

TEST_CASE("parameter counts decompose by subnetwork") {
  const ArchConfig cfg = small_config();
  auto dense = [](std::size_t in, std::size_t out) { return in * out + out; };
  auto mlp = [&](std::size_t in, const std::vector<std::size_t>& widths) {
    std::size_t total = 0;
    for (std::size_t w : widths) {
      total += dense(in, w);
      in = w;
    }
    return total;
  };
  const std::size_t h = cfg.latent_dim();
  const std::size_t fe = mlp(7, cfg.fe_widths) + dense(h, 1);
  const std::size_t ac = mlp(h, cfg.adversary_widths) + dense(6, 4);
  const std::size_t debias = mlp(2, cfg.adversary_widths) + dense(6, 2) + dense(6, 3);
  const std::size_t re = 2 * (4 * h) + 2 * 4;
  const std::size_t zp = mlp(7, cfg.z_widths) + dense(6, 4);

  CHECK(ModelStack(Variant::base, cfg).param_count() == fe);
  CHECK(ModelStack(Variant::da, cfg).param_count() == fe + ac);
  CHECK(ModelStack(Variant::fair_da, cfg).param_count() == fe + ac + debias);
  CHECK(ModelStack(Variant::fair_da_acl, cfg).param_count() == fe + ac);
  CHECK(ModelStack(Variant::armed, cfg).param_count() == fe + ac + re + zp);
  CHECK(ModelStack(Variant::fair_medl, cfg).param_count() ==
        fe + ac + 2 * debias + re + zp);
}

TEST_CASE("model configuration validation") {
  CHECK_THROWS_AS(variant_from_string("nope"), ConfigError);

  ArchConfig cfg = small_config();
  cfg.input_dim = 0;
  CHECK_THROWS_AS(ModelStack(Variant::base, cfg), ConfigError);

  cfg = small_config();
  cfg.clusters = 1;
  CHECK_THROWS_AS(ModelStack(Variant::da, cfg), ConfigError);
  CHECK_NOTHROW(ModelStack(Variant::base, cfg));

  cfg = small_config();
  cfg.sensitive_widths = {};
  CHECK_THROWS_AS(ModelStack(Variant::fair_da, cfg), ConfigError);
  cfg.sensitive_widths = {1};
  CHECK_THROWS_AS(ModelStack(Variant::fair_da, cfg), ConfigError);

  cfg = small_config();
  cfg.prior_var = 0.0;
  CHECK_THROWS_AS(ModelStack(Variant::armed, cfg), ConfigError);

  cfg = small_config();
  cfg.fe_widths = {8, 0};
  CHECK_THROWS_AS(ModelStack(Variant::base, cfg), ConfigError);
}

TEST_CASE("checkpoints round trip bitwise") {
  ArchConfig cfg = small_config();
  cfg.task = TaskKind::classification;
  ModelStack m(Variant::fair_medl, cfg);
  // nudge a few parameters away from their init values
  auto w = get_param(m, "fe.head.W");
  for (auto& v : w) v += 0.937;
  set_param(m, "fe.head.W", w);

  const std::string doc = m.to_checkpoint_json();
  ModelStack back = ModelStack::from_checkpoint_json(doc);

  const auto pa = m.all_params();
  const auto pb = back.all_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].value.values() == pb[i].value.values());
  }
  CHECK(back.to_checkpoint_json() == doc);

  const Tensor x = random_input(6, 7, 10);
  CHECK(m.fe_forward(x).pred.values() == back.fe_forward(x).pred.values());
  CHECK(m.ood_pred(x).values() == back.ood_pred(x).values());

  SUBCASE("missing parameters are rejected") {
    auto j = doc;
    const auto pos = j.find("\"fe.head.b\"");
    REQUIRE(pos != std::string::npos);
    j.replace(pos, 11, "\"fe.head.x\"");
    CHECK_THROWS_AS(ModelStack::from_checkpoint_json(j), ContractError);
  }
}
