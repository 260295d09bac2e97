#include "doctest.h"

#include "fairmedl/losses.hpp"
#include "fairmedl/rng.hpp"
#include "fairmedl/tensor.hpp"

#include <cmath>
#include <vector>

using namespace fairmedl;

TEST_CASE("bce") {
  CHECK(bce({1.0}, Tensor({1}, {0.5})).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce({1.0}, Tensor({1}, {1.0})).value() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(bce({0.0}, Tensor({1}, {0.75})).value() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK_THROWS_AS(bce({1.0, 0.0}, Tensor({1}, {0.5})), ContractError);

  Tensor p({3}, {0.3, 0.6, 0.9});
  double err = finite_difference_check(
      [](const Tensor& t) { return bce({1.0, 0.0, 1.0}, t); }, p, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("cce") {
  Tensor uniform({1, 4}, {0.7, 0.7, 0.7, 0.7});
  CHECK(cce({2}, uniform).value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor confident({1, 3}, {20.0, 0.0, 0.0});
  CHECK(cce({0}, confident).value() < 1e-6);

  Tensor two({1, 2}, {1.0, 0.0});
  CHECK(cce({0}, two).value() ==
        doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));

  CHECK_THROWS_AS(cce({2}, two), ContractError);
  CHECK_THROWS_AS(cce({-1}, two), ContractError);

  Rng rng(3);
  std::vector<double> raw(5 * 3);
  for (auto& v : raw) v = rng.normal();
  Tensor logits({5, 3}, raw);
  double err = finite_difference_check(
      [](const Tensor& t) { return cce({0, 2, 1, 1, 0}, t); }, logits, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("mse") {
  CHECK(mse({1.0, 2.0}, Tensor({2}, {1.0, 2.0})).value() == 0.0);
  CHECK(mse({0.0, 0.0}, Tensor({2}, {1.0, 3.0})).value() == 5.0);
  CHECK(mse({2.0}, Tensor({1}, {-1.0})).value() == 9.0);
  CHECK_THROWS_AS(mse({1.0}, Tensor({2}, {1.0, 2.0})), ContractError);
}

TEST_CASE("kl gaussian closed form") {
  CHECK(kl_gaussian({0.0}, {1.0}, 1.0) == 0.0);
  CHECK(kl_gaussian({1.0}, {1.0}, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(kl_gaussian({0.0}, {4.0}, 1.0) ==
        doctest::Approx(0.5 * (4.0 - std::log(4.0) - 1.0)).epsilon(1e-12));
  // sums over parameters
  CHECK(kl_gaussian({1.0, 0.0}, {1.0, 4.0}, 1.0) ==
        doctest::Approx(0.5 + 0.5 * (4.0 - std::log(4.0) - 1.0)).epsilon(1e-12));
  CHECK_THROWS_AS(kl_gaussian({0.0}, {0.0}, 1.0), ContractError);
  CHECK_THROWS_AS(kl_gaussian({0.0}, {1.0}, 0.0), ContractError);

  SUBCASE("tensor form agrees with scalar form and is differentiable") {
    Tensor mu({3}, {0.4, -1.2, 0.7}, true);
    Tensor logvar({3}, {0.3, -0.5, 0.1}, true);
    double expected = kl_gaussian({0.4, -1.2, 0.7},
                                  {std::exp(0.3), std::exp(-0.5), std::exp(0.1)}, 2.0);
    Tensor kl = kl_gaussian(mu, logvar, 2.0);
    CHECK(kl.value() == doctest::Approx(expected).epsilon(1e-12));
    double err = finite_difference_check(
        [&](const Tensor& m) { return kl_gaussian(m, logvar, 2.0); }, mu, 1e-5);
    CHECK(err < 1e-6);
    err = finite_difference_check(
        [&](const Tensor& lv) { return kl_gaussian(mu, lv, 2.0); }, logvar, 1e-5);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("kl gaussian matches Monte Carlo") {
  Rng rng(derive_seed(99, "klmc"));
  for (int trial = 0; trial < 20; ++trial) {
    const double mu = (trial % 2 == 0 ? 1.0 : -1.0) * rng.uniform(1.0, 2.0);
    const double var_q = rng.log_uniform(0.1, 10.0);
    const double sd_q = std::sqrt(var_q);
    const double closed = kl_gaussian({mu}, {var_q}, 1.0);
    double acc = 0.0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
      const double x = rng.normal(mu, sd_q);
      const double log_q = -0.5 * ((x - mu) * (x - mu) / var_q) - 0.5 * std::log(var_q);
      const double log_p = -0.5 * x * x;
      acc += log_q - log_p;
    }
    const double mc = acc / n;
    CHECK(std::fabs(mc - closed) / closed < 0.01);
  }
}

TEST_CASE("pearson correlation") {
  std::vector<double> a{1.0, 2.0, 3.0};
  CHECK(pearson_value(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson_value(a, {3.0, 2.0, 1.0}) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(pearson_value(a, {1.0, 2.0, 4.0}) == doctest::Approx(0.98198051).epsilon(1e-6));

  SUBCASE("op output is clamped into the open interval") {
    Tensor ta({3}, a);
    const double hi = pearson_correlation(ta, a).value();
    CHECK(hi <= 1.0 - 1e-9);
    CHECK(hi >= 1.0 - 2e-9);
    const double lo = pearson_correlation(ta, {3.0, 2.0, 1.0}).value();
    CHECK(lo >= -1.0 + 1e-9);
    CHECK(lo <= -1.0 + 2e-9);
  }
  SUBCASE("degenerate inputs") {
    Tensor ta({3}, a);
    CHECK_THROWS_AS(pearson_correlation(ta, {2.0, 2.0, 2.0}), DegenerateInputError);
    Tensor flat({3}, {5.0, 5.0, 5.0});
    CHECK_THROWS_AS(pearson_correlation(flat, a), DegenerateInputError);
    CHECK_THROWS_AS(pearson_value({1.0}, {2.0}), ContractError);
  }
  SUBCASE("differentiable in first argument") {
    Rng rng(17);
    std::vector<double> av(8), bv(8);
    for (auto& v : av) v = rng.normal();
    for (auto& v : bv) v = rng.normal();
    Tensor ta({8}, av);
    double err = finite_difference_check(
        [&](const Tensor& t) { return pearson_correlation(t, bv); }, ta, 1e-5);
    CHECK(err < 1e-6);
    err = finite_difference_check(
        [&](const Tensor& t) { return abs_(pearson_correlation(t, bv)); }, ta, 1e-5);
    CHECK(err < 1e-6);
  }
}

namespace {

const std::vector<double> kY{1.0, 0.0};
const std::vector<int> kZ{0, 1};

Tensor prob_head() { return Tensor({2}, {0.5, 0.75}); }
Tensor cluster_logits() { return Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}); }

double hand_bce() { return (std::log(2.0) + std::log(4.0)) / 2.0; }
double hand_cce() { return std::log(1.0 + std::exp(-1.0)); }

}  // namespace

TEST_CASE("compose_da") {
  LossWeights w;
  w.lambda_y = 1.0;
  w.lambda_z = 1.0;
  Tensor loss = compose_da(TaskKind::classification, kY, prob_head(), kZ,
                           cluster_logits(), w);
  CHECK(loss.value() == doctest::Approx(hand_bce() - hand_cce()).epsilon(1e-12));

  SUBCASE("zero adversary weight reduces to the task term") {
    w.lambda_z = 0.0;
    w.lambda_y = 0.7;
    Tensor reduced = compose_da(TaskKind::classification, kY, prob_head(), kZ,
                                Tensor(), w);
    CHECK(reduced.value() == 0.7 * bce(kY, prob_head()).value());
  }
  SUBCASE("missing adversary logits") {
    CHECK_THROWS_AS(
        compose_da(TaskKind::classification, kY, prob_head(), kZ, Tensor(), w),
        ContractError);
  }
  SUBCASE("negative weight") {
    w.lambda_z = -0.5;
    CHECK_THROWS_AS(compose_da(TaskKind::classification, kY, prob_head(), kZ,
                               cluster_logits(), w),
                    ConfigError);
  }
  SUBCASE("regression task") {
    Tensor pred({2}, {1.0, 3.0});
    w = LossWeights{};
    w.lambda_z = 0.0;
    Tensor r = compose_da(TaskKind::regression, {0.0, 0.0}, pred, kZ, Tensor(), w);
    CHECK(r.value() == 5.0);
  }
}

TEST_CASE("compose_fair_da") {
  LossWeights w;
  std::vector<std::vector<int>> s{{0, 1}, {1, 0}};
  std::vector<Tensor> s_logits{Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}),
                               Tensor({2, 3}, {0.0, 2.0, 0.0, 1.0, 0.0, 0.0})};
  Tensor loss = compose_fair_da(TaskKind::classification, kY, prob_head(), kZ,
                                cluster_logits(), s, s_logits, w);
  const double cce_a = cce(s[0], s_logits[0]).value();
  const double cce_b = cce(s[1], s_logits[1]).value();
  const double expected = hand_bce() - hand_cce() - (cce_a + cce_b) / 2.0;
  CHECK(loss.value() == doctest::Approx(expected).epsilon(1e-12));

  SUBCASE("zero sensitive weight reduces to compose_da exactly") {
    w.lambda_s = 0.0;
    Tensor a = compose_fair_da(TaskKind::classification, kY, prob_head(), kZ,
                               cluster_logits(), s, s_logits, w);
    Tensor b = compose_da(TaskKind::classification, kY, prob_head(), kZ,
                          cluster_logits(), w);
    CHECK(a.value() == b.value());
  }
  SUBCASE("per-variable head count must match") {
    CHECK_THROWS_AS(compose_fair_da(TaskKind::classification, kY, prob_head(), kZ,
                                    cluster_logits(), s, {s_logits[0]}, w),
                    ContractError);
  }
}

TEST_CASE("compose_fair_da_acl") {
  LossWeights w;
  SUBCASE("exactly uncorrelated columns contribute nothing") {
    Tensor pred({4}, {0.8, 0.2, 0.8, 0.2});
    std::vector<int> z4{0, 1, 0, 1};
    std::vector<double> y4{1, 0, 1, 0};
    Tensor zl({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
    std::vector<std::vector<double>> cols{{1.0, 1.0, 0.0, 0.0}};
    Tensor with = compose_fair_da_acl(TaskKind::classification, y4, pred, z4, zl, cols, w);
    Tensor base = compose_da(TaskKind::classification, y4, pred, z4, zl, w);
    CHECK(std::fabs(with.value() - base.value()) < 1e-12);
  }
  SUBCASE("perfectly aligned column contributes lambda_s") {
    w.lambda_s = 0.6;
    Tensor pred({2}, {0.2, 0.8});
    std::vector<std::vector<double>> cols{{0.0, 1.0}};
    Tensor with = compose_fair_da_acl(TaskKind::classification, kY, pred, kZ,
                                      cluster_logits(), cols, w);
    Tensor base = compose_da(TaskKind::classification, kY, pred, kZ, cluster_logits(), w);
    CHECK(with.value() - base.value() == doctest::Approx(0.6).epsilon(1e-6));
  }
  SUBCASE("zero weight reduces to compose_da") {
    w.lambda_s = 0.0;
    Tensor pred({2}, {0.2, 0.8});
    std::vector<std::vector<double>> cols{{0.0, 1.0}};
    Tensor a = compose_fair_da_acl(TaskKind::classification, kY, pred, kZ,
                                   cluster_logits(), cols, w);
    Tensor b = compose_da(TaskKind::classification, kY, pred, kZ, cluster_logits(), w);
    CHECK(a.value() == b.value());
  }
  SUBCASE("constant prediction batch contributes zero instead of raising") {
    Tensor pred({2}, {0.5, 0.5});
    std::vector<std::vector<double>> cols{{0.0, 1.0}};
    Tensor with = compose_fair_da_acl(TaskKind::classification, kY, pred, kZ,
                                      cluster_logits(), cols, w);
    Tensor base = compose_da(TaskKind::classification, kY, pred, kZ, cluster_logits(), w);
    CHECK(with.value() == base.value());
  }
}

TEST_CASE("compose_armed") {
  LossWeights w;
  w.lambda_F = 0.5;
  w.lambda_g = 0.25;
  w.lambda_K = 0.1;
  Tensor me({2}, {0.6, 0.4});
  Tensor fe = prob_head();
  Tensor kl = Tensor::scalar(0.8);
  Tensor loss = compose_armed(TaskKind::classification, kY, me, fe, kZ,
                              cluster_logits(), kl, w);
  const double expected = bce(kY, me).value() + 0.5 * hand_bce() - 0.25 * hand_cce() +
                          0.1 * 0.8;
  CHECK(loss.value() == doctest::Approx(expected).epsilon(1e-12));

  SUBCASE("all extra weights zero leaves the ME task term") {
    LossWeights w0;
    w0.lambda_F = w0.lambda_g = w0.lambda_K = 0.0;
    Tensor reduced = compose_armed(TaskKind::classification, kY, me, Tensor(), kZ,
                                   Tensor(), Tensor(), w0);
    CHECK(reduced.value() == bce(kY, me).value());
  }
  SUBCASE("missing ME prediction") {
    CHECK_THROWS_AS(compose_armed(TaskKind::classification, kY, Tensor(), fe, kZ,
                                  cluster_logits(), kl, w),
                    ContractError);
  }
  SUBCASE("negative KL") {
    CHECK_THROWS_AS(compose_armed(TaskKind::classification, kY, me, fe, kZ,
                                  cluster_logits(), Tensor::scalar(-0.1), w),
                    ContractError);
  }
}

TEST_CASE("compose_fair_medl") {
  LossWeights w;
  w.lambda_D = 0.4;
  Tensor me({2}, {0.6, 0.4});
  Tensor fe = prob_head();
  Tensor kl = Tensor::scalar(0.8);
  std::vector<std::vector<int>> s{{0, 1}};
  std::vector<Tensor> sf{Tensor({2, 2}, {0.5, 0.0, 0.0, 0.5})};
  std::vector<Tensor> sm{Tensor({2, 2}, {2.0, 0.0, 1.0, 0.0})};

  Tensor loss = compose_fair_medl(TaskKind::classification, kY, me, fe, kZ,
                                  cluster_logits(), kl, s, sf, sm, w);
  Tensor armed = compose_armed(TaskKind::classification, kY, me, fe, kZ,
                               cluster_logits(), kl, w);
  const double debias = (cce(s[0], sf[0]).value() + cce(s[0], sm[0]).value()) / 2.0;
  CHECK(loss.value() == doctest::Approx(armed.value() - 0.4 * debias).epsilon(1e-12));

  SUBCASE("lambda_D zero equals compose_armed bitwise") {
    w.lambda_D = 0.0;
    Tensor reduced = compose_fair_medl(TaskKind::classification, kY, me, fe, kZ,
                                       cluster_logits(), kl, s, {}, {}, w);
    CHECK(reduced.value() == armed.value());
  }
  SUBCASE("two sensitive variables average their adversary losses") {
    std::vector<std::vector<int>> s2{{0, 1}, {1, 1}};
    std::vector<Tensor> sf2{sf[0], Tensor({2, 3}, {0, 1, 0, 0, 0, 2})};
    std::vector<Tensor> sm2{sm[0], Tensor({2, 3}, {1, 0, 0, 0, 1, 0})};
    Tensor loss2 = compose_fair_medl(TaskKind::classification, kY, me, fe, kZ,
                                     cluster_logits(), kl, s2, sf2, sm2, w);
    const double df = (cce(s2[0], sf2[0]).value() + cce(s2[1], sf2[1]).value()) / 2.0;
    const double dm = (cce(s2[0], sm2[0]).value() + cce(s2[1], sm2[1]).value()) / 2.0;
    CHECK(loss2.value() ==
          doctest::Approx(armed.value() - 0.4 * (df + dm) / 2.0).epsilon(1e-12));
  }
}

TEST_CASE("composed losses pass finite difference checks") {
  Rng rng(derive_seed(5, "composefd"));
  const std::size_t n = 6;
  std::vector<double> y(n);
  std::vector<int> z(n), s1(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = rng.index(2);
    z[i] = static_cast<int>(rng.index(3));
    s1[i] = static_cast<int>(rng.index(2));
  }
  auto rand_vals = [&](std::size_t count) {
    std::vector<double> v(count);
    for (auto& e : v) e = rng.normal(0.0, 0.8);
    return v;
  };
  Tensor raw_fe({n}, rand_vals(n));
  Tensor raw_me({n}, rand_vals(n));
  Tensor zl({n, 3}, rand_vals(n * 3));
  Tensor sl({n, 2}, rand_vals(n * 2));
  Tensor sm({n, 2}, rand_vals(n * 2));
  Tensor mu({4}, rand_vals(4));
  Tensor logvar({4}, rand_vals(4));
  LossWeights w;
  w.lambda_F = 0.7;
  w.lambda_g = 0.3;
  w.lambda_K = 0.2;
  w.lambda_D = 0.5;
  w.lambda_y = 1.0;
  w.lambda_z = 0.4;
  w.lambda_s = 0.6;
  std::vector<std::vector<int>> s{s1};
  std::vector<std::vector<double>> cols{{1, 0, 1, 0, 0, 1}};

  auto fd = [&](auto&& f, const Tensor& at) {
    return finite_difference_check(f, at, 1e-5);
  };

  CHECK(fd([&](const Tensor& t) {
          return compose_da(TaskKind::classification, y, sigmoid(t), z, zl, w);
        },
           raw_fe) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_da(TaskKind::classification, y, sigmoid(raw_fe), z, t, w);
        },
           zl) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_fair_da(TaskKind::classification, y, sigmoid(t), z, zl, s,
                                 {sl}, w);
        },
           raw_fe) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_fair_da(TaskKind::classification, y, sigmoid(raw_fe), z, zl,
                                 s, {t}, w);
        },
           sl) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_fair_da_acl(TaskKind::classification, y, sigmoid(t), z, zl,
                                     cols, w);
        },
           raw_fe) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_armed(TaskKind::classification, y, sigmoid(t),
                               sigmoid(raw_fe), z, zl, kl_gaussian(mu, logvar, 1.0), w);
        },
           raw_me) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_armed(TaskKind::classification, y, sigmoid(raw_me),
                               sigmoid(raw_fe), z, zl, kl_gaussian(t, logvar, 1.0), w);
        },
           mu) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_fair_medl(TaskKind::classification, y, sigmoid(raw_me),
                                   sigmoid(raw_fe), z, zl,
                                   kl_gaussian(mu, logvar, 1.0), s, {t}, {sm}, w);
        },
           sl) < 1e-4);
  CHECK(fd([&](const Tensor& t) {
          return compose_fair_medl(TaskKind::regression, y, t, raw_fe, z, zl,
                                   kl_gaussian(mu, logvar, 1.0), s, {sl}, {sm}, w);
        },
           raw_me) < 1e-4);
}
