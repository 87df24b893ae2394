#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "tnpkr/kernels.hpp"
#include "tnpkr/ops.hpp"
#include "tnpkr/optim.hpp"

using namespace tnpkr;
using test_util::bitwise_equal;
using test_util::max_abs_diff;

TEST_CASE("rbf: zero distance, direct evaluation, parameter errors") {
  CHECK(rbf_kernel(0.0, 1.0, 1.0) == doctest::Approx(1.0));
  CHECK(rbf_kernel(1.0, 1.0, 1.0) == doctest::Approx(std::exp(-0.5)));
  CHECK_THROWS_AS(rbf_kernel(1.0, 1.0, 0.0), ConfigError);
  CHECK_THROWS_AS(rbf_kernel(1.0, 1.0, -2.0), ConfigError);
}

TEST_CASE("rbf: monotone decreasing in distance") {
  double prev = rbf_kernel(0.0, 1.3, 0.7);
  for (int i = 1; i <= 50; ++i) {
    const double d = 5.0 * i / 50.0;
    const double v = rbf_kernel(d, 1.3, 0.7);
    CHECK(v < prev);
    CHECK(v > 0.0);
    prev = v;
  }
}

TEST_CASE("periodic and matern32: unit value at standard points") {
  CHECK(periodic_kernel(0.75, 1.1, 0.75) == doctest::Approx(1.0));  // full period
  CHECK(matern32_kernel(0.0, 0.9) == doctest::Approx(1.0));
  CHECK(matern32_kernel(1.0, std::sqrt(3.0)) == doctest::Approx(2.0 * std::exp(-1.0)));
  CHECK_THROWS_AS(periodic_kernel(1.0, 0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(periodic_kernel(1.0, 1.0, -1.0), ConfigError);
  CHECK_THROWS_AS(matern32_kernel(1.0, 0.0), ConfigError);
}

TEST_CASE("tisa_bias: zero amplitudes and single-basis plug-in") {
  auto dist = Tensor<double>::from_data({2, 2}, {0.0, 1.0, 2.0, 0.5});
  TisaParams<double> p;
  p.a = Tensor<double>::zeros({3}, true);
  p.b = Tensor<double>::ones({3}, true);
  p.c = Tensor<double>::from_data({3}, {0.0, 1.0, 2.0}, true);
  auto out = tisa_bias(dist, p);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0);

  TisaParams<double> one;
  one.a = Tensor<double>::ones({1}, true);
  one.b = Tensor<double>::ones({1}, true);
  one.c = Tensor<double>::zeros({1}, true);
  auto d0 = Tensor<double>::from_data({1, 1}, {0.0});
  CHECK(tisa_bias(d0, one)[0] == doctest::Approx(1.0));
}

TEST_CASE("tisa_bias: gradients w.r.t. a, b, c match finite differences") {
  RngStream r(3);
  auto dist = Tensor<double>::uniform({4, 5}, r, 0.0, 3.0);
  TisaParams<double> p = TisaParams<double>::init(5, r);
  auto w = Tensor<double>::randn({4, 5}, r);

  auto loss_with = [&](const TisaParams<double>& q) {
    return sum(mul(tisa_bias(dist, q), w));
  };

  for (int which = 0; which < 3; ++which) {
    Tensor<double> target = which == 0 ? p.a : (which == 1 ? p.b : p.c);
    auto f = [&](const Tensor<double>& t) {
      TisaParams<double> q = p;
      (which == 0 ? q.a : which == 1 ? q.b : q.c) = t;
      return loss_with(q);
    };
    CHECK(grad_check<double>(f, target, 1e-6) < 1e-5);
  }
}

TEST_CASE("tisa_bias: symmetric distances give a symmetric bias") {
  RngStream r(9);
  auto pts = Tensor<double>::uniform({6, 1}, r, -2.0, 2.0);
  auto dist = pairwise_distance(pts, pts, {});
  TisaParams<double> p = TisaParams<double>::init(5, r);
  auto out = tisa_bias(dist, p);
  for (int64_t i = 0; i < 6; ++i) {
    for (int64_t j = 0; j < 6; ++j) {
      CHECK(out[i * 6 + j] == out[j * 6 + i]);
    }
  }
}

TEST_CASE("combine_bias: zero alpha gives the zero matrix") {
  RngStream r(4);
  auto sq = Tensor<double>::uniform({5, 1}, r, -2.0, 2.0);
  auto sk = Tensor<double>::uniform({7, 1}, r, -2.0, 2.0);
  auto spec = default_tisa_spec<double>(r);
  auto bias = combine_bias(spec, sq, sk);
  CHECK(bias.size(0) == 5);
  CHECK(bias.size(1) == 7);
  for (int64_t i = 0; i < bias.numel(); ++i) CHECK(bias[i] == 0.0);
}

TEST_CASE("combine_bias: single RBF term on shared points is symmetric with unit-peak diagonal") {
  RngStream r(5);
  auto s = Tensor<double>::uniform({6, 1}, r, -2.0, 2.0);
  BiasSpec<double> spec;
  BiasTerm<double> term;
  term.kernel = BiasKernel::rbf;
  term.log_params = Tensor<double>::from_data({2}, {std::log(1.7), std::log(0.8)}, true);
  spec.terms.push_back(term);
  spec.alpha = Tensor<double>::from_data({1}, {0.6}, true);
  auto bias = combine_bias(spec, s, s);
  for (int64_t i = 0; i < 6; ++i) {
    CHECK(bias[i * 6 + i] == doctest::Approx(0.6 * 1.7));
    for (int64_t j = 0; j < 6; ++j) CHECK(bias[i * 6 + j] == bias[j * 6 + i]);
  }
}

TEST_CASE("combine_bias: two component-scoped terms add up") {
  RngStream r(6);
  auto sq = Tensor<double>::uniform({4, 2}, r, -2.0, 2.0);
  auto sk = Tensor<double>::uniform({5, 2}, r, -2.0, 2.0);

  BiasSpec<double> both;
  BiasTerm<double> tx;
  tx.kernel = BiasKernel::rbf;
  tx.components = {0};
  tx.log_params = Tensor<double>::from_data({2}, {0.1, -0.3}, true);
  BiasTerm<double> tt;
  tt.kernel = BiasKernel::matern32;
  tt.components = {1};
  tt.log_params = Tensor<double>::from_data({1}, {0.2}, true);
  both.terms = {tx, tt};
  both.alpha = Tensor<double>::from_data({2}, {0.7, -0.4}, true);

  auto total = combine_bias(both, sq, sk);

  BiasSpec<double> only_x;
  only_x.terms = {tx};
  only_x.alpha = Tensor<double>::from_data({1}, {0.7}, true);
  BiasSpec<double> only_t;
  only_t.terms = {tt};
  only_t.alpha = Tensor<double>::from_data({1}, {-0.4}, true);
  auto sum_parts = add(combine_bias(only_x, sq, sk), combine_bias(only_t, sq, sk));

  CHECK(max_abs_diff(total, sum_parts) < 1e-14);
}

TEST_CASE("combine_bias: selector out of range is a config error") {
  RngStream r(7);
  auto sq = Tensor<double>::uniform({3, 1}, r, -1.0, 1.0);
  BiasSpec<double> spec;
  BiasTerm<double> term;
  term.kernel = BiasKernel::rbf;
  term.components = {1};
  term.log_params = Tensor<double>::zeros({2}, true);
  spec.terms.push_back(term);
  spec.alpha = Tensor<double>::ones({1}, true);
  CHECK_THROWS_AS(combine_bias(spec, sq, sq), ConfigError);
}

TEST_CASE("combine_bias: linear in alpha (doubling alpha doubles the bias)") {
  RngStream r(8);
  auto sq = Tensor<double>::uniform({5, 1}, r, -2.0, 2.0);
  auto sk = Tensor<double>::uniform({6, 1}, r, -2.0, 2.0);
  auto spec = default_tisa_spec<double>(r);
  spec.alpha[0] = 0.37;
  auto b1 = combine_bias(spec, sq, sk);
  spec.alpha[0] = 0.74;
  auto b2 = combine_bias(spec, sq, sk);
  auto b1x2 = scale(b1, 2.0);
  CHECK(bitwise_equal(b2, b1x2));
}

TEST_CASE("combine_bias: gradients flow to alpha and kernel log-params") {
  RngStream r(12);
  auto sq = Tensor<double>::uniform({4, 2}, r, -2.0, 2.0);
  auto sk = Tensor<double>::uniform({5, 2}, r, -2.0, 2.0);
  auto w = Tensor<double>::randn({4, 5}, r);

  BiasTerm<double> term;
  term.kernel = BiasKernel::periodic;
  term.log_params = Tensor<double>::from_data({2}, {-0.2, 0.4}, true);
  BiasSpec<double> spec;
  spec.terms = {term};
  spec.alpha = Tensor<double>::from_data({1}, {0.5}, true);

  auto f_alpha = [&](const Tensor<double>& t) {
    BiasSpec<double> s2 = spec;
    s2.alpha = t;
    return sum(mul(combine_bias(s2, sq, sk), w));
  };
  CHECK(grad_check<double>(f_alpha, spec.alpha, 1e-6) < 1e-6);

  auto f_lp = [&](const Tensor<double>& t) {
    BiasSpec<double> s2 = spec;
    s2.terms[0].log_params = t;
    return sum(mul(combine_bias(s2, sq, sk), w));
  };
  CHECK(grad_check<double>(f_lp, term.log_params, 1e-6) < 1e-6);

  BiasTerm<double> rterm;
  rterm.kernel = BiasKernel::rbf;
  rterm.log_params = Tensor<double>::from_data({2}, {0.3, -0.5}, true);
  BiasTerm<double> mterm;
  mterm.kernel = BiasKernel::matern32;
  mterm.log_params = Tensor<double>::from_data({1}, {0.1}, true);
  for (auto& t0 : {rterm, mterm}) {
    BiasSpec<double> s3;
    s3.terms = {t0};
    s3.alpha = Tensor<double>::from_data({1}, {0.8}, true);
    auto f = [&](const Tensor<double>& t) {
      BiasSpec<double> s4 = s3;
      s4.terms[0].log_params = t;
      return sum(mul(combine_bias(s4, sq, sk), w));
    };
    CHECK(grad_check<double>(f, t0.log_params, 1e-6) < 1e-6);
  }
}

TEST_CASE("translation invariance: shifting both index sets leaves kernels unchanged") {
  RngStream r(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto sq = Tensor<double>::uniform({5, 2}, r, -2.0, 2.0);
    auto sk = Tensor<double>::uniform({6, 2}, r, -2.0, 2.0);
    RngStream rt = r.split(static_cast<uint64_t>(trial));
    auto spec = default_tisa_spec<double>(rt);
    spec.alpha[0] = 1.0;
    const double dx = r.uniform(-10.0, 10.0);
    const double dy = r.uniform(-10.0, 10.0);
    auto sq_shift = sq.detach();
    auto sk_shift = sk.detach();
    for (int64_t i = 0; i < 5; ++i) {
      sq_shift[i * 2] += dx;
      sq_shift[i * 2 + 1] += dy;
    }
    for (int64_t i = 0; i < 6; ++i) {
      sk_shift[i * 2] += dx;
      sk_shift[i * 2 + 1] += dy;
    }
    CHECK(spec.translation_invariant());
    auto b0 = combine_bias(spec, sq, sk);
    auto b1 = combine_bias(spec, sq_shift, sk_shift);
    CHECK(max_abs_diff(b0, b1) < 1e-12);
  }
}

TEST_CASE("all kernel evaluations are finite for finite inputs") {
  RngStream r(14);
  for (int trial = 0; trial < 200; ++trial) {
    const double d = r.uniform(0.0, 50.0);
    CHECK(std::isfinite(rbf_kernel(d, std::exp(r.normal()), std::exp(r.normal()))));
    CHECK(std::isfinite(periodic_kernel(d, std::exp(r.normal()), std::exp(r.normal()))));
    CHECK(std::isfinite(matern32_kernel(d, std::exp(r.normal()))));
  }
}

TEST_CASE("causal_temporal: inclusive boundary and future masking") {
  CHECK(causal_temporal(0.7, 1.0, 1.0) == 0.7);  // equal times pass through
  CHECK(causal_temporal(0.7, 1.0, 0.5) == 0.7);
  CHECK(causal_temporal(0.7, 1.0, 1.5) == neg_inf_sentinel<double>());
}

TEST_CASE("causal_temporal: future keys get exactly zero softmax weight") {
  RngStream r(15);
  for (int ep = 0; ep < 100; ++ep) {
    const int64_t n = 8;
    auto tq = Tensor<double>::uniform({n}, r, 0.0, 1.0);
    auto tk = Tensor<double>::uniform({n}, r, 0.0, 1.0);
    auto scores = Tensor<double>::zeros({n, n});
    for (int64_t i = 0; i < n; ++i) {
      bool any_past = false;
      for (int64_t j = 0; j < n; ++j) {
        const double base = r.normal();
        scores[i * n + j] = causal_temporal(base, tq[i], tk[j]);
        any_past = any_past || tk[j] <= tq[i];
      }
      if (!any_past) scores[i * n + i] = 0.0;  // keep the row alive for softmax
    }
    auto w = softmax_rows(scores);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        if (tk[j] > tq[i] && !(i == j)) {
          CHECK(w[i * n + j] == 0.0);
        }
      }
    }
  }
}
