#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "tnpkr/ops.hpp"
#include "tnpkr/optim.hpp"

using namespace tnpkr;
using test_util::bitwise_equal;

TEST_CASE("yogi: zero gradient and zero state leave params unchanged") {
  ParamMap<double> params;
  auto p = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5}, true);
  p.ensure_grad();
  params["w"] = p;
  Yogi<double> opt;
  opt.step(params, 1e-3);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);
  CHECK(p[2] == 0.5);
}

TEST_CASE("yogi: second moment increases when g^2 exceeds v") {
  ParamMap<double> params;
  auto p = Tensor<double>::from_data({2}, {0.0, 0.0}, true);
  p.ensure_grad();
  p.grad_data()[0] = 2.0;
  p.grad_data()[1] = -3.0;
  params["w"] = p;
  Yogi<double> opt;
  opt.step(params, 1e-3);
  const auto& v = opt.slots().at("w").v;
  CHECK(v[0] > 0.0);
  CHECK(v[1] > 0.0);
  CHECK(v[0] == doctest::Approx((1 - 0.999) * 4.0));
  CHECK(v[1] == doctest::Approx((1 - 0.999) * 9.0));
}

TEST_CASE("yogi: v stays nonnegative under alternating gradients") {
  ParamMap<double> params;
  auto p = Tensor<double>::scalar(0.0, true);
  p.ensure_grad();
  params["w"] = p;
  Yogi<double> opt;
  RngStream r(17);
  for (int t = 0; t < 200; ++t) {
    p.zero_grad();
    p.grad_data()[0] = r.normal() * (t % 7 == 0 ? 10.0 : 0.01);
    opt.step(params, 1e-3);
    CHECK(opt.slots().at("w").v[0] >= 0.0);
  }
  CHECK(opt.step_count() == 200);
}

TEST_CASE("yogi: three hand-stepped updates on a scalar match the recurrence") {
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-3, lr = 0.01;
  const double grads[3] = {0.5, -1.25, 2.0};

  // Transcript computed directly from the update equations.
  double m = 0.0, v = 0.0, w = 1.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    const double g2 = g * g;
    const double sign = v > g2 ? 1.0 : (v < g2 ? -1.0 : 0.0);
    v = v - (1 - beta2) * sign * g2;
    m = beta1 * m + (1 - beta1) * g;
    const double mh = m / (1 - std::pow(beta1, t));
    const double vh = v / (1 - std::pow(beta2, t));
    w = w - lr * mh / (std::sqrt(vh) + eps);
  }

  ParamMap<double> params;
  auto p = Tensor<double>::scalar(1.0, true);
  p.ensure_grad();
  params["w"] = p;
  Yogi<double> opt(YogiConfig<double>{beta1, beta2, eps});
  for (int t = 0; t < 3; ++t) {
    p.zero_grad();
    p.grad_data()[0] = grads[t];
    opt.step(params, lr);
  }
  CHECK(p[0] == doctest::Approx(w).epsilon(1e-7));
}

TEST_CASE("yogi: non-finite gradient raises an error naming the parameter") {
  ParamMap<double> params;
  auto p = Tensor<double>::scalar(0.0, true);
  p.ensure_grad();
  p.grad_data()[0] = std::numeric_limits<double>::quiet_NaN();
  params["encoder.w"] = p;
  Yogi<double> opt;
  try {
    opt.step(params, 1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("encoder.w") != std::string::npos);
  }
}

TEST_CASE("yogi: identical seeds and inputs are bitwise deterministic") {
  auto run = [](uint64_t seed) {
    RngStream r(seed);
    ParamMap<float> params;
    auto p = Tensor<float>::randn({16}, r, 1.0f, true);
    params["w"] = p;
    Yogi<float> opt;
    RngStream g = r.split("grads");
    for (int t = 0; t < 50; ++t) {
      p.zero_grad();
      p.ensure_grad();
      for (int64_t i = 0; i < p.numel(); ++i) p.grad_data()[i] = static_cast<float>(g.normal());
      opt.step(params, 1e-3f);
    }
    return p;
  };
  CHECK(bitwise_equal(run(5), run(5)));
}

TEST_CASE("cosine_lr: endpoints and midpoint") {
  CHECK(cosine_lr<double>(0, 100, 1e-3, 1e-6) == doctest::Approx(1e-3));
  CHECK(cosine_lr<double>(100, 100, 1e-3, 1e-6) == doctest::Approx(1e-6));
  CHECK(cosine_lr<double>(50, 100, 1e-3, 1e-6) == doctest::Approx((1e-3 + 1e-6) / 2));
  CHECK(cosine_lr<double>(250, 100, 1e-3, 1e-6) == doctest::Approx(1e-6));  // clamp
}

TEST_CASE("clip_grad_norm: scales when above, identity when below") {
  ParamMap<double> params;
  auto p = Tensor<double>::from_data({2}, {0.0, 0.0}, true);
  p.ensure_grad();
  // Gradient [3, 4] has norm 5 -> scaled by 3/5.
  p.grad_data()[0] = 3.0;
  p.grad_data()[1] = 4.0;
  params["w"] = p;
  const double norm = clip_grad_norm(params, 3.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.grad_data()[0] == doctest::Approx(1.8));
  CHECK(p.grad_data()[1] == doctest::Approx(2.4));

  p.grad_data()[0] = 0.6;
  p.grad_data()[1] = 0.8;
  clip_grad_norm(params, 3.0);
  CHECK(p.grad_data()[0] == doctest::Approx(0.6));
  CHECK(p.grad_data()[1] == doctest::Approx(0.8));
}

TEST_CASE("clip_grad_norm: post-clip norm <= 3 over 100 random draws, never increased") {
  RngStream r(23);
  for (int t = 0; t < 100; ++t) {
    ParamMap<double> params;
    auto a = Tensor<double>::randn({7}, r, std::exp(r.normal()), true);
    auto b = Tensor<double>::randn({3, 2}, r, std::exp(r.normal()), true);
    for (auto* p : {&a, &b}) {
      p->ensure_grad();
      for (int64_t i = 0; i < p->numel(); ++i) p->grad_data()[i] = (*p)[i];
    }
    params["a"] = a;
    params["b"] = b;
    const double before = clip_grad_norm(params, 3.0);
    double sq = 0;
    for (auto& [k, p] : params) {
      (void)k;
      for (int64_t i = 0; i < p.numel(); ++i) sq += p.grad_data()[i] * p.grad_data()[i];
    }
    const double after = std::sqrt(sq);
    CHECK(after <= 3.0 + 1e-6);
    CHECK(after <= before + 1e-12);
  }
}

TEST_CASE("grad_check: analytic gradient of sum(x^2)") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0});
  auto f = [](const Tensor<double>& t) { return sum(square(t)); };

  auto xa = x.detach();
  xa.set_requires_grad(true);
  auto y = f(xa);
  y.backward();
  CHECK(xa.grad_data()[0] == doctest::Approx(2.0));
  CHECK(xa.grad_data()[1] == doctest::Approx(4.0));

  CHECK(grad_check<double>(f, x, 1e-5) < 1e-6);
}

TEST_CASE("grad_check: non-finite value raises an oracle error") {
  auto x = Tensor<double>::scalar(-1.0);
  auto f = [](const Tensor<double>& t) { return log_op(t); };
  CHECK_THROWS_AS(grad_check<double>(f, x, 1e-5), NumericError);
}
