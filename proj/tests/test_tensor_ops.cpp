#include <doctest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"
#include "tnpkr/memtrack.hpp"
#include "tnpkr/ops.hpp"
#include "tnpkr/optim.hpp"
#include "tnpkr/parallel.hpp"

using namespace tnpkr;
using test_util::bitwise_equal;
using test_util::max_abs_diff;

namespace {
Tensor<double> randn_d(std::vector<int64_t> shape, uint64_t seed, bool rg = false) {
  RngStream r(seed);
  return Tensor<double>::randn(std::move(shape), r, 1.0, rg);
}
}  // namespace

TEST_CASE("matmul: identity and direct arithmetic") {
  auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto v = Tensor<double>::from_data({2, 1}, {3, 4});
  auto out = matmul(eye, v);
  CHECK(out[0] == doctest::Approx(3));
  CHECK(out[1] == doctest::Approx(4));

  auto row = Tensor<double>::from_data({1, 2}, {1, 2});
  auto prod = matmul(row, v);
  CHECK(prod.numel() == 1);
  CHECK(prod[0] == doctest::Approx(11));
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("matmul: gradient of sum(a@b) w.r.t. a is ones @ b^T") {
  auto a = randn_d({4, 5}, 101, true);
  auto b = randn_d({5, 3}, 102);
  auto out = sum(matmul(a, b));
  out.backward();

  // Analytic route.
  auto expected = matmul(Tensor<double>::ones({4, 3}), transpose_last2(b));
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.grad_data()[i] == doctest::Approx(expected[i]).epsilon(1e-10));
  }

  // Independent finite-difference route, central differences, h = 1e-4.
  auto f = [&](const Tensor<double>& x) { return sum(matmul(x, b)); };
  CHECK(grad_check<double>(f, a, 1e-4) < 1e-6);
}

TEST_CASE("matmul: gradient w.r.t. right operand and batched shapes") {
  auto a = randn_d({2, 3, 4}, 7);
  auto b = randn_d({4, 5}, 8);
  auto f_b = [&](const Tensor<double>& x) { return sum(matmul(a, x)); };
  CHECK(grad_check<double>(f_b, b, 1e-5) < 1e-7);

  auto bb = randn_d({2, 4, 5}, 9);
  auto f_bb = [&](const Tensor<double>& x) { return sum(mul(matmul(a, x), matmul(a, x))); };
  CHECK(grad_check<double>(f_bb, bb, 1e-5) < 1e-6);
}

TEST_CASE("matmul matches the serial reference on random batched cases") {
  RngStream r(55);
  for (int cs = 0; cs < 8; ++cs) {
    const int64_t batch = r.randint(1, 3);
    const int64_t m = r.randint(1, 17);
    const int64_t k = r.randint(1, 13);
    const int64_t n = r.randint(1, 9);
    auto a = Tensor<double>::randn({batch, m, k}, r);
    auto b = Tensor<double>::randn({batch, k, n}, r);
    CHECK(max_abs_diff(matmul(a, b), matmul_reference(a, b)) < 1e-12);
    auto b2 = Tensor<double>::randn({k, n}, r);
    CHECK(max_abs_diff(matmul(a, b2), matmul_reference(a, b2)) < 1e-12);
  }
}

TEST_CASE("parallel and serial paths produce identical results") {
  RngStream r(66);
  auto a = Tensor<float>::randn({8, 40, 24}, r);
  auto b = Tensor<float>::randn({24, 32}, r);
  auto g = Tensor<float>::ones({24});
  auto s = Tensor<float>::zeros({24});

  par::set_enabled(true);
  auto mm_par = matmul(a, b);
  auto ln_par = layer_norm(a, g, s, 1e-5f);
  auto gl_par = gelu(a);
  par::set_enabled(false);
  auto mm_ser = matmul(a, b);
  auto ln_ser = layer_norm(a, g, s, 1e-5f);
  auto gl_ser = gelu(a);
  par::set_enabled(true);

  CHECK(bitwise_equal(mm_par, mm_ser));
  CHECK(bitwise_equal(ln_par, ln_ser));
  CHECK(bitwise_equal(gl_par, gl_ser));
}

TEST_CASE("softmax_rows: symmetry, shift invariance, mask semantics") {
  auto x = Tensor<double>::from_data({1, 2}, {0, 0});
  auto y = softmax_rows(x);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(0.5));

  auto big = Tensor<double>::from_data({1, 2}, {1000, 1000});
  auto yb = softmax_rows(big);
  CHECK(yb[0] == doctest::Approx(0.5));
  CHECK(std::isfinite(yb[0]));

  auto masked = Tensor<double>::from_data({1, 2}, {0, neg_inf_sentinel<double>()});
  auto ym = softmax_rows(masked);
  CHECK(ym[0] == doctest::Approx(1.0));
  CHECK(ym[1] == 0.0);

  auto inf_masked =
      Tensor<double>::from_data({1, 2}, {0, -std::numeric_limits<double>::infinity()});
  auto yi = softmax_rows(inf_masked);
  CHECK(yi[0] == doctest::Approx(1.0));
  CHECK(yi[1] == 0.0);
}

TEST_CASE("softmax_rows: fully masked row raises a data error") {
  auto x = Tensor<double>::full({2, 3}, neg_inf_sentinel<double>());
  CHECK_THROWS_AS(softmax_rows(x), DataError);
}

TEST_CASE("softmax_rows: rows sum to one even at magnitude 1e4") {
  RngStream r(12);
  auto x = Tensor<double>::randn({16, 9}, r, 1e4);
  auto y = softmax_rows(x);
  for (int64_t row = 0; row < 16; ++row) {
    double s = 0;
    for (int64_t j = 0; j < 9; ++j) s += y[row * 9 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax_rows: gradient matches finite differences") {
  auto x = randn_d({3, 5}, 21);
  auto w = randn_d({3, 5}, 22);  // random projection so the scalar sees all outputs
  auto f = [&](const Tensor<double>& t) { return sum(mul(softmax_rows(t), w)); };
  CHECK(grad_check<double>(f, x, 1e-5) < 1e-7);
}

TEST_CASE("layer_norm: constant row maps to shift") {
  auto x = Tensor<double>::full({1, 3}, 4.2);
  auto g = Tensor<double>::ones({3});
  auto s = Tensor<double>::zeros({3});
  auto y = layer_norm(x, g, s, 1e-5);
  for (int64_t i = 0; i < 3; ++i) CHECK(std::abs(y[i]) < 1e-9);
}

TEST_CASE("layer_norm: already-normalized row is unchanged as eps -> 0") {
  auto x = Tensor<double>::from_data({1, 2}, {1, -1});
  auto g = Tensor<double>::ones({2});
  auto s = Tensor<double>::zeros({2});
  auto y = layer_norm(x, g, s, 1e-12);
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("layer_norm: output statistics on a random row") {
  auto x = randn_d({1, 8}, 31);
  auto g = Tensor<double>::ones({8});
  auto s = Tensor<double>::zeros({8});
  auto y = layer_norm(x, g, s, 1e-8);
  double m = 0, v = 0;
  for (int64_t i = 0; i < 8; ++i) m += y[i];
  m /= 8;
  for (int64_t i = 0; i < 8; ++i) v += (y[i] - m) * (y[i] - m);
  v /= 8;
  CHECK(std::abs(m) < 1e-6);
  CHECK(std::abs(v - 1.0) < 1e-4);
}

TEST_CASE("layer_norm: gradients w.r.t. input, gain, shift") {
  auto x = randn_d({4, 6}, 41);
  auto g = randn_d({6}, 42);
  auto s = randn_d({6}, 43);
  auto w = randn_d({4, 6}, 44);
  auto fx = [&](const Tensor<double>& t) { return sum(mul(layer_norm(t, g, s, 1e-5), w)); };
  CHECK(grad_check<double>(fx, x, 1e-5) < 1e-6);
  auto fg = [&](const Tensor<double>& t) { return sum(mul(layer_norm(x, t, s, 1e-5), w)); };
  CHECK(grad_check<double>(fg, g, 1e-5) < 1e-6);
  auto fs = [&](const Tensor<double>& t) { return sum(mul(layer_norm(x, g, t, 1e-5), w)); };
  CHECK(grad_check<double>(fs, s, 1e-5) < 1e-6);
}

TEST_CASE("softplus(0) = ln 2") {
  auto x = Tensor<double>::scalar(0.0);
  CHECK(softplus_op(x)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("dropout: p=0 and eval mode are exact identities") {
  RngStream r(3);
  auto x = randn_d({5, 5}, 77);
  auto y0 = dropout(x, 0.0, true, r);
  CHECK(bitwise_equal(x, y0));
  auto ye = dropout(x, 0.5, false, r);
  CHECK(bitwise_equal(x, ye));
}

TEST_CASE("dropout: surviving entries scale by 1/(1-p)") {
  RngStream r(4);
  auto x = Tensor<double>::ones({2000});
  auto y = dropout(x, 0.25, true, r);
  int64_t kept = 0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    const bool zero = y[i] == 0.0;
    const bool scaled = std::abs(y[i] - 1.0 / 0.75) < 1e-12;
    CHECK((zero || scaled));
    kept += scaled ? 1 : 0;
  }
  CHECK(kept > 1300);
  CHECK(kept < 1650);
}

TEST_CASE("dropout: p outside [0,1) is a config error") {
  RngStream r(5);
  auto x = Tensor<double>::ones({4});
  CHECK_THROWS_AS(dropout(x, 1.0, true, r), ConfigError);
  CHECK_THROWS_AS(dropout(x, -0.1, true, r), ConfigError);
}

TEST_CASE("elementwise and reduction gradients match finite differences") {
  auto x = randn_d({3, 4}, 91);
  auto w = randn_d({3, 4}, 92);
  auto cases = std::vector<std::function<Tensor<double>(const Tensor<double>&)>>{
      [&](const Tensor<double>& t) { return sum(mul(gelu(t), w)); },
      [&](const Tensor<double>& t) { return sum(mul(softplus_op(t), w)); },
      [&](const Tensor<double>& t) { return sum(mul(exp_op(scale(t, 0.3)), w)); },
      [&](const Tensor<double>& t) { return sum(mul(square(t), w)); },
      [&](const Tensor<double>& t) { return mean(mul(t, t)); },
      [&](const Tensor<double>& t) { return sum(div(w, add_scalar(square(t), 1.0))); },
      [&](const Tensor<double>& t) { return sum(mul(transpose_last2(t), transpose_last2(w))); },
      [&](const Tensor<double>& t) { return sum(mul_bcast_last(t, sum_last(t))); },
      [&](const Tensor<double>& t) { return sum(square(concat_last<double>({t, w}))); },
      [&](const Tensor<double>& t) { return sum(square(slice_last(t, 1, 2))); },
  };
  for (auto& f : cases) CHECK(grad_check<double>(f, x, 1e-5) < 1e-6);

  auto v = randn_d({4}, 93);
  auto fv = [&](const Tensor<double>& t) { return sum(square(add_rowvec(w, t))); };
  CHECK(grad_check<double>(fv, v, 1e-5) < 1e-6);
}

TEST_CASE("log and sqrt gradients on positive inputs") {
  RngStream r(94);
  auto x = Tensor<double>::uniform({6}, r, 0.5, 3.0);
  auto fl = [&](const Tensor<double>& t) { return sum(log_op(t)); };
  CHECK(grad_check<double>(fl, x, 1e-6) < 1e-6);
  auto fs = [&](const Tensor<double>& t) { return sum(sqrt_op(t)); };
  CHECK(grad_check<double>(fs, x, 1e-6) < 1e-6);
}

TEST_CASE("cross_entropy: uniform logits give ln k and bad labels throw") {
  auto logits = Tensor<double>::zeros({2, 3});
  auto loss = cross_entropy(logits, {0, 2});
  CHECK(loss[0] == doctest::Approx(std::log(3.0)).epsilon(1e-10));
  CHECK_THROWS_AS(cross_entropy(logits, {0, 3}), DataError);

  auto lg = randn_d({4, 3}, 95);
  auto f = [&](const Tensor<double>& t) { return cross_entropy(t, {0, 1, 2, 1}); };
  CHECK(grad_check<double>(f, lg, 1e-5) < 1e-7);
}

TEST_CASE("masked_mean_rows: pooling respects the mask and empty groups") {
  auto x = Tensor<double>::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  std::vector<uint8_t> mask = {1, 1, 0, 0};
  auto y = masked_mean_rows(x, mask);
  CHECK(y[0] == doctest::Approx(2.0));
  CHECK(y[1] == doctest::Approx(3.0));
  CHECK(y[2] == 0.0);
  CHECK(y[3] == 0.0);

  auto xr = randn_d({2, 3, 4}, 96);
  std::vector<uint8_t> m2 = {1, 0, 1, 1, 1, 0};
  auto f = [&](const Tensor<double>& t) { return sum(square(masked_mean_rows(t, m2))); };
  CHECK(grad_check<double>(f, xr, 1e-5) < 1e-6);
}

TEST_CASE("memtrack: tensor buffers are accounted and budget trips") {
  memtrack::Scope scope;
  {
    auto t = Tensor<float>::zeros({1024});
    CHECK(scope.peak_over_entry() >= 1024 * sizeof(float));
  }
  const auto before = memtrack::live_bytes();
  memtrack::set_budget(before + 1000);
  CHECK_THROWS_AS(Tensor<float>::zeros({100000}), OomError);
  memtrack::set_budget(0);
}
