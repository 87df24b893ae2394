#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "test_util.hpp"
#include "tnpkr/kernels.hpp"
#include "tnpkr/tasks.hpp"

using namespace tnpkr;
using test_util::bitwise_equal;

TEST_CASE("gp1d: lengthscale distribution has mean 0.3") {
  // Distribution-level check on the sampler the generator draws from.
  RngStream r(100);
  double acc = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) acc += r.beta(3.0, 7.0);
  CHECK(std::abs(acc / n - 0.3) < 0.01);

  // Generator wiring: recorded lengthscales follow the same distribution.
  RngStream rg(101);
  Gp1dOptions small;
  small.n_random = 4;
  small.n_grid = 4;
  small.ctx_min = 1;
  small.ctx_max = 4;
  double acc_ep = 0;
  const int n_ep = 300;
  for (int i = 0; i < n_ep; ++i) {
    RngStream re = rg.split(static_cast<uint64_t>(i));
    acc_ep += sample_gp_1d(GpKernelKind::rbf, re, small).gp_ell;
  }
  CHECK(std::abs(acc_ep / n_ep - 0.3) < 0.03);  // sd ~ 0.138, 3.8 sigma of the mean
}

TEST_CASE("gp1d: episode shapes and context bounds") {
  RngStream r(102);
  for (int i = 0; i < 20; ++i) {
    RngStream re = r.split(static_cast<uint64_t>(i));
    auto b = sample_gp_1d(GpKernelKind::rbf, re);
    CHECK(b.n_test() == 150);
    CHECK(b.n_context() >= 3);
    CHECK(b.n_context() <= 50);
    CHECK(b.s_t.size(-1) == 1);
    CHECK(b.latent_truth.defined());
    // Grid tail of the test set is the fixed 100-point lattice.
    CHECK(b.s_t[50] == doctest::Approx(-2.0));
    CHECK(b.s_t[149] == doctest::Approx(2.0));
    // Context points are drawn from the random locations with noisy values.
    for (int64_t c = 0; c < b.n_context(); ++c) {
      bool found = false;
      for (int64_t t = 0; t < 50 && !found; ++t) {
        found = b.s_c[c] == b.s_t[t] && b.f_c[c] == b.f_t[t];
      }
      CHECK(found);
    }
  }
}

TEST_CASE("gp1d: sample covariance matches the kernel within 3 standard errors") {
  RngStream r(103);
  Gp1dOptions opt;
  opt.n_random = 3;
  opt.n_grid = 9;
  opt.ctx_min = 1;
  opt.ctx_max = 3;
  opt.fixed_ell = 0.35;
  const int n = 10000;
  // Two fixed lattice points; indices 3 and 6 of the 9-point grid.
  const int64_t ia = 3 + 3, ib = 3 + 6;
  double sa = 0, sb = 0, sab = 0, saa = 0;
  double d = 0;
  for (int i = 0; i < n; ++i) {
    RngStream re = r.split(static_cast<uint64_t>(i));
    auto b = sample_gp_1d(GpKernelKind::rbf, re, opt);
    const double fa = b.latent_truth[ia], fb = b.latent_truth[ib];
    sa += fa;
    sb += fb;
    sab += fa * fb;
    saa += fa * fa;
    d = std::abs(b.s_t[ia] - b.s_t[ib]);
  }
  const double cov = sab / n - (sa / n) * (sb / n);
  const double var = saa / n - (sa / n) * (sa / n);
  const double want = rbf_kernel(d, 1.0, 0.35);
  const double se_cov = std::sqrt((1.0 + want * want) / n);
  CHECK(std::abs(cov - want) < 3 * se_cov);
  // Marginal variance standardized to one.
  CHECK(std::abs(var - 1.0) < 3 * std::sqrt(2.0 / n));
}

TEST_CASE("gp2d: counts, grid component, context bounds") {
  RngStream r(104);
  auto b = sample_gp_2d(r);
  CHECK(b.n_test() == 384);
  CHECK(b.s_t.size(-1) == 2);
  CHECK(b.n_context() >= 12);
  CHECK(b.n_context() <= 128);
  // Tail is exactly the 16x16 lattice.
  for (int64_t gy = 0; gy < 16; ++gy) {
    for (int64_t gx = 0; gx < 16; ++gx) {
      const int64_t i = 128 + gy * 16 + gx;
      CHECK(b.s_t[i * 2] == doctest::Approx(-2.0 + 4.0 * gx / 15.0));
      CHECK(b.s_t[i * 2 + 1] == doctest::Approx(-2.0 + 4.0 * gy / 15.0));
    }
  }

  Gp2dOptions small;
  small.n_random = 16;
  small.grid_side = 4;
  small.ctx_min = 2;
  small.ctx_max = 8;
  for (int i = 0; i < 300; ++i) {
    RngStream re = r.split(static_cast<uint64_t>(i));
    auto e = sample_gp_2d(re, small);
    CHECK(e.n_context() >= 2);
    CHECK(e.n_context() <= 8);
    CHECK(e.n_test() == 32);
  }
}

TEST_CASE("gp2d: isotropy - equidistant pairs share their covariance") {
  RngStream r(105);
  Gp2dOptions opt;
  opt.n_random = 1;
  opt.grid_side = 3;
  opt.ctx_min = 1;
  opt.ctx_max = 1;
  opt.fixed_ell = 0.5;
  const int n = 8000;
  // Horizontal neighbors (1,2) and vertical neighbors (1,4) of the 3x3 grid.
  const int64_t base = 1;
  double cov_h = 0, cov_v = 0;
  for (int i = 0; i < n; ++i) {
    RngStream re = r.split(static_cast<uint64_t>(i));
    auto b = sample_gp_2d(re, opt);
    const double f0 = b.latent_truth[base + 0];
    const double fh = b.latent_truth[base + 1];
    const double fv = b.latent_truth[base + 3];
    cov_h += f0 * fh;
    cov_v += f0 * fv;
  }
  cov_h /= n;
  cov_v /= n;
  const double se = std::sqrt(2.0 / n);
  CHECK(std::abs(cov_h - cov_v) < 4 * se);
}

TEST_CASE("exact gp: prior with no context") {
  auto s_t = Tensor<double>::from_data({3, 1}, {-1.0, 0.0, 1.0});
  Tensor<double> mu, sigma;
  exact_gp_posterior(Tensor<double>(), Tensor<double>(), s_t, GpKernelKind::rbf, 0.3, 0.0,
                     0.1, mu, sigma);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(mu[i] == 0.0);
    CHECK(sigma[i] == doctest::Approx(std::sqrt(1.01)));
  }
}

TEST_CASE("exact gp: interpolation limit as noise vanishes") {
  RngStream r(106);
  auto s_c = Tensor<double>::from_data({4, 1}, {-1.5, -0.3, 0.4, 1.2});
  auto f_c = Tensor<double>::from_data({4, 1}, {0.7, -0.2, 1.1, 0.05});
  Tensor<double> mu, sigma;
  exact_gp_posterior(s_c, f_c, s_c, GpKernelKind::rbf, 0.4, 0.0, 1e-6, mu, sigma);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(mu[i] == doctest::Approx(f_c[i]).epsilon(1e-4));
    CHECK(sigma[i] < 1e-2);
  }
}

TEST_CASE("exact gp: posterior sd never grows when context is nested") {
  RngStream r(107);
  for (int trial = 0; trial < 10; ++trial) {
    RngStream re = r.split(static_cast<uint64_t>(trial));
    auto s_c = Tensor<double>::uniform({12, 1}, re, -2.0, 2.0);
    auto f_c = Tensor<double>::randn({12, 1}, re);
    auto s_t = Tensor<double>::uniform({20, 1}, re, -2.0, 2.0);
    auto small_s = Tensor<double>::zeros({6, 1});
    auto small_f = Tensor<double>::zeros({6, 1});
    for (int64_t i = 0; i < 6; ++i) {
      small_s[i] = s_c[i];
      small_f[i] = f_c[i];
    }
    Tensor<double> mu_small, sd_small, mu_big, sd_big;
    exact_gp_posterior(small_s, small_f, s_t, GpKernelKind::matern32, 0.5, 0.0, 0.1,
                       mu_small, sd_small);
    exact_gp_posterior(s_c, f_c, s_t, GpKernelKind::matern32, 0.5, 0.0, 0.1, mu_big, sd_big);
    for (int64_t i = 0; i < 20; ++i) {
      CHECK(sd_big[i] <= sd_small[i] + 1e-8);
    }
  }
}

TEST_CASE("sir: parameter distributions match their stated means") {
  RngStream r(108);
  SirOptions tiny;
  tiny.side = 4;
  tiny.horizon = 1;
  double beta_acc = 0, gamma_acc = 0;
  int64_t omega_min = 100, omega_max = -1;
  const int n = 5000;
  for (int i = 0; i < n; ++i) {
    RngStream re = r.split(static_cast<uint64_t>(i));
    auto traj = simulate_sir(re, tiny);
    beta_acc += traj.beta;
    gamma_acc += traj.gamma;
    omega_min = std::min(omega_min, traj.omega);
    omega_max = std::max(omega_max, traj.omega);
  }
  CHECK(std::abs(beta_acc / n - 0.2) < 0.01);   // Beta(2,8) mean
  CHECK(std::abs(gamma_acc / n - 0.1) < 0.01);  // InvGamma(5,0.4) mean: 10-step recovery
  CHECK(omega_min >= 1);
  CHECK(omega_max <= 4);
}

TEST_CASE("sir: classes only ever flow S -> I -> R and population is conserved") {
  RngStream r(109);
  SirOptions opt;
  opt.side = 32;
  opt.horizon = 30;
  auto traj = simulate_sir(r, opt);
  const int64_t cells = opt.side * opt.side;
  for (size_t t = 1; t < traj.states.size(); ++t) {
    CHECK(static_cast<int64_t>(traj.states[t].size()) == cells);
    for (int64_t c = 0; c < cells; ++c) {
      const uint8_t prev = traj.states[t - 1][static_cast<size_t>(c)];
      const uint8_t cur = traj.states[t][static_cast<size_t>(c)];
      CHECK(cur >= prev);        // monotone S(0) -> I(1) -> R(2)
      CHECK(cur - prev <= 1);    // one step at a time
      CHECK(cur <= 2);
    }
  }
}

TEST_CASE("sir: snapshot episode has the image-regime sampling shape") {
  RngStream r(110);
  auto b = sample_sir(r);
  CHECK(b.kind == TaskKind::sir);
  CHECK(b.n_test() == 256);
  CHECK(b.n_context() >= 16);
  CHECK(b.n_context() <= 128);
  CHECK(b.s_t.size(-1) == 2);
  for (int64_t i = 0; i < b.n_test(); ++i) {
    CHECK(b.s_t[i * 2] >= -2.0);
    CHECK(b.s_t[i * 2] <= 2.0);
    const double f = b.f_t[i];
    CHECK((f == 0.0 || f == 1.0 || f == 2.0));
  }
}

TEST_CASE("sir: scaled grids keep per-area context density") {
  RngStream r(111);
  auto b = scale_sir_grid(128, r);
  CHECK(b.n_test() == 256 * 4);
  CHECK(b.n_context() >= 16 * 4);
  CHECK(b.n_context() <= 128 * 4);
  CHECK_THROWS_AS(scale_sir_grid(100, r), ConfigError);
}

TEST_CASE("sir: per-area infection statistics agree across grid sizes") {
  // Same pinned dynamics, centered seed; compare class fractions within a
  // fixed radius of the seed at a fixed step. Boundary effects are negligible
  // at this radius for both sides.
  RngStream r(112);
  const int64_t radius = 12;
  const int64_t step = 10;
  auto run = [&](int64_t side, uint64_t salt) {
    SirOptions opt;
    opt.side = side;
    opt.horizon = step;
    opt.beta = 0.2;
    opt.gamma = 0.1;
    opt.omega = 1;
    opt.center_seed = true;
    double infected_frac = 0;
    const int n = 150;
    for (int i = 0; i < n; ++i) {
      RngStream re = r.split(salt * 100000 + static_cast<uint64_t>(i));
      auto traj = simulate_sir(re, opt);
      const auto& grid = traj.states.back();
      const int64_t cy = side / 2, cx = side / 2;
      int64_t affected = 0, total = 0;
      for (int64_t y = cy - radius; y <= cy + radius; ++y) {
        for (int64_t x = cx - radius; x <= cx + radius; ++x) {
          ++total;
          if (grid[static_cast<size_t>(y * side + x)] != 0) ++affected;
        }
      }
      infected_frac += static_cast<double>(affected) / static_cast<double>(total);
    }
    return infected_frac / n;
  };
  const double frac64 = run(64, 1);
  const double frac128 = run(128, 2);
  CHECK(frac64 > 0.0);
  CHECK(std::abs(frac64 - frac128) < 0.05);
}

TEST_CASE("batch files: round-trip is bitwise, truncation raises, dtype honored") {
  RngStream r(113);
  std::vector<TaskBatch<double>> batches;
  Gp1dOptions small;
  small.n_random = 6;
  small.n_grid = 6;
  small.ctx_min = 2;
  small.ctx_max = 6;
  for (int i = 0; i < 3; ++i) {
    RngStream re = r.split(static_cast<uint64_t>(i));
    batches.push_back(sample_gp_1d(GpKernelKind::matern32, re, small));
  }
  const std::string path = "test_batches.bin";
  save_batches(path, batches);
  auto loaded = load_batches(path);
  REQUIRE(loaded.size() == batches.size());
  for (size_t i = 0; i < batches.size(); ++i) {
    CHECK(loaded[i].kind == batches[i].kind);
    CHECK(bitwise_equal(loaded[i].s_c, batches[i].s_c));
    CHECK(bitwise_equal(loaded[i].f_c, batches[i].f_c));
    CHECK(bitwise_equal(loaded[i].s_t, batches[i].s_t));
    CHECK(bitwise_equal(loaded[i].f_t, batches[i].f_t));
    CHECK(bitwise_equal(loaded[i].latent_truth, batches[i].latent_truth));
    CHECK(loaded[i].context_mask == batches[i].context_mask);
    CHECK(loaded[i].gp_ell == batches[i].gp_ell);
  }

  // Truncated file: no partial batches come back.
  {
    std::ifstream is(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::ofstream os("test_batches_trunc.bin", std::ios::binary);
    os.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
  }
  CHECK_THROWS_AS(load_batches("test_batches_trunc.bin"), DataError);

  // float32 storage loses precision but round-trips as float.
  save_batches("test_batches_f32.bin", batches, true);
  auto f32 = load_batches("test_batches_f32.bin");
  bool any_diff = false;
  for (int64_t i = 0; i < batches[0].f_t.numel(); ++i) {
    CHECK(std::abs(f32[0].f_t[i] - batches[0].f_t[i]) < 1e-6);
    CHECK(f32[0].f_t[i] == static_cast<double>(static_cast<float>(batches[0].f_t[i])));
    any_diff = any_diff || f32[0].f_t[i] != batches[0].f_t[i];
  }
  CHECK(any_diff);
  std::remove(path.c_str());
  std::remove("test_batches_trunc.bin");
  std::remove("test_batches_f32.bin");
}

TEST_CASE("generators: deterministic per seed, independent across splits") {
  RngStream a(7), b(7);
  auto e1 = sample_gp_1d(GpKernelKind::rbf, a);
  auto e2 = sample_gp_1d(GpKernelKind::rbf, b);
  CHECK(bitwise_equal(e1.f_t, e2.f_t));
  CHECK(bitwise_equal(e1.s_c, e2.s_c));

  // First two moments of values from two different streams are uncorrelated.
  RngStream root(8);
  const int n = 3000;
  Gp1dOptions small;
  small.n_random = 2;
  small.n_grid = 2;
  small.ctx_min = 1;
  small.ctx_max = 2;
  double sx = 0, sy = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    RngStream s0 = root.split(2 * static_cast<uint64_t>(i));
    RngStream s1 = root.split(2 * static_cast<uint64_t>(i) + 1);
    const double x = sample_gp_1d(GpKernelKind::rbf, s0, small).latent_truth[0];
    const double y = sample_gp_1d(GpKernelKind::rbf, s1, small).latent_truth[0];
    sx += x;
    sy += y;
    sxy += x * y;
  }
  const double corr = (sxy / n - (sx / n) * (sy / n));
  CHECK(std::abs(corr) < 4.0 / std::sqrt(static_cast<double>(n)));
}
