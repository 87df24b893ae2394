#include "tnpkr/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "tnpkr/kernels.hpp"
#include "tnpkr/ops.hpp"

namespace tnpkr {

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "gp1d_rbf") return TaskKind::gp1d_rbf;
  if (name == "gp1d_periodic") return TaskKind::gp1d_periodic;
  if (name == "gp1d_matern32") return TaskKind::gp1d_matern32;
  if (name == "gp2d_rbf") return TaskKind::gp2d_rbf;
  if (name == "sir") return TaskKind::sir;
  throw ConfigError("unknown task '" + name + "'");
}

std::string task_kind_to_string(TaskKind k) {
  switch (k) {
    case TaskKind::gp1d_rbf: return "gp1d_rbf";
    case TaskKind::gp1d_periodic: return "gp1d_periodic";
    case TaskKind::gp1d_matern32: return "gp1d_matern32";
    case TaskKind::gp2d_rbf: return "gp2d_rbf";
    case TaskKind::sir: return "sir";
  }
  return "?";
}

bool task_is_categorical(TaskKind k) { return k == TaskKind::sir; }

int64_t task_index_dims(TaskKind k) {
  return (k == TaskKind::gp2d_rbf || k == TaskKind::sir) ? 2 : 1;
}

namespace {

double gp_kernel_value(GpKernelKind kind, double d, double ell, double period) {
  switch (kind) {
    case GpKernelKind::rbf: return rbf_kernel(d, 1.0, ell);
    case GpKernelKind::periodic: return periodic_kernel(d, ell, period);
    case GpKernelKind::matern32: return matern32_kernel(d, ell);
  }
  return 0;
}

// In-place lower Cholesky; false when the matrix is not positive definite.
bool cholesky_inplace(std::vector<double>& a, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j <= i; ++j) {
      double s = a[static_cast<size_t>(i * n + j)];
      for (int64_t k = 0; k < j; ++k) {
        s -= a[static_cast<size_t>(i * n + k)] * a[static_cast<size_t>(j * n + k)];
      }
      if (i == j) {
        if (s <= 0) return false;
        a[static_cast<size_t>(i * n + j)] = std::sqrt(s);
      } else {
        a[static_cast<size_t>(i * n + j)] = s / a[static_cast<size_t>(j * n + j)];
      }
    }
    for (int64_t j = i + 1; j < n; ++j) a[static_cast<size_t>(i * n + j)] = 0;
  }
  return true;
}

std::vector<double> build_covariance(const double* pts, int64_t n, int64_t ds,
                                     GpKernelKind kind, double ell, double period) {
  std::vector<double> k(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j <= i; ++j) {
      double sq = 0;
      for (int64_t c = 0; c < ds; ++c) {
        const double diff = pts[i * ds + c] - pts[j * ds + c];
        sq += diff * diff;
      }
      const double v = gp_kernel_value(kind, std::sqrt(sq), ell, period);
      k[static_cast<size_t>(i * n + j)] = v;
      k[static_cast<size_t>(j * n + i)] = v;
    }
  }
  return k;
}

// Cholesky with jitter 1e-6 escalating once to 1e-4.
std::vector<double> stabilized_cholesky(std::vector<double> k, int64_t n) {
  for (double jitter : {1e-6, 1e-4}) {
    std::vector<double> a = k;
    for (int64_t i = 0; i < n; ++i) a[static_cast<size_t>(i * n + i)] += jitter;
    if (cholesky_inplace(a, n)) return a;
  }
  throw DataError("gp generator: covariance not positive definite after jitter escalation");
}

TaskBatch<double> finish_gp_episode(TaskKind task, GpKernelKind kernel, double ell,
                                    double period, double sigma_n,
                                    std::vector<double> pts, int64_t n_random, int64_t ds,
                                    int64_t ctx_min, int64_t ctx_max, RngStream& rng) {
  const int64_t n = static_cast<int64_t>(pts.size()) / ds;
  auto cov = build_covariance(pts.data(), n, ds, kernel, ell, period);
  auto chol = stabilized_cholesky(std::move(cov), n);

  std::vector<double> z(static_cast<size_t>(n));
  for (auto& v : z) v = rng.normal();
  std::vector<double> latent(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t j = 0; j <= i; ++j) s += chol[static_cast<size_t>(i * n + j)] * z[static_cast<size_t>(j)];
    latent[static_cast<size_t>(i)] = s;
  }
  std::vector<double> noisy(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) noisy[static_cast<size_t>(i)] = latent[static_cast<size_t>(i)] + sigma_n * rng.normal();

  const int64_t n_c = rng.randint(ctx_min, ctx_max);
  auto ctx_idx = rng.sample_without_replacement(n_random, n_c);

  TaskBatch<double> b;
  b.kind = task;
  b.gp_kernel = kernel;
  b.gp_ell = ell;
  b.gp_period = period;
  b.gp_sigma_n = sigma_n;
  b.s_c = Tensor<double>::zeros({n_c, ds});
  b.f_c = Tensor<double>::zeros({n_c, 1});
  for (int64_t i = 0; i < n_c; ++i) {
    const int64_t src = ctx_idx[static_cast<size_t>(i)];
    for (int64_t c = 0; c < ds; ++c) b.s_c[i * ds + c] = pts[static_cast<size_t>(src * ds + c)];
    b.f_c[i] = noisy[static_cast<size_t>(src)];
  }
  b.s_t = Tensor<double>::zeros({n, ds});
  b.f_t = Tensor<double>::zeros({n, 1});
  b.latent_truth = Tensor<double>::zeros({n, 1});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < ds; ++c) b.s_t[i * ds + c] = pts[static_cast<size_t>(i * ds + c)];
    b.f_t[i] = noisy[static_cast<size_t>(i)];
    b.latent_truth[i] = latent[static_cast<size_t>(i)];
  }
  b.context_mask.assign(static_cast<size_t>(n_c), 1);
  return b;
}

}  // namespace

TaskBatch<double> sample_gp_1d(GpKernelKind kernel, RngStream& rng, const Gp1dOptions& opt) {
  const double ell = opt.fixed_ell ? *opt.fixed_ell : rng.beta(3.0, 7.0);
  double period = 0.0;
  if (kernel == GpKernelKind::periodic) {
    period = opt.fixed_period ? *opt.fixed_period : rng.uniform(0.5, 2.0);
  }

  const int64_t n = opt.n_random + opt.n_grid;
  std::vector<double> pts(static_cast<size_t>(n));
  for (int64_t i = 0; i < opt.n_random; ++i) pts[static_cast<size_t>(i)] = rng.uniform(opt.lo, opt.hi);
  for (int64_t i = 0; i < opt.n_grid; ++i) {
    pts[static_cast<size_t>(opt.n_random + i)] =
        opt.lo + (opt.hi - opt.lo) * static_cast<double>(i) / static_cast<double>(opt.n_grid - 1);
  }
  const TaskKind task = kernel == GpKernelKind::rbf ? TaskKind::gp1d_rbf
                        : kernel == GpKernelKind::periodic ? TaskKind::gp1d_periodic
                                                           : TaskKind::gp1d_matern32;
  return finish_gp_episode(task, kernel, ell, period, opt.sigma_n, std::move(pts),
                           opt.n_random, 1, opt.ctx_min, opt.ctx_max, rng);
}

TaskBatch<double> sample_gp_2d(RngStream& rng, const Gp2dOptions& opt) {
  const double ell = opt.fixed_ell ? *opt.fixed_ell : rng.beta(3.0, 7.0);
  const int64_t n_grid = opt.grid_side * opt.grid_side;
  const int64_t n = opt.n_random + n_grid;
  std::vector<double> pts(static_cast<size_t>(n * 2));
  for (int64_t i = 0; i < opt.n_random; ++i) {
    pts[static_cast<size_t>(i * 2)] = rng.uniform(opt.lo, opt.hi);
    pts[static_cast<size_t>(i * 2 + 1)] = rng.uniform(opt.lo, opt.hi);
  }
  for (int64_t gy = 0; gy < opt.grid_side; ++gy) {
    for (int64_t gx = 0; gx < opt.grid_side; ++gx) {
      const int64_t i = opt.n_random + gy * opt.grid_side + gx;
      pts[static_cast<size_t>(i * 2)] =
          opt.lo + (opt.hi - opt.lo) * static_cast<double>(gx) / static_cast<double>(opt.grid_side - 1);
      pts[static_cast<size_t>(i * 2 + 1)] =
          opt.lo + (opt.hi - opt.lo) * static_cast<double>(gy) / static_cast<double>(opt.grid_side - 1);
    }
  }
  return finish_gp_episode(TaskKind::gp2d_rbf, GpKernelKind::rbf, ell, 0.0, opt.sigma_n,
                           std::move(pts), opt.n_random, 2, opt.ctx_min, opt.ctx_max, rng);
}

void exact_gp_posterior(const Tensor<double>& s_c, const Tensor<double>& f_c,
                        const Tensor<double>& s_t, GpKernelKind kernel, double ell,
                        double period, double sigma_n, Tensor<double>& mu,
                        Tensor<double>& sigma) {
  const int64_t n_t = s_t.size(0);
  const int64_t ds = s_t.size(-1);
  const int64_t n_c = s_c.defined() ? s_c.size(0) : 0;
  mu = Tensor<double>::zeros({n_t});
  sigma = Tensor<double>::zeros({n_t});
  const double prior_var = gp_kernel_value(kernel, 0.0, ell, period);
  if (n_c == 0) {
    for (int64_t i = 0; i < n_t; ++i) {
      sigma[i] = std::sqrt(prior_var + sigma_n * sigma_n);
    }
    return;
  }

  auto kcc = build_covariance(s_c.data(), n_c, ds, kernel, ell, period);
  for (int64_t i = 0; i < n_c; ++i) kcc[static_cast<size_t>(i * n_c + i)] += sigma_n * sigma_n;
  std::vector<double> chol;
  {
    bool ok = false;
    for (double jitter : {1e-10, 1e-6, 1e-4}) {
      chol = kcc;
      for (int64_t i = 0; i < n_c; ++i) chol[static_cast<size_t>(i * n_c + i)] += jitter;
      if (cholesky_inplace(chol, n_c)) {
        ok = true;
        break;
      }
    }
    if (!ok) throw NumericError("exact_gp_posterior: covariance not positive definite");
  }

  // alpha = (Kcc + s^2 I)^{-1} f_c via two triangular solves.
  std::vector<double> alpha(static_cast<size_t>(n_c));
  for (int64_t i = 0; i < n_c; ++i) alpha[static_cast<size_t>(i)] = f_c[i];
  for (int64_t i = 0; i < n_c; ++i) {
    double s = alpha[static_cast<size_t>(i)];
    for (int64_t j = 0; j < i; ++j) s -= chol[static_cast<size_t>(i * n_c + j)] * alpha[static_cast<size_t>(j)];
    alpha[static_cast<size_t>(i)] = s / chol[static_cast<size_t>(i * n_c + i)];
  }
  for (int64_t i = n_c - 1; i >= 0; --i) {
    double s = alpha[static_cast<size_t>(i)];
    for (int64_t j = i + 1; j < n_c; ++j) s -= chol[static_cast<size_t>(j * n_c + i)] * alpha[static_cast<size_t>(j)];
    alpha[static_cast<size_t>(i)] = s / chol[static_cast<size_t>(i * n_c + i)];
  }

  std::vector<double> ktc(static_cast<size_t>(n_c));
  std::vector<double> w(static_cast<size_t>(n_c));
  for (int64_t t = 0; t < n_t; ++t) {
    for (int64_t i = 0; i < n_c; ++i) {
      double sq = 0;
      for (int64_t c = 0; c < ds; ++c) {
        const double diff = s_t[t * ds + c] - s_c[i * ds + c];
        sq += diff * diff;
      }
      ktc[static_cast<size_t>(i)] = gp_kernel_value(kernel, std::sqrt(sq), ell, period);
    }
    double m = 0;
    for (int64_t i = 0; i < n_c; ++i) m += ktc[static_cast<size_t>(i)] * alpha[static_cast<size_t>(i)];
    mu[t] = m;
    // w = L^{-1} k_tc
    for (int64_t i = 0; i < n_c; ++i) {
      double s = ktc[static_cast<size_t>(i)];
      for (int64_t j = 0; j < i; ++j) s -= chol[static_cast<size_t>(i * n_c + j)] * w[static_cast<size_t>(j)];
      w[static_cast<size_t>(i)] = s / chol[static_cast<size_t>(i * n_c + i)];
    }
    double reduction = 0;
    for (int64_t i = 0; i < n_c; ++i) reduction += w[static_cast<size_t>(i)] * w[static_cast<size_t>(i)];
    double var = prior_var - reduction + sigma_n * sigma_n;
    if (var < 1e-12) var = 1e-12;
    sigma[t] = std::sqrt(var);
  }
}

// ---------------------------------------------------------------------------
// Spatial SIR

SirTrajectory simulate_sir(RngStream& rng, const SirOptions& opt) {
  SirTrajectory traj;
  traj.side = opt.side;
  traj.beta = opt.beta ? *opt.beta : rng.beta(2.0, 8.0);
  if (opt.gamma) {
    traj.gamma = *opt.gamma;
  } else {
    do {
      traj.gamma = rng.inv_gamma(5.0, 0.4);
    } while (traj.gamma >= 1.0);
  }
  traj.omega = opt.omega ? *opt.omega : rng.randint(1, 4);

  const int64_t side = opt.side;
  const int64_t cells = side * side;
  std::vector<uint8_t> state(static_cast<size_t>(cells), 0);
  if (opt.center_seed) {
    state[static_cast<size_t>((side / 2) * side + side / 2)] = 1;
  } else {
    auto seeds = rng.sample_without_replacement(cells, traj.omega);
    for (int64_t s : seeds) state[static_cast<size_t>(s)] = 1;
  }
  traj.states.push_back(state);

  // Transmission probability falls off as beta * exp(-d^2 / (2*ell)); beyond
  // the cutoff radius the contribution is numerically negligible.
  const double ell = opt.decay_lengthscale;
  const int64_t radius = static_cast<int64_t>(std::ceil(std::sqrt(2.0 * ell * 40.0)));
  std::vector<int64_t> infected;
  std::vector<uint8_t> next(state.size());
  for (int64_t step = 0; step < opt.horizon; ++step) {
    infected.clear();
    for (int64_t i = 0; i < cells; ++i) {
      if (state[static_cast<size_t>(i)] == 1) infected.push_back(i);
    }
    if (infected.empty()) break;
    next = state;
    for (int64_t src : infected) {
      const int64_t sy = src / side, sx = src % side;
      const int64_t y0 = std::max<int64_t>(0, sy - radius), y1 = std::min(side - 1, sy + radius);
      const int64_t x0 = std::max<int64_t>(0, sx - radius), x1 = std::min(side - 1, sx + radius);
      for (int64_t y = y0; y <= y1; ++y) {
        for (int64_t x = x0; x <= x1; ++x) {
          const int64_t dst = y * side + x;
          if (state[static_cast<size_t>(dst)] != 0 || next[static_cast<size_t>(dst)] != 0) continue;
          const double dy = static_cast<double>(y - sy), dx = static_cast<double>(x - sx);
          const double d2 = dx * dx + dy * dy;
          const double p = traj.beta * std::exp(-d2 / (2.0 * ell));
          if (rng.uniform() < p) next[static_cast<size_t>(dst)] = 1;
        }
      }
      if (rng.uniform() < traj.gamma) next[static_cast<size_t>(src)] = 2;
    }
    state = next;
    traj.states.push_back(state);
  }
  return traj;
}

TaskBatch<double> sample_sir(RngStream& rng, const SirOptions& opt) {
  SirTrajectory traj = simulate_sir(rng, opt);
  // Snapshot a uniformly chosen step with active infections.
  std::vector<int64_t> active;
  for (size_t t = 0; t < traj.states.size(); ++t) {
    for (uint8_t c : traj.states[t]) {
      if (c == 1) {
        active.push_back(static_cast<int64_t>(t));
        break;
      }
    }
  }
  if (active.empty()) throw DataError("sample_sir: no active timestep to snapshot");
  int64_t snap;
  if (opt.snapshot_step) {
    snap = std::min<int64_t>(*opt.snapshot_step, static_cast<int64_t>(traj.states.size()) - 1);
  } else {
    snap = active[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(active.size()) - 1))];
  }
  const auto& grid = traj.states[static_cast<size_t>(snap)];

  const int64_t side = opt.side;
  const int64_t area_scale = (side / 64) * (side / 64) > 0 ? (side / 64) * (side / 64) : 1;
  const int64_t n_t = opt.test_points * area_scale;
  const int64_t cells = side * side;
  if (n_t > cells) throw ConfigError("sample_sir: more test points than cells");
  auto test_idx = rng.sample_without_replacement(cells, n_t);
  const int64_t n_c = rng.randint(opt.ctx_min * area_scale, opt.ctx_max * area_scale);
  auto ctx_of_test = rng.sample_without_replacement(n_t, n_c);

  const auto coord = [&](int64_t cell, int64_t axis) {
    const int64_t v = axis == 0 ? cell % side : cell / side;
    return -2.0 + 4.0 * (static_cast<double>(v) + 0.5) / static_cast<double>(side);
  };

  TaskBatch<double> b;
  b.kind = TaskKind::sir;
  b.s_t = Tensor<double>::zeros({n_t, 2});
  b.f_t = Tensor<double>::zeros({n_t, 1});
  for (int64_t i = 0; i < n_t; ++i) {
    const int64_t cell = test_idx[static_cast<size_t>(i)];
    b.s_t[i * 2] = coord(cell, 0);
    b.s_t[i * 2 + 1] = coord(cell, 1);
    b.f_t[i] = static_cast<double>(grid[static_cast<size_t>(cell)]);
  }
  b.s_c = Tensor<double>::zeros({n_c, 2});
  b.f_c = Tensor<double>::zeros({n_c, 1});
  for (int64_t i = 0; i < n_c; ++i) {
    const int64_t t = ctx_of_test[static_cast<size_t>(i)];
    b.s_c[i * 2] = b.s_t[t * 2];
    b.s_c[i * 2 + 1] = b.s_t[t * 2 + 1];
    b.f_c[i] = b.f_t[t];
  }
  b.context_mask.assign(static_cast<size_t>(n_c), 1);
  return b;
}

TaskBatch<double> scale_sir_grid(int64_t side, RngStream& rng) {
  if (side % 64 != 0) throw ConfigError("scale_sir_grid: side must be a multiple of 64");
  SirOptions opt;
  opt.side = side;
  return sample_sir(rng, opt);
}

// ---------------------------------------------------------------------------
// Batch serialization

namespace {

constexpr char kMagic[8] = {'T', 'N', 'P', 'K', 'R', 'B', 'A', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("batch file: truncated while reading");
  return v;
}

void write_array(std::ofstream& os, const Tensor<double>& t, bool as_f32) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(t.dim()));
  for (int64_t i = 0; i < t.dim(); ++i) write_pod<uint64_t>(os, static_cast<uint64_t>(t.size(i)));
  if (as_f32) {
    for (int64_t i = 0; i < t.numel(); ++i) write_pod<float>(os, static_cast<float>(t[i]));
  } else {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  }
}

Tensor<double> read_array(std::ifstream& is, bool as_f32) {
  const uint32_t nd = read_pod<uint32_t>(is);
  if (nd > 8) throw DataError("batch file: corrupt array rank");
  std::vector<int64_t> shape(nd);
  for (uint32_t i = 0; i < nd; ++i) shape[i] = static_cast<int64_t>(read_pod<uint64_t>(is));
  Tensor<double> t = Tensor<double>::zeros(shape);
  if (as_f32) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(read_pod<float>(is));
  } else {
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
    if (!is) throw DataError("batch file: truncated while reading array");
  }
  return t;
}

}  // namespace

void save_batches(const std::string& path, const std::vector<TaskBatch<double>>& batches,
                  bool as_float32) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_batches: cannot open '" + path + "'");
  os.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(os, kVersion);
  write_pod<uint8_t>(os, as_float32 ? 1 : 0);
  write_pod<uint64_t>(os, static_cast<uint64_t>(batches.size()));
  for (const auto& b : batches) {
    write_array(os, b.s_c, as_float32);
    write_array(os, b.f_c, as_float32);
    write_pod<uint64_t>(os, static_cast<uint64_t>(b.context_mask.size()));
    os.write(reinterpret_cast<const char*>(b.context_mask.data()),
             static_cast<std::streamsize>(b.context_mask.size()));
    write_array(os, b.s_t, as_float32);
    write_array(os, b.f_t, as_float32);
    write_pod<uint32_t>(os, static_cast<uint32_t>(b.kind));
    write_pod<uint8_t>(os, b.latent_truth.defined() ? 1 : 0);
    if (b.latent_truth.defined()) write_array(os, b.latent_truth, as_float32);
    write_pod<uint32_t>(os, static_cast<uint32_t>(b.gp_kernel));
    write_pod<double>(os, b.gp_ell);
    write_pod<double>(os, b.gp_period);
    write_pod<double>(os, b.gp_sigma_n);
  }
  if (!os) throw IoError("save_batches: write failed for '" + path + "'");
}

std::vector<TaskBatch<double>> load_batches(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_batches: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("batch file: bad magic");
  }
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != kVersion) {
    throw DataError("batch file: version " + std::to_string(version) + " unsupported");
  }
  const bool as_f32 = read_pod<uint8_t>(is) != 0;
  const uint64_t count = read_pod<uint64_t>(is);
  std::vector<TaskBatch<double>> out;
  out.reserve(count);
  for (uint64_t e = 0; e < count; ++e) {
    TaskBatch<double> b;
    b.s_c = read_array(is, as_f32);
    b.f_c = read_array(is, as_f32);
    const uint64_t mask_len = read_pod<uint64_t>(is);
    b.context_mask.resize(mask_len);
    is.read(reinterpret_cast<char*>(b.context_mask.data()),
            static_cast<std::streamsize>(mask_len));
    if (!is) throw DataError("batch file: truncated while reading mask");
    b.s_t = read_array(is, as_f32);
    b.f_t = read_array(is, as_f32);
    b.kind = static_cast<TaskKind>(read_pod<uint32_t>(is));
    if (read_pod<uint8_t>(is) != 0) b.latent_truth = read_array(is, as_f32);
    b.gp_kernel = static_cast<GpKernelKind>(read_pod<uint32_t>(is));
    b.gp_ell = read_pod<double>(is);
    b.gp_period = read_pod<double>(is);
    b.gp_sigma_n = read_pod<double>(is);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace tnpkr
