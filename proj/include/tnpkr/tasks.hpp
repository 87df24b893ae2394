#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tnpkr/rng.hpp"
#include "tnpkr/tensor.hpp"

namespace tnpkr {

enum class TaskKind : uint32_t {
  gp1d_rbf = 0,
  gp1d_periodic = 1,
  gp1d_matern32 = 2,
  gp2d_rbf = 3,
  sir = 4,
};

TaskKind task_kind_from_string(const std::string& name);
std::string task_kind_to_string(TaskKind k);
bool task_is_categorical(TaskKind k);
int64_t task_index_dims(TaskKind k);

enum class GpKernelKind : uint32_t { rbf = 0, periodic = 1, matern32 = 2 };

// One meta-learning episode. Function values in f_c/f_t carry observation
// noise for GP tasks; latent_truth holds the noiseless draw when available.
template <typename T>
struct TaskBatch {
  TaskKind kind = TaskKind::gp1d_rbf;
  Tensor<T> s_c;  // [n_c, ds]
  Tensor<T> f_c;  // [n_c, df]
  Tensor<T> s_t;  // [n_t, ds]
  Tensor<T> f_t;  // [n_t, df]
  std::vector<uint8_t> context_mask;  // [n_c], 1 = valid
  Tensor<T> latent_truth;             // optional [n_t, df]

  // Generator-side truth for the oracle.
  GpKernelKind gp_kernel = GpKernelKind::rbf;
  double gp_ell = 0;
  double gp_period = 0;
  double gp_sigma_n = 0;

  int64_t n_context() const { return s_c.defined() ? s_c.size(0) : 0; }
  int64_t n_test() const { return s_t.defined() ? s_t.size(0) : 0; }

  template <typename U>
  TaskBatch<U> cast() const {
    TaskBatch<U> out;
    out.kind = kind;
    out.s_c = s_c.template cast<U>();
    out.f_c = f_c.template cast<U>();
    out.s_t = s_t.template cast<U>();
    out.f_t = f_t.template cast<U>();
    out.context_mask = context_mask;
    if (latent_truth.defined()) out.latent_truth = latent_truth.template cast<U>();
    out.gp_kernel = gp_kernel;
    out.gp_ell = gp_ell;
    out.gp_period = gp_period;
    out.gp_sigma_n = gp_sigma_n;
    return out;
  }
};

struct Gp1dOptions {
  double sigma_n = 0.1;
  int64_t n_random = 50;
  int64_t n_grid = 100;
  int64_t ctx_min = 3;
  int64_t ctx_max = 50;
  double lo = -2.0;
  double hi = 2.0;
  // Test hooks: pin the hyperparameters instead of sampling them.
  std::optional<double> fixed_ell;
  std::optional<double> fixed_period;
};

// Lengthscale ~ Beta(3,7); period ~ U(0.5,2) for the periodic kernel. The
// episode holds 50 random + 100 gridded locations; the context is a random
// subset of the random points and every location is a test point.
TaskBatch<double> sample_gp_1d(GpKernelKind kernel, RngStream& rng,
                               const Gp1dOptions& opt = {});

struct Gp2dOptions {
  double sigma_n = 0.1;
  int64_t n_random = 128;
  int64_t grid_side = 16;
  int64_t ctx_min = 12;
  int64_t ctx_max = 128;
  double lo = -2.0;
  double hi = 2.0;
  std::optional<double> fixed_ell;
};

TaskBatch<double> sample_gp_2d(RngStream& rng, const Gp2dOptions& opt = {});

// Exact GP regression posterior under the generator's kernel; 64-bit
// Cholesky with escalating jitter. sigma includes observation noise.
// n_c = 0 falls back to the prior.
void exact_gp_posterior(const Tensor<double>& s_c, const Tensor<double>& f_c,
                        const Tensor<double>& s_t, GpKernelKind kernel, double ell,
                        double period, double sigma_n, Tensor<double>& mu,
                        Tensor<double>& sigma);

struct SirOptions {
  int64_t side = 64;
  double decay_lengthscale = 2.0;  // cells; transmission decay scale
  int64_t horizon = 50;
  int64_t test_points = 256;   // at side=64; larger grids scale by area
  int64_t ctx_min = 16;
  int64_t ctx_max = 128;
  // Test hooks: pin dynamics parameters / seed placement.
  std::optional<double> beta;
  std::optional<double> gamma;
  std::optional<int64_t> omega;
  bool center_seed = false;
  std::optional<int64_t> snapshot_step;
};

// Full trajectory for dynamics checks: cell states per step, 0=S 1=I 2=R.
struct SirTrajectory {
  int64_t side = 0;
  double beta = 0;
  double gamma = 0;
  int64_t omega = 0;
  std::vector<std::vector<uint8_t>> states;  // [steps+1][side*side]
};

SirTrajectory simulate_sir(RngStream& rng, const SirOptions& opt);

// Snapshot episode: classes at a uniformly chosen step with active
// infections; grid coordinates are mapped to [-2,2]^2.
TaskBatch<double> sample_sir(RngStream& rng, const SirOptions& opt = {});

// Same dynamics on a larger grid with per-area context/test density held
// fixed; evaluation-only sizes.
TaskBatch<double> scale_sir_grid(int64_t side, RngStream& rng);

// Little-endian container: magic, version, dtype, episode count, then
// per-episode length-prefixed arrays in fixed order.
void save_batches(const std::string& path, const std::vector<TaskBatch<double>>& batches,
                  bool as_float32 = false);
std::vector<TaskBatch<double>> load_batches(const std::string& path);

}  // namespace tnpkr
