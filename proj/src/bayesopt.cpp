#include "tnpkr/bayesopt.hpp"

#include <algorithm>
#include <cmath>

#include "tnpkr/ops.hpp"
#include "tnpkr/stats.hpp"

namespace tnpkr {

BoEpisode make_bo_episode(GpKernelKind kernel, RngStream& rng, int64_t grid_size) {
  Gp1dOptions opt;
  opt.n_random = 1;  // a throwaway location; the lattice carries the objective
  opt.n_grid = grid_size;
  opt.ctx_min = 1;
  opt.ctx_max = 1;
  opt.sigma_n = 0.0;
  auto batch = sample_gp_1d(kernel, rng, opt);
  BoEpisode ep;
  ep.kernel = kernel;
  ep.ell = batch.gp_ell;
  ep.period = batch.gp_period;
  ep.grid = Tensor<double>::zeros({grid_size, 1});
  ep.objective = Tensor<double>::zeros({grid_size});
  for (int64_t i = 0; i < grid_size; ++i) {
    ep.grid[i] = batch.s_t[1 + i];  // latent lattice values are noiseless
    ep.objective[i] = batch.latent_truth[1 + i];
  }
  return ep;
}

double expected_improvement(double mu, double sigma, double best) {
  if (sigma < 0) throw ConfigError("expected_improvement: sigma must be nonnegative");
  const double gap = best - mu;
  if (sigma == 0.0) return std::max(gap, 0.0);
  const double z = gap / sigma;
  return gap * normal_cdf(z) + sigma * normal_pdf(z);
}

double ucb_acquisition(double mu, double sigma, double kappa) {
  return -mu + kappa * sigma;
}

Acquisition acquisition_from_string(const std::string& name) {
  if (name == "ei") return Acquisition::ei;
  if (name == "ucb") return Acquisition::ucb;
  if (name == "random") return Acquisition::random_search;
  throw ConfigError("unknown acquisition '" + name + "'");
}

std::string acquisition_to_string(Acquisition a) {
  switch (a) {
    case Acquisition::ei: return "ei";
    case Acquisition::ucb: return "ucb";
    case Acquisition::random_search: return "random";
  }
  return "?";
}

void OracleBoPredictor::predict(const Tensor<double>& s_c, const Tensor<double>& f_c,
                                const Tensor<double>& s_t, Tensor<double>& mu,
                                Tensor<double>& sigma) {
  exact_gp_posterior(s_c, f_c, s_t, kernel_, ell_, period_, sigma_n_, mu, sigma);
}

template <typename T>
void ModelBoPredictor<T>::predict(const Tensor<double>& s_c, const Tensor<double>& f_c,
                                  const Tensor<double>& s_t, Tensor<double>& mu,
                                  Tensor<double>& sigma) {
  NoGradGuard ng;
  TaskBatch<double> ep;
  ep.kind = kind_;
  ep.s_c = s_c;
  ep.f_c = f_c;
  ep.s_t = s_t;
  ep.f_t = Tensor<double>::zeros({s_t.size(0), 1});
  ep.context_mask.assign(static_cast<size_t>(s_c.size(0)), 1);
  TaskBatch<T> cast = ep.cast<T>();
  std::span<const TaskBatch<T>> span(&cast, 1);
  auto out = model_->forward(span);
  mu = Tensor<double>::zeros({s_t.size(0)});
  sigma = Tensor<double>::zeros({s_t.size(0)});
  for (int64_t i = 0; i < s_t.size(0); ++i) {
    mu[i] = static_cast<double>(out.mu[i]);
    sigma[i] = static_cast<double>(out.sigma[i]);
  }
}

std::vector<double> run_bo(BoPredictor* predictor, const BoEpisode& ep, Acquisition acq,
                           double kappa, RngStream& rng) {
  if (acq != Acquisition::random_search && predictor == nullptr) {
    throw ConfigError("run_bo: acquisition needs a predictor");
  }
  const int64_t n = ep.objective.numel();
  double grid_min = ep.objective[0];
  for (int64_t i = 1; i < n; ++i) grid_min = std::min(grid_min, ep.objective[i]);

  std::vector<uint8_t> observed(static_cast<size_t>(n), 0);
  std::vector<int64_t> picks;
  auto init = rng.sample_without_replacement(n, ep.n_init);
  for (int64_t i : init) picks.push_back(i);

  std::vector<double> trace;
  double best = std::numeric_limits<double>::infinity();
  const auto observe = [&](int64_t idx) {
    observed[static_cast<size_t>(idx)] = 1;
    best = std::min(best, ep.objective[idx]);
    trace.push_back(best - grid_min);
  };
  for (int64_t idx : picks) observe(idx);

  for (int64_t it = 0; it < ep.budget; ++it) {
    int64_t n_obs = static_cast<int64_t>(picks.size());
    int64_t choice = -1;
    if (acq == Acquisition::random_search) {
      // Uniform over unobserved points.
      std::vector<int64_t> open;
      for (int64_t i = 0; i < n; ++i) {
        if (!observed[static_cast<size_t>(i)]) open.push_back(i);
      }
      if (open.empty()) break;
      choice = open[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(open.size()) - 1))];
    } else {
      Tensor<double> s_c = Tensor<double>::zeros({n_obs, 1});
      Tensor<double> f_c = Tensor<double>::zeros({n_obs, 1});
      for (int64_t i = 0; i < n_obs; ++i) {
        s_c[i] = ep.grid[picks[static_cast<size_t>(i)]];
        f_c[i] = ep.objective[picks[static_cast<size_t>(i)]];
      }
      Tensor<double> mu, sigma;
      predictor->predict(s_c, f_c, ep.grid, mu, sigma);
      double best_score = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < n; ++i) {
        if (observed[static_cast<size_t>(i)]) continue;
        const double score = acq == Acquisition::ei
                                 ? expected_improvement(mu[i], sigma[i], best)
                                 : ucb_acquisition(mu[i], sigma[i], kappa);
        if (score > best_score) {
          best_score = score;
          choice = i;
        }
      }
      if (choice < 0) break;
    }
    picks.push_back(choice);
    observe(choice);
  }
  return trace;
}

template class ModelBoPredictor<float>;
template class ModelBoPredictor<double>;

}  // namespace tnpkr
