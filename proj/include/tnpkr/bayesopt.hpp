#pragma once

#include <memory>
#include <vector>

#include "tnpkr/model.hpp"
#include "tnpkr/tasks.hpp"

namespace tnpkr {

// Minimization episode: a noiseless GP draw evaluated on a dense grid.
struct BoEpisode {
  Tensor<double> grid;       // [n_grid, 1]
  Tensor<double> objective;  // [n_grid]
  GpKernelKind kernel = GpKernelKind::rbf;
  double ell = 0.3;
  double period = 0;
  int64_t n_init = 3;
  int64_t budget = 30;
};

BoEpisode make_bo_episode(GpKernelKind kernel, RngStream& rng, int64_t grid_size = 256);

// Expected improvement under minimization; sigma = 0 degenerates to the
// plain improvement.
double expected_improvement(double mu, double sigma, double best);

// Confidence-bound score under minimization: -mu + kappa * sigma.
double ucb_acquisition(double mu, double sigma, double kappa);

enum class Acquisition { ei, ucb, random_search };

Acquisition acquisition_from_string(const std::string& name);
std::string acquisition_to_string(Acquisition a);

// Posterior predictor over the grid given the observed set.
class BoPredictor {
 public:
  virtual ~BoPredictor() = default;
  virtual void predict(const Tensor<double>& s_c, const Tensor<double>& f_c,
                       const Tensor<double>& s_t, Tensor<double>& mu,
                       Tensor<double>& sigma) = 0;
};

// Exact GP posterior with the episode's true kernel and hyperparameters.
class OracleBoPredictor : public BoPredictor {
 public:
  explicit OracleBoPredictor(const BoEpisode& ep, double sigma_n = 1e-6)
      : kernel_(ep.kernel), ell_(ep.ell), period_(ep.period), sigma_n_(sigma_n) {}
  void predict(const Tensor<double>& s_c, const Tensor<double>& f_c,
               const Tensor<double>& s_t, Tensor<double>& mu, Tensor<double>& sigma) override;

 private:
  GpKernelKind kernel_;
  double ell_, period_, sigma_n_;
};

// Trained neural-process predictor.
template <typename T>
class ModelBoPredictor : public BoPredictor {
 public:
  ModelBoPredictor(const TnpModel<T>* model, TaskKind kind) : model_(model), kind_(kind) {}
  void predict(const Tensor<double>& s_c, const Tensor<double>& f_c,
               const Tensor<double>& s_t, Tensor<double>& mu, Tensor<double>& sigma) override;

 private:
  const TnpModel<T>* model_;
  TaskKind kind_;
};

// Sequential loop: reveal n_init random points, then argmax-acquisition picks
// restricted to the grid, ties broken by lowest index. Returns the simple
// regret after each of the n_init + budget observations; the trace never
// increases. Acquisition::random_search ignores the predictor.
std::vector<double> run_bo(BoPredictor* predictor, const BoEpisode& ep, Acquisition acq,
                           double kappa, RngStream& rng);

}  // namespace tnpkr
