#pragma once

#include <string>
#include <vector>

#include "tnpkr/ops.hpp"
#include "tnpkr/optim.hpp"
#include "tnpkr/tensor.hpp"

namespace tnpkr {

// Scalar kernel evaluations. Lengthscale/period must be positive.
template <typename T>
T rbf_kernel(T d, T sigma2, T ell);
template <typename T>
T periodic_kernel(T d, T ell, T p);
template <typename T>
T matern32_kernel(T d, T ell);

// Passes the base kernel value through when the key time does not exceed the
// query time (boundary inclusive) and returns the masking sentinel otherwise,
// so a downstream softmax assigns future keys exactly zero weight.
template <typename T>
T causal_temporal(T base_value, T t_q, T t_k);

// Learnable RBF-network bias: sum_s a_s * exp(-|b_s| * (d - c_s)^2).
template <typename T>
struct TisaParams {
  Tensor<T> a;
  Tensor<T> b;
  Tensor<T> c;
  static TisaParams init(int64_t n_basis, RngStream& rng);
  int64_t n_basis() const { return a.numel(); }
};

// dist carries no gradient; the output is differentiable w.r.t. a, b, c.
template <typename T>
Tensor<T> tisa_bias(const Tensor<T>& dist, const TisaParams<T>& params);

// Euclidean distance over the selected index-set components.
// s_q [*, n_q, ds], s_k [*, n_k, ds] -> [*, n_q, n_k]; value-only.
template <typename T>
Tensor<T> pairwise_distance(const Tensor<T>& s_q, const Tensor<T>& s_k,
                            const std::vector<int64_t>& components);

enum class BiasKernel { tisa, rbf, periodic, matern32 };

BiasKernel bias_kernel_from_string(const std::string& name);
std::string bias_kernel_to_string(BiasKernel k);

// One weighted term of the attention bias. Fixed-form kernels carry their
// hyperparameters in log space so training keeps them positive.
template <typename T>
struct BiasTerm {
  BiasKernel kernel = BiasKernel::tisa;
  std::vector<int64_t> components;  // empty = all index dims
  TisaParams<T> tisa;
  Tensor<T> log_params;  // rbf: [log s2, log ell]; periodic: [log ell, log p]; matern32: [log ell]
};

template <typename T>
struct BiasSpec {
  std::vector<BiasTerm<T>> terms;
  Tensor<T> alpha;  // [n_terms], zero-initialized so training starts from plain softmax

  bool empty() const { return terms.empty(); }
  // All supported kernels act on pairwise distances only.
  bool translation_invariant() const { return true; }
  void collect_params(const std::string& prefix, ParamMap<T>& out) const;
};

// Weighted sum of per-term kernel matrices over the selected components of
// the index set: [*, n_q, n_k]. Differentiable w.r.t. alpha and term params.
template <typename T>
Tensor<T> combine_bias(const BiasSpec<T>& spec, const Tensor<T>& s_q, const Tensor<T>& s_k);

// Builds a spec with a single TISA term over all components (the default
// attention bias), with 5 basis functions.
template <typename T>
BiasSpec<T> default_tisa_spec(RngStream& rng, int64_t n_basis = 5);

}  // namespace tnpkr
