#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "tnpkr/ops.hpp"
#include "tnpkr/rng.hpp"
#include "tnpkr/tensor.hpp"

namespace test_util {

template <typename T>
double max_abs_diff(const tnpkr::Tensor<T>& a, const tnpkr::Tensor<T>& b) {
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return worst;
}

template <typename T>
double max_rel_diff(const tnpkr::Tensor<T>& a, const tnpkr::Tensor<T>& b,
                    double floor = 1e-8) {
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a[i], y = b[i];
    const double denom = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

// Finite-difference check for a parameter that lives inside a model: the
// loss closure rebuilds the graph from current parameter values; p is
// perturbed in place. Returns the grad_check-style max relative error.
template <typename LossFn, typename ZeroFn>
double param_fd_check(LossFn make_loss, ZeroFn zero_grads, tnpkr::Tensor<double>& p,
                      double h = 1e-5) {
  zero_grads();
  auto loss = make_loss();
  loss.backward();
  std::vector<double> ad(p.grad_data(), p.grad_data() + p.numel());

  tnpkr::NoGradGuard ng;
  double worst = 0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double fp = make_loss().item();
    p[i] = orig - h;
    const double fm = make_loss().item();
    p[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(ad[static_cast<size_t>(i)]), 1e-8});
    worst = std::max(worst, std::abs(fd - ad[static_cast<size_t>(i)]) / denom);
  }
  return worst;
}

template <typename T>
bool bitwise_equal(const tnpkr::Tensor<T>& a, const tnpkr::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(T)) != 0) return false;
  }
  return true;
}

}  // namespace test_util
