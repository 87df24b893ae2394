#include "tnpkr/optim.hpp"

#include <cmath>

namespace tnpkr {

template <typename T>
void Yogi<T>::step(ParamMap<T>& params, T lr) {
  ++t_;
  const T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(t_));
  const T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(t_));
  for (auto& [name, param] : params) {
    Tensor<T>& p = param;
    if (!p.grad_allocated()) continue;
    const T* g = p.grad_data();
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("yogi_step: non-finite gradient in parameter '" + name + "'");
      }
    }
    auto it = slots_.find(name);
    if (it == slots_.end()) {
      it = slots_.emplace(name, Slot{Tensor<T>::zeros(p.shape()), Tensor<T>::zeros(p.shape())}).first;
    }
    T* m = it->second.m.data();
    T* v = it->second.v.data();
    T* w = p.data();
    for (int64_t i = 0; i < n; ++i) {
      const T g2 = g[i] * g[i];
      const T s = v[i] > g2 ? T(1) : (v[i] < g2 ? T(-1) : T(0));
      v[i] -= (T(1) - cfg_.beta2) * s * g2;
      m[i] = cfg_.beta1 * m[i] + (T(1) - cfg_.beta1) * g[i];
      const T m_hat = m[i] / bc1;
      const T v_hat = v[i] / bc2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

template <typename T>
T cosine_lr(int64_t step, int64_t total_steps, T lr_max, T lr_min) {
  if (step < 0) throw ConfigError("cosine_lr: negative step");
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step >= total_steps) return lr_min;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + (lr_max - lr_min) * static_cast<T>(0.5 * (1.0 + std::cos(3.14159265358979323846 * frac)));
}

template <typename T>
T clip_grad_norm(ParamMap<T>& params, T max_norm) {
  // Accumulate in declaration (map) order so the result does not depend on
  // traversal details.
  double sq = 0.0;
  for (auto& [name, param] : params) {
    (void)name;
    if (!param.grad_allocated()) continue;
    const T* g = param.grad_data();
    for (int64_t i = 0; i < param.numel(); ++i) sq += static_cast<double>(g[i]) * g[i];
  }
  const T norm = static_cast<T>(std::sqrt(sq));
  if (norm > max_norm) {
    const T s = max_norm / norm;
    for (auto& [name, param] : params) {
      (void)name;
      if (!param.grad_allocated()) continue;
      T* g = param.grad_data();
      for (int64_t i = 0; i < param.numel(); ++i) g[i] *= s;
    }
  }
  return norm;
}

template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  Tensor<T> xa = x.detach();
  xa.set_requires_grad(true);
  Tensor<T> y = f(xa);
  if (y.numel() != 1) throw ConfigError("grad_check: f must return a scalar");
  if (!std::isfinite(static_cast<double>(y.item()))) {
    throw NumericError("grad_check: non-finite value at base point");
  }
  y.backward();
  std::vector<T> ad(static_cast<size_t>(xa.numel()));
  for (int64_t i = 0; i < xa.numel(); ++i) ad[static_cast<size_t>(i)] = xa.grad_data()[i];

  NoGradGuard ng;
  Tensor<T> xp = x.detach();
  T worst = T(0);
  for (int64_t i = 0; i < xp.numel(); ++i) {
    const T orig = xp[i];
    xp[i] = orig + h;
    const T fp = f(xp).item();
    xp[i] = orig - h;
    const T fm = f(xp).item();
    xp[i] = orig;
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm))) {
      throw NumericError("grad_check: non-finite value at probe point");
    }
    const T fd = (fp - fm) / (T(2) * h);
    const T denom = std::max(std::max(std::abs(fd), std::abs(ad[static_cast<size_t>(i)])), T(1e-8));
    worst = std::max(worst, std::abs(fd - ad[static_cast<size_t>(i)]) / denom);
  }
  return worst;
}

template class Yogi<float>;
template class Yogi<double>;
template float cosine_lr(int64_t, int64_t, float, float);
template double cosine_lr(int64_t, int64_t, double, double);
template float clip_grad_norm(ParamMap<float>&, float);
template double clip_grad_norm(ParamMap<double>&, double);
template float grad_check(const std::function<Tensor<float>(const Tensor<float>&)>&,
                          const Tensor<float>&, float);
template double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>&,
                           const Tensor<double>&, double);

}  // namespace tnpkr
