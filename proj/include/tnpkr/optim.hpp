#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "tnpkr/tensor.hpp"

namespace tnpkr {

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <typename T>
struct YogiConfig {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-3);
};

// Sign-based second-moment variant of Adam: v never goes negative and adapts
// additively, which keeps updates stable under sparse/badly scaled gradients.
template <typename T>
class Yogi {
 public:
  struct Slot {
    Tensor<T> m;
    Tensor<T> v;
  };

  explicit Yogi(YogiConfig<T> cfg = {}) : cfg_(cfg) {}

  // Applies one update from the gradients stored on the params. Throws
  // NumericError naming the parameter if its gradient is not finite.
  void step(ParamMap<T>& params, T lr);

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  const YogiConfig<T>& config() const { return cfg_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  YogiConfig<T> cfg_;
  int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

template <typename T>
T cosine_lr(int64_t step, int64_t total_steps, T lr_max, T lr_min);

// Scales all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm. Returns the pre-clip norm.
template <typename T>
T clip_grad_norm(ParamMap<T>& params, T max_norm);

// Central finite differences against the recorded-tape gradient; returns the
// max over coordinates of |fd - ad| / max(|fd|, |ad|, 1e-8).
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

}  // namespace tnpkr
