#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "tnpkr/errors.hpp"
#include "tnpkr/memtrack.hpp"
#include "tnpkr/rng.hpp"

namespace tnpkr {

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor;

// A recorded op: how the output was produced and how to push its gradient
// back into the parents.
template <typename T>
struct Node {
  const char* op = "";
  std::vector<Tensor<T>> parents;
  std::function<void(Tensor<T>&)> backward;
};

template <typename T>
struct TensorImpl {
  using Buffer = std::vector<T, memtrack::TrackingAllocator<T>>;
  std::vector<int64_t> shape;
  Buffer value;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;
};

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor with shared-ownership value semantics: copies alias
// the same storage, so parameters can be held by both the model and the tape.
template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;
  using Buffer = typename Impl::Buffer;

  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->value.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), T(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, T v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
  }

  static Tensor ones(std::vector<int64_t> shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }

  static Tensor from_data(std::vector<int64_t> shape, const std::vector<T>& data,
                          bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    std::copy(data.begin(), data.end(), t.impl_->value.begin());
    return t;
  }

  static Tensor randn(std::vector<int64_t> shape, RngStream& rng, T stddev = T(1),
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->value) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static Tensor uniform(std::vector<int64_t> shape, RngStream& rng, T lo, T hi,
                        bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->value) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const { return impl_->shape; }
  int64_t dim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t size(int64_t i) const {
    const int64_t d = dim();
    if (i < 0) i += d;
    return impl_->shape[static_cast<size_t>(i)];
  }
  int64_t numel() const { return static_cast<int64_t>(impl_->value.size()); }

  T* data() { return impl_->value.data(); }
  const T* data() const { return impl_->value.data(); }
  T& operator[](int64_t i) { return impl_->value[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return impl_->value[static_cast<size_t>(i)]; }

  T item() const {
    if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool grad_allocated() const { return impl_ && !impl_->grad.empty(); }
  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
  }
  T* grad_data() {
    ensure_grad();
    return impl_->grad.data();
  }
  const T* grad_data() const { return impl_->grad.data(); }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  Tensor grad() const {
    Tensor g = zeros(impl_->shape);
    if (!impl_->grad.empty()) std::copy(impl_->grad.begin(), impl_->grad.end(), g.data());
    return g;
  }

  std::shared_ptr<Node<T>> node() const { return impl_->node; }
  void set_node(std::shared_ptr<Node<T>> n) { impl_->node = std::move(n); }

  // Same values, fresh storage, no tape history.
  Tensor detach() const {
    Tensor t = zeros(impl_->shape);
    std::copy(impl_->value.begin(), impl_->value.end(), t.data());
    return t;
  }

  Tensor clone_with_grad() const {
    Tensor t = detach();
    t.set_requires_grad(true);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t = Tensor<U>::zeros(impl_->shape);
    for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<U>(impl_->value[static_cast<size_t>(i)]);
    return t;
  }

  const void* id() const { return impl_.get(); }

  void backward();

 private:
  std::shared_ptr<Impl> impl_;
};

// Reverse-mode sweep from a scalar root. Re-entrant: a node's backward may
// itself run a nested sweep over a freshly built subgraph.
template <typename T>
void run_backward(Tensor<T> root, const Tensor<T>* seed = nullptr) {
  if (!root.requires_grad()) {
    throw ConfigError("backward() on a tensor that does not require grad");
  }
  if (seed == nullptr && root.numel() != 1) {
    throw ConfigError("backward() without seed requires a scalar root, got " +
                      shape_str(root.shape()));
  }
  root.ensure_grad();
  if (seed) {
    for (int64_t i = 0; i < root.numel(); ++i) root.grad_data()[i] += (*seed)[i];
  } else {
    root.grad_data()[0] += T(1);
  }

  // Iterative post-order DFS over creator nodes.
  std::vector<Tensor<T>> order;
  std::unordered_set<const void*> visited;
  struct Frame {
    Tensor<T> t;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (root.node()) stack.push_back({root, 0});
  visited.insert(root.id());
  while (!stack.empty()) {
    Frame& f = stack.back();
    auto node = f.t.node();
    if (f.next_parent < node->parents.size()) {
      Tensor<T> p = node->parents[f.next_parent++];
      if (p.defined() && p.node() && !visited.count(p.id())) {
        visited.insert(p.id());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor<T> t = *it;
    auto node = t.node();
    if (!node->backward) continue;
    if (!t.grad_allocated()) t.ensure_grad();
    node->backward(t);
  }
}

template <typename T>
void Tensor<T>::backward() {
  run_backward(*this);
}

// Helper used by ops to finish constructing a tape node.
template <typename T>
void attach_node(Tensor<T>& out, const char* op, std::vector<Tensor<T>> parents,
                 std::function<void(Tensor<T>&)> backward) {
  bool any = false;
  for (const auto& p : parents) {
    if (p.defined() && p.requires_grad()) any = true;
  }
  if (!any || !grad_enabled()) return;
  out.set_requires_grad(true);
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->parents = std::move(parents);
  node->backward = std::move(backward);
  out.set_node(std::move(node));
}

}  // namespace tnpkr
