#include "tnpkr/ops.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <memory>
#include <mutex>

#include "tnpkr/parallel.hpp"

extern "C" void openblas_set_num_threads(int);

namespace tnpkr {

namespace {

// BLAS parallelism stays off; this library parallelizes at a higher level
// with fixed work partitions so results do not depend on the thread count.
void blas_init() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

template <typename T>
void gemm_rm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha, const T* a,
             int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc);

template <>
void gemm_rm<float>(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
                    const float* a, int64_t lda, const float* b, int64_t ldb, float beta,
                    float* c, int64_t ldc) {
  blas_init();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <>
void gemm_rm<double>(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha,
                     const double* a, int64_t lda, const double* b, int64_t ldb, double beta,
                     double* c, int64_t ldc) {
  blas_init();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <typename T, typename FwdFn, typename DervFn>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, FwdFn fwd, DervFn derv) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  T* ov = out.data();
  par::parallel_for_chunked(a.numel(), 4096, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) ov[i] = fwd(av[i]);
  });
  attach_node<T>(out, name, {a}, [a, derv](Tensor<T>& o) {
    Tensor<T> pa = a;
    if (!pa.requires_grad()) return;
    const T* og = o.grad_data();
    const T* av2 = pa.data();
    const T* ov2 = o.data();
    T* ag = pa.grad_data();
    const int64_t n = pa.numel();
    par::parallel_for_chunked(n, 4096, [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i) ag[i] += og[i] * derv(av2[i], ov2[i]);
    });
  });
  return out;
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  par::parallel_for_chunked(a.numel(), 4096, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] + bv[i];
  });
  attach_node<T>(out, "add", {a, b}, [a, b](Tensor<T>& o) {
    const T* og = o.grad_data();
    const int64_t n = o.numel();
    for (Tensor<T> p : {a, b}) {
      if (!p.requires_grad()) continue;
      T* pg = p.grad_data();
      par::parallel_for_chunked(n, 4096, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) pg[i] += og[i];
      });
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] - bv[i];
  attach_node<T>(out, "sub", {a, b}, [a, b](Tensor<T>& o) {
    const T* og = o.grad_data();
    const int64_t n = o.numel();
    Tensor<T> pa = a, pb = b;
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      for (int64_t i = 0; i < n; ++i) g[i] += og[i];
    }
    if (pb.requires_grad()) {
      T* g = pb.grad_data();
      for (int64_t i = 0; i < n; ++i) g[i] -= og[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  par::parallel_for_chunked(a.numel(), 4096, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] * bv[i];
  });
  attach_node<T>(out, "mul", {a, b}, [a, b](Tensor<T>& o) {
    const T* og = o.grad_data();
    const int64_t n = o.numel();
    Tensor<T> pa = a, pb = b;
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      const T* bv2 = pb.data();
      for (int64_t i = 0; i < n; ++i) g[i] += og[i] * bv2[i];
    }
    if (pb.requires_grad()) {
      T* g = pb.grad_data();
      const T* av2 = pa.data();
      for (int64_t i = 0; i < n; ++i) g[i] += og[i] * av2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("div", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] / bv[i];
  attach_node<T>(out, "div", {a, b}, [a, b](Tensor<T>& o) {
    const T* og = o.grad_data();
    const T* ov2 = o.data();
    const int64_t n = o.numel();
    Tensor<T> pa = a, pb = b;
    const T* bv2 = pb.data();
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      for (int64_t i = 0; i < n; ++i) g[i] += og[i] / bv2[i];
    }
    if (pb.requires_grad()) {
      T* g = pb.grad_data();
      for (int64_t i = 0; i < n; ++i) g[i] -= og[i] * ov2[i] / bv2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op<T>(
      "add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary_op<T>(
      "scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  return unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
  return unary_op<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
  return unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  // Exact erf form; smooth everywhere, which keeps finite-difference checks tight.
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary_op<T>(
      "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

template <typename T>
Tensor<T> softplus_op(const Tensor<T>& a) {
  return unary_op<T>(
      "softplus", a,
      [](T x) {
        const T ax = std::abs(x);
        return std::max(x, T(0)) + std::log1p(std::exp(-ax));
      },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* av = a.data();
  T acc = T(0);
  for (int64_t i = 0; i < a.numel(); ++i) acc += av[i];
  out[0] = acc;
  attach_node<T>(out, "sum", {a}, [a](Tensor<T>& o) {
    Tensor<T> pa = a;
    if (!pa.requires_grad()) return;
    const T g = o.grad_data()[0];
    T* ag = pa.grad_data();
    for (int64_t i = 0; i < pa.numel(); ++i) ag[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_last(const Tensor<T>& a) {
  const int64_t d = a.size(-1);
  const int64_t rows = a.numel() / d;
  std::vector<int64_t> oshape = a.shape();
  oshape.back() = 1;
  Tensor<T> out = Tensor<T>::zeros(oshape);
  const T* av = a.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (int64_t j = 0; j < d; ++j) acc += av[r * d + j];
    ov[r] = acc;
  }
  attach_node<T>(out, "sum_last", {a}, [a, d, rows](Tensor<T>& o) {
    Tensor<T> pa = a;
    if (!pa.requires_grad()) return;
    const T* og = o.grad_data();
    T* ag = pa.grad_data();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < d; ++j) ag[r * d + j] += og[r];
    }
  });
  return out;
}

namespace {
template <typename T>
void check_bcast_last(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (b.size(-1) != 1 || b.numel() != a.numel() / a.size(-1)) {
    throw ConfigError(std::string(op) + ": expected trailing-1 broadcast shape, got " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}
}  // namespace

template <typename T>
Tensor<T> add_bcast_last(const Tensor<T>& a, const Tensor<T>& b) {
  check_bcast_last("add_bcast_last", a, b);
  const int64_t d = a.size(-1);
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] + bv[r];
  }
  attach_node<T>(out, "add_bcast_last", {a, b}, [a, b, d, rows](Tensor<T>& o) {
    const T* og = o.grad_data();
    Tensor<T> pa = a, pb = b;
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      for (int64_t i = 0; i < pa.numel(); ++i) g[i] += og[i];
    }
    if (pb.requires_grad()) {
      T* g = pb.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (int64_t j = 0; j < d; ++j) acc += og[r * d + j];
        g[r] += acc;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul_bcast_last(const Tensor<T>& a, const Tensor<T>& b) {
  check_bcast_last("mul_bcast_last", a, b);
  const int64_t d = a.size(-1);
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] * bv[r];
  }
  attach_node<T>(out, "mul_bcast_last", {a, b}, [a, b, d, rows](Tensor<T>& o) {
    const T* og = o.grad_data();
    Tensor<T> pa = a, pb = b;
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      const T* bv2 = pb.data();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < d; ++j) g[r * d + j] += og[r * d + j] * bv2[r];
      }
    }
    if (pb.requires_grad()) {
      T* g = pb.grad_data();
      const T* av2 = pa.data();
      for (int64_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (int64_t j = 0; j < d; ++j) acc += og[r * d + j] * av2[r * d + j];
        g[r] += acc;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> div_bcast_last(const Tensor<T>& a, const Tensor<T>& b) {
  check_bcast_last("div_bcast_last", a, b);
  const int64_t d = a.size(-1);
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] / bv[r];
  }
  attach_node<T>(out, "div_bcast_last", {a, b}, [a, b, d, rows](Tensor<T>& o) {
    const T* og = o.grad_data();
    const T* ov2 = o.data();
    Tensor<T> pa = a, pb = b;
    const T* bv2 = pb.data();
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < d; ++j) g[r * d + j] += og[r * d + j] / bv2[r];
      }
    }
    if (pb.requires_grad()) {
      T* g = pb.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (int64_t j = 0; j < d; ++j) acc += og[r * d + j] * ov2[r * d + j];
        g[r] -= acc / bv2[r];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  const int64_t d = a.size(-1);
  if (v.numel() != d) {
    throw ConfigError("add_rowvec: vector length " + std::to_string(v.numel()) +
                      " does not match last dim of " + shape_str(a.shape()));
  }
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* vv = v.data();
  T* ov = out.data();
  par::parallel_for_chunked(rows, 64, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      for (int64_t j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] + vv[j];
    }
  });
  attach_node<T>(out, "add_rowvec", {a, v}, [a, v, d, rows](Tensor<T>& o) {
    const T* og = o.grad_data();
    Tensor<T> pa = a, pv = v;
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      for (int64_t i = 0; i < pa.numel(); ++i) g[i] += og[i];
    }
    if (pv.requires_grad()) {
      T* g = pv.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < d; ++j) g[j] += og[r * d + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  const int64_t d = a.size(-1);
  if (v.numel() != d) {
    throw ConfigError("mul_rowvec: vector length " + std::to_string(v.numel()) +
                      " does not match last dim of " + shape_str(a.shape()));
  }
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* av = a.data();
  const T* vv = v.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] * vv[j];
  }
  attach_node<T>(out, "mul_rowvec", {a, v}, [a, v, d, rows](Tensor<T>& o) {
    const T* og = o.grad_data();
    Tensor<T> pa = a, pv = v;
    if (pa.requires_grad()) {
      T* g = pa.grad_data();
      const T* vv2 = pv.data();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < d; ++j) g[r * d + j] += og[r * d + j] * vv2[j];
      }
    }
    if (pv.requires_grad()) {
      T* g = pv.grad_data();
      const T* av2 = pa.data();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < d; ++j) g[j] += og[r * d + j] * av2[r * d + j];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int64_t> shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  std::memcpy(out.data(), a.data(), sizeof(T) * static_cast<size_t>(a.numel()));
  attach_node<T>(out, "reshape", {a}, [a](Tensor<T>& o) {
    Tensor<T> pa = a;
    if (!pa.requires_grad()) return;
    const T* og = o.grad_data();
    T* ag = pa.grad_data();
    for (int64_t i = 0; i < pa.numel(); ++i) ag[i] += og[i];
  });
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.dim() < 2) throw ConfigError("transpose_last2: need rank >= 2");
  const int64_t r = a.size(-2), c = a.size(-1);
  const int64_t batch = a.numel() / (r * c);
  std::vector<int64_t> oshape = a.shape();
  std::swap(oshape[oshape.size() - 1], oshape[oshape.size() - 2]);
  Tensor<T> out = Tensor<T>::zeros(std::move(oshape));
  const T* av = a.data();
  T* ov = out.data();
  for (int64_t b = 0; b < batch; ++b) {
    const T* ab = av + b * r * c;
    T* ob = ov + b * r * c;
    for (int64_t i = 0; i < r; ++i) {
      for (int64_t j = 0; j < c; ++j) ob[j * r + i] = ab[i * c + j];
    }
  }
  attach_node<T>(out, "transpose_last2", {a}, [a, r, c, batch](Tensor<T>& o) {
    Tensor<T> pa = a;
    if (!pa.requires_grad()) return;
    const T* og = o.grad_data();
    T* ag = pa.grad_data();
    for (int64_t b = 0; b < batch; ++b) {
      const T* gb = og + b * r * c;
      T* ab = ag + b * r * c;
      for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < c; ++j) ab[i * c + j] += gb[j * r + i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_last: no inputs");
  std::vector<int64_t> lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int64_t total = 0;
  for (const auto& p : parts) {
    std::vector<int64_t> pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw ConfigError("concat_last: leading shape mismatch " + shape_str(p.shape()) +
                        " vs " + shape_str(parts[0].shape()));
    }
    total += p.size(-1);
  }
  std::vector<int64_t> oshape = parts[0].shape();
  oshape.back() = total;
  Tensor<T> out = Tensor<T>::zeros(std::move(oshape));
  const int64_t rows = out.numel() / total;
  T* ov = out.data();
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t d = p.size(-1);
    const T* pv = p.data();
    for (int64_t r = 0; r < rows; ++r) {
      std::memcpy(ov + r * total + off, pv + r * d, sizeof(T) * static_cast<size_t>(d));
    }
    off += d;
  }
  attach_node<T>(out, "concat_last", parts, [parts, rows, total](Tensor<T>& o) {
    const T* og = o.grad_data();
    int64_t off2 = 0;
    for (Tensor<T> p : parts) {
      const int64_t d = p.size(-1);
      if (p.requires_grad()) {
        T* g = p.grad_data();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < d; ++j) g[r * d + j] += og[r * total + off2 + j];
        }
      }
      off2 += d;
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, int64_t offset, int64_t len) {
  const int64_t d = a.size(-1);
  if (offset < 0 || len <= 0 || offset + len > d) {
    throw ConfigError("slice_last: invalid slice [" + std::to_string(offset) + "," +
                      std::to_string(offset + len) + ") of last dim " + std::to_string(d));
  }
  const int64_t rows = a.numel() / d;
  std::vector<int64_t> oshape = a.shape();
  oshape.back() = len;
  Tensor<T> out = Tensor<T>::zeros(std::move(oshape));
  const T* av = a.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(ov + r * len, av + r * d + offset, sizeof(T) * static_cast<size_t>(len));
  }
  attach_node<T>(out, "slice_last", {a}, [a, offset, len, d, rows](Tensor<T>& o) {
    Tensor<T> pa = a;
    if (!pa.requires_grad()) return;
    const T* og = o.grad_data();
    T* ag = pa.grad_data();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < len; ++j) ag[r * d + offset + j] += og[r * len + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matmul

namespace {

template <typename T>
void matmul_check(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw ConfigError("matmul: need rank >= 2, got " + shape_str(a.shape()) + " @ " +
                      shape_str(b.shape()));
  }
  if (a.size(-1) != b.size(-2)) {
    throw ConfigError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " @ " +
                      shape_str(b.shape()));
  }
  const bool a_batched = a.dim() > 2, b_batched = b.dim() > 2;
  if (a_batched && b_batched) {
    std::vector<int64_t> ab(a.shape().begin(), a.shape().end() - 2);
    std::vector<int64_t> bb(b.shape().begin(), b.shape().end() - 2);
    if (ab != bb) {
      throw ConfigError("matmul: batch dims must match or one side be rank-2, got " +
                        shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  matmul_check(a, b);
  const int64_t m = a.size(-2), k = a.size(-1), n = b.size(-1);
  const bool b_batched = b.dim() > 2;
  const bool a_batched = a.dim() > 2;

  std::vector<int64_t> oshape((a_batched ? a.shape() : b.shape()));
  oshape[oshape.size() - 2] = m;
  oshape[oshape.size() - 1] = n;
  Tensor<T> out = Tensor<T>::zeros(oshape);
  const int64_t batch = out.numel() / (m * n);

  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  if (!b_batched) {
    // Shared right operand: fold all leading dims into M.
    gemm_rm<T>(false, false, batch * m, n, k, T(1), av, k, bv, n, T(0), ov, n);
  } else {
    par::parallel_for(batch, [&](int64_t i) {
      const T* ai = a_batched ? av + i * m * k : av;
      gemm_rm<T>(false, false, m, n, k, T(1), ai, k, bv + i * k * n, n, T(0), ov + i * m * n,
                 n);
    });
  }

  attach_node<T>(out, "matmul", {a, b},
                 [a, b, m, k, n, batch, a_batched, b_batched](Tensor<T>& o) {
                   Tensor<T> pa = a, pb = b;
                   const T* og = o.grad_data();
                   const T* av2 = pa.data();
                   const T* bv2 = pb.data();
                   if (pa.requires_grad()) {
                     T* ag = pa.grad_data();
                     if (!b_batched) {
                       gemm_rm<T>(false, true, batch * m, k, n, T(1), og, n, bv2, n, T(1), ag, k);
                     } else if (a_batched) {
                       for (int64_t i = 0; i < batch; ++i) {
                         gemm_rm<T>(false, true, m, k, n, T(1), og + i * m * n, n, bv2 + i * k * n,
                                    n, T(1), ag + i * m * k, k);
                       }
                     } else {
                       for (int64_t i = 0; i < batch; ++i) {
                         gemm_rm<T>(false, true, m, k, n, T(1), og + i * m * n, n, bv2 + i * k * n,
                                    n, T(1), ag, k);
                       }
                     }
                   }
                   if (pb.requires_grad()) {
                     T* bg = pb.grad_data();
                     if (!b_batched) {
                       gemm_rm<T>(true, false, k, n, batch * m, T(1), av2, k, og, n, T(1), bg, n);
                     } else {
                       for (int64_t i = 0; i < batch; ++i) {
                         const T* ai = a_batched ? av2 + i * m * k : av2;
                         gemm_rm<T>(true, false, k, n, m, T(1), ai, k, og + i * m * n, n, T(1),
                                    bg + i * k * n, n);
                       }
                     }
                   }
                 });
  return out;
}

template <typename T>
Tensor<T> matmul_reference(const Tensor<T>& a, const Tensor<T>& b) {
  matmul_check(a, b);
  const int64_t m = a.size(-2), k = a.size(-1), n = b.size(-1);
  const bool b_batched = b.dim() > 2;
  const bool a_batched = a.dim() > 2;
  std::vector<int64_t> oshape((a_batched ? a.shape() : b.shape()));
  oshape[oshape.size() - 2] = m;
  oshape[oshape.size() - 1] = n;
  Tensor<T> out = Tensor<T>::zeros(std::move(oshape));
  const int64_t batch = out.numel() / (m * n);
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* A = a_batched ? av + bi * m * k : av;
    const T* B = b_batched ? bv + bi * k * n : bv;
    T* C = ov + bi * m * n;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        const T aik = A[i * k + kk];
        for (int64_t j = 0; j < n; ++j) C[i * n + j] += aik * B[kk * n + j];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / layer norm / dropout

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const int64_t d = x.size(-1);
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    T m = neg_inf_sentinel<T>();
    for (int64_t j = 0; j < d; ++j) {
      if (!is_masked_score(xr[j]) && xr[j] > m) m = xr[j];
    }
    if (is_masked_score(m)) {
      throw DataError("softmax_rows: fully masked row " + std::to_string(r));
    }
    T denom = T(0);
    T* orow = ov + r * d;
    for (int64_t j = 0; j < d; ++j) {
      const T e = is_masked_score(xr[j]) ? T(0) : std::exp(xr[j] - m);
      orow[j] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  attach_node<T>(out, "softmax_rows", {x}, [x, d, rows](Tensor<T>& o) {
    Tensor<T> px = x;
    if (!px.requires_grad()) return;
    const T* og = o.grad_data();
    const T* ov2 = o.data();
    T* xg = px.grad_data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* yr = ov2 + r * d;
      const T* gr = og + r * d;
      T dot = T(0);
      for (int64_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
      T* xr = xg + r * d;
      for (int64_t j = 0; j < d; ++j) xr[j] += yr[j] * (gr[j] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps) {
  const int64_t d = x.size(-1);
  if (gain.numel() != d || shift.numel() != d) {
    throw ConfigError("layer_norm: gain/shift length must equal last dim " +
                      std::to_string(d));
  }
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto mu = std::make_shared<std::vector<T>>(rows);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* xv = x.data();
  const T* gv = gain.data();
  const T* sv = shift.data();
  T* ov = out.data();
  par::parallel_for_chunked(rows, 16, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const T* xr = xv + r * d;
      T m = T(0);
      for (int64_t j = 0; j < d; ++j) m += xr[j];
      m /= static_cast<T>(d);
      T var = T(0);
      for (int64_t j = 0; j < d; ++j) {
        const T c = xr[j] - m;
        var += c * c;
      }
      var /= static_cast<T>(d);
      const T rs = T(1) / std::sqrt(var + eps);
      (*mu)[r] = m;
      (*rstd)[r] = rs;
      T* orow = ov + r * d;
      for (int64_t j = 0; j < d; ++j) orow[j] = gv[j] * ((xr[j] - m) * rs) + sv[j];
    }
  });
  attach_node<T>(out, "layer_norm", {x, gain, shift},
                 [x, gain, shift, mu, rstd, d, rows](Tensor<T>& o) {
                   Tensor<T> px = x, pg = gain, ps = shift;
                   const T* og = o.grad_data();
                   const T* xv2 = px.data();
                   const T* gv2 = pg.data();
                   T* xgrad = px.requires_grad() ? px.grad_data() : nullptr;
                   T* ggrad = pg.requires_grad() ? pg.grad_data() : nullptr;
                   T* sgrad = ps.requires_grad() ? ps.grad_data() : nullptr;
                   for (int64_t r = 0; r < rows; ++r) {
                     const T m = (*mu)[r];
                     const T rs = (*rstd)[r];
                     const T* xr = xv2 + r * d;
                     const T* gr = og + r * d;
                     T mean_h = T(0), mean_hx = T(0);
                     for (int64_t j = 0; j < d; ++j) {
                       const T xhat = (xr[j] - m) * rs;
                       const T h = gr[j] * gv2[j];
                       mean_h += h;
                       mean_hx += h * xhat;
                       if (ggrad) ggrad[j] += gr[j] * xhat;
                       if (sgrad) sgrad[j] += gr[j];
                     }
                     mean_h /= static_cast<T>(d);
                     mean_hx /= static_cast<T>(d);
                     if (xgrad) {
                       T* xgr = xgrad + r * d;
                       for (int64_t j = 0; j < d; ++j) {
                         const T xhat = (xr[j] - m) * rs;
                         const T h = gr[j] * gv2[j];
                         xgr[j] += rs * (h - mean_h - xhat * mean_hx);
                       }
                     }
                   }
                 });
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, RngStream& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T mi = rng.uniform() < p ? T(0) : keep_scale;
    (*mask)[static_cast<size_t>(i)] = mi;
    ov[i] = xv[i] * mi;
  }
  attach_node<T>(out, "dropout", {x}, [x, mask](Tensor<T>& o) {
    Tensor<T> px = x;
    if (!px.requires_grad()) return;
    const T* og = o.grad_data();
    T* xg = px.grad_data();
    for (int64_t i = 0; i < px.numel(); ++i) xg[i] += og[i] * (*mask)[static_cast<size_t>(i)];
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& labels) {
  const int64_t k = logits.size(-1);
  const int64_t rows = logits.numel() / k;
  if (static_cast<int64_t>(labels.size()) != rows) {
    throw DataError("cross_entropy: got " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(rows) + " rows");
  }
  for (int64_t r = 0; r < rows; ++r) {
    if (labels[static_cast<size_t>(r)] < 0 || labels[static_cast<size_t>(r)] >= k) {
      throw DataError("cross_entropy: class id " + std::to_string(labels[static_cast<size_t>(r)]) +
                      " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* lv = logits.data();
  T acc = T(0);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = lv + r * k;
    T m = xr[0];
    for (int64_t j = 1; j < k; ++j) m = std::max(m, xr[j]);
    T denom = T(0);
    for (int64_t j = 0; j < k; ++j) denom += std::exp(xr[j] - m);
    acc += (m + std::log(denom)) - xr[labels[static_cast<size_t>(r)]];
  }
  out[0] = acc / static_cast<T>(rows);
  attach_node<T>(out, "cross_entropy", {logits}, [logits, labels, k, rows](Tensor<T>& o) {
    Tensor<T> pl = logits;
    if (!pl.requires_grad()) return;
    const T g = o.grad_data()[0] / static_cast<T>(rows);
    const T* lv2 = pl.data();
    T* lg = pl.grad_data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = lv2 + r * k;
      T m = xr[0];
      for (int64_t j = 1; j < k; ++j) m = std::max(m, xr[j]);
      T denom = T(0);
      for (int64_t j = 0; j < k; ++j) denom += std::exp(xr[j] - m);
      T* gr = lg + r * k;
      for (int64_t j = 0; j < k; ++j) {
        T p = std::exp(xr[j] - m) / denom;
        if (j == labels[static_cast<size_t>(r)]) p -= T(1);
        gr[j] += g * p;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> masked_mean_rows(const Tensor<T>& x, const std::vector<uint8_t>& mask) {
  if (x.dim() < 2) throw ConfigError("masked_mean_rows: need rank >= 2");
  const int64_t d = x.size(-1);
  const int64_t n = x.size(-2);
  const int64_t groups = x.numel() / (n * d);
  if (static_cast<int64_t>(mask.size()) != groups * n) {
    throw ConfigError("masked_mean_rows: mask length " + std::to_string(mask.size()) +
                      " does not match " + std::to_string(groups * n) + " rows");
  }
  std::vector<int64_t> oshape(x.shape().begin(), x.shape().end() - 2);
  oshape.push_back(d);
  Tensor<T> out = Tensor<T>::zeros(std::move(oshape));
  auto counts = std::make_shared<std::vector<int64_t>>(groups, 0);
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t gidx = 0; gidx < groups; ++gidx) {
    int64_t cnt = 0;
    T* orow = ov + gidx * d;
    for (int64_t i = 0; i < n; ++i) {
      if (!mask[static_cast<size_t>(gidx * n + i)]) continue;
      ++cnt;
      const T* xr = xv + (gidx * n + i) * d;
      for (int64_t j = 0; j < d; ++j) orow[j] += xr[j];
    }
    (*counts)[static_cast<size_t>(gidx)] = cnt;
    if (cnt > 0) {
      const T inv = T(1) / static_cast<T>(cnt);
      for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
    }
  }
  attach_node<T>(out, "masked_mean_rows", {x}, [x, mask, counts, d, n, groups](Tensor<T>& o) {
    Tensor<T> px = x;
    if (!px.requires_grad()) return;
    const T* og = o.grad_data();
    T* xg = px.grad_data();
    for (int64_t gidx = 0; gidx < groups; ++gidx) {
      const int64_t cnt = (*counts)[static_cast<size_t>(gidx)];
      if (cnt == 0) continue;
      const T inv = T(1) / static_cast<T>(cnt);
      const T* orow = og + gidx * d;
      for (int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(gidx * n + i)]) continue;
        T* xr = xg + (gidx * n + i) * d;
        for (int64_t j = 0; j < d; ++j) xr[j] += orow[j] * inv;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Value-only helpers

template <typename T>
Tensor<T> linspace(T lo, T hi, int64_t n) {
  Tensor<T> t = Tensor<T>::zeros({n});
  if (n == 1) {
    t[0] = lo;
    return t;
  }
  const T step = (hi - lo) / static_cast<T>(n - 1);
  for (int64_t i = 0; i < n; ++i) t[i] = lo + step * static_cast<T>(i);
  return t;
}

template <typename T>
Tensor<T> rowmax_last_detached(const Tensor<T>& x) {
  const int64_t d = x.size(-1);
  const int64_t rows = x.numel() / d;
  std::vector<int64_t> oshape = x.shape();
  oshape.back() = 1;
  Tensor<T> out = Tensor<T>::zeros(std::move(oshape));
  const T* xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    T m = xv[r * d];
    for (int64_t j = 1; j < d; ++j) m = std::max(m, xv[r * d + j]);
    out[r] = m;
  }
  return out;
}

template <typename T>
T global_max(const Tensor<T>& x) {
  const T* xv = x.data();
  T m = xv[0];
  for (int64_t i = 1; i < x.numel(); ++i) m = std::max(m, xv[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define TNPKR_INSTANTIATE_OPS(T)                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                       \
  template Tensor<T> neg(const Tensor<T>&);                                            \
  template Tensor<T> square(const Tensor<T>&);                                         \
  template Tensor<T> exp_op(const Tensor<T>&);                                         \
  template Tensor<T> log_op(const Tensor<T>&);                                         \
  template Tensor<T> sqrt_op(const Tensor<T>&);                                        \
  template Tensor<T> relu(const Tensor<T>&);                                           \
  template Tensor<T> gelu(const Tensor<T>&);                                           \
  template Tensor<T> softplus_op(const Tensor<T>&);                                    \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                           \
  template Tensor<T> sum_last(const Tensor<T>&);                                       \
  template Tensor<T> add_bcast_last(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul_bcast_last(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> div_bcast_last(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> mul_rowvec(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> reshape(const Tensor<T>&, std::vector<int64_t>);                  \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                \
  template Tensor<T> concat_last(const std::vector<Tensor<T>>&);                       \
  template Tensor<T> slice_last(const Tensor<T>&, int64_t, int64_t);                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> matmul_reference(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                T);                                                    \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, RngStream&);              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int64_t>&);     \
  template Tensor<T> masked_mean_rows(const Tensor<T>&, const std::vector<uint8_t>&);  \
  template Tensor<T> linspace(T, T, int64_t);                                          \
  template Tensor<T> rowmax_last_detached(const Tensor<T>&);                           \
  template T global_max(const Tensor<T>&);

TNPKR_INSTANTIATE_OPS(float)
TNPKR_INSTANTIATE_OPS(double)

#undef TNPKR_INSTANTIATE_OPS

}  // namespace tnpkr
