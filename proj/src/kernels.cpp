#include "tnpkr/kernels.hpp"

#include <cmath>

namespace tnpkr {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kSqrt3 = 1.7320508075688772935;

template <typename T>
void check_positive(const char* op, const char* name, T v) {
  if (!(v > T(0))) {
    throw ConfigError(std::string(op) + ": " + name + " must be positive, got " +
                      std::to_string(static_cast<double>(v)));
  }
}
}  // namespace

template <typename T>
T rbf_kernel(T d, T sigma2, T ell) {
  check_positive("rbf", "lengthscale", ell);
  return sigma2 * std::exp(-(d * d) / (T(2) * ell));
}

template <typename T>
T periodic_kernel(T d, T ell, T p) {
  check_positive("periodic", "lengthscale", ell);
  check_positive("periodic", "period", p);
  const T s = std::sin(static_cast<T>(kPi) * d / p);
  return std::exp(T(-2) * s * s / (ell * ell));
}

template <typename T>
T matern32_kernel(T d, T ell) {
  check_positive("matern32", "lengthscale", ell);
  const T r = static_cast<T>(kSqrt3) * d / ell;
  return (T(1) + r) * std::exp(-r);
}

template <typename T>
T causal_temporal(T base_value, T t_q, T t_k) {
  return t_k <= t_q ? base_value : neg_inf_sentinel<T>();
}

template <typename T>
TisaParams<T> TisaParams<T>::init(int64_t n_basis, RngStream& rng) {
  if (n_basis < 1) throw ConfigError("tisa: need at least one basis function");
  TisaParams<T> p;
  p.a = Tensor<T>::randn({n_basis}, rng, T(0.1), true);
  RngStream rb = rng.split("tisa_b");
  p.b = Tensor<T>::zeros({n_basis}, true);
  for (int64_t i = 0; i < n_basis; ++i) p.b[i] = static_cast<T>(rb.normal(1.0, 0.1));
  p.c = Tensor<T>::zeros({n_basis}, true);
  if (n_basis == 1) {
    p.c[0] = T(0);
  } else {
    for (int64_t i = 0; i < n_basis; ++i) {
      p.c[i] = static_cast<T>(2.0 * static_cast<double>(i) / static_cast<double>(n_basis - 1));
    }
  }
  return p;
}

template <typename T>
Tensor<T> tisa_bias(const Tensor<T>& dist, const TisaParams<T>& params) {
  const int64_t n = dist.numel();
  const int64_t S = params.n_basis();
  Tensor<T> out = Tensor<T>::zeros(dist.shape());
  const T* dv = dist.data();
  const T* av = params.a.data();
  const T* bv = params.b.data();
  const T* cv = params.c.data();
  T* ov = out.data();
  for (int64_t i = 0; i < n; ++i) {
    T acc = T(0);
    for (int64_t s = 0; s < S; ++s) {
      const T u = dv[i] - cv[s];
      acc += av[s] * std::exp(-std::abs(bv[s]) * u * u);
    }
    ov[i] = acc;
  }
  Tensor<T> a = params.a, b = params.b, c = params.c;
  attach_node<T>(out, "tisa_bias", {a, b, c, dist}, [a, b, c, dist, n, S](Tensor<T>& o) {
    Tensor<T> pa = a, pb = b, pc = c;
    const T* og = o.grad_data();
    const T* dv2 = dist.data();
    const T* av2 = pa.data();
    const T* bv2 = pb.data();
    const T* cv2 = pc.data();
    T* ga = pa.requires_grad() ? pa.grad_data() : nullptr;
    T* gb = pb.requires_grad() ? pb.grad_data() : nullptr;
    T* gc = pc.requires_grad() ? pc.grad_data() : nullptr;
    for (int64_t s = 0; s < S; ++s) {
      const T as = av2[s], bs = bv2[s], cs = cv2[s];
      const T absb = std::abs(bs);
      const T sgnb = bs > T(0) ? T(1) : (bs < T(0) ? T(-1) : T(0));
      T acc_a = T(0), acc_b = T(0), acc_c = T(0);
      for (int64_t i = 0; i < n; ++i) {
        const T u = dv2[i] - cs;
        const T e = std::exp(-absb * u * u);
        const T g = og[i];
        acc_a += g * e;
        acc_b += g * as * e * (-sgnb * u * u);
        acc_c += g * as * e * (T(2) * absb * u);
      }
      if (ga) ga[s] += acc_a;
      if (gb) gb[s] += acc_b;
      if (gc) gc[s] += acc_c;
    }
  });
  return out;
}

template <typename T>
Tensor<T> pairwise_distance(const Tensor<T>& s_q, const Tensor<T>& s_k,
                            const std::vector<int64_t>& components) {
  if (s_q.dim() < 2 || s_k.dim() < 2) {
    throw ConfigError("pairwise_distance: index sets must be rank >= 2");
  }
  const int64_t ds = s_q.size(-1);
  if (s_k.size(-1) != ds) {
    throw ConfigError("pairwise_distance: component count mismatch " +
                      shape_str(s_q.shape()) + " vs " + shape_str(s_k.shape()));
  }
  std::vector<int64_t> comps = components;
  if (comps.empty()) {
    for (int64_t c = 0; c < ds; ++c) comps.push_back(c);
  }
  for (int64_t c : comps) {
    if (c < 0 || c >= ds) {
      throw ConfigError("pairwise_distance: selector " + std::to_string(c) +
                        " out of range for index set with " + std::to_string(ds) +
                        " components");
    }
  }
  const int64_t n_q = s_q.size(-2);
  const int64_t n_k = s_k.size(-2);
  const int64_t batch = s_q.numel() / (n_q * ds);
  if (s_k.numel() / (n_k * ds) != batch) {
    throw ConfigError("pairwise_distance: batch mismatch " + shape_str(s_q.shape()) +
                      " vs " + shape_str(s_k.shape()));
  }
  std::vector<int64_t> oshape(s_q.shape().begin(), s_q.shape().end() - 1);
  oshape.push_back(n_k);
  Tensor<T> out = Tensor<T>::zeros(std::move(oshape));
  const T* qv = s_q.data();
  const T* kv = s_k.data();
  T* ov = out.data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* qb = qv + bi * n_q * ds;
    const T* kb = kv + bi * n_k * ds;
    T* ob = ov + bi * n_q * n_k;
    for (int64_t i = 0; i < n_q; ++i) {
      for (int64_t j = 0; j < n_k; ++j) {
        T sq = T(0);
        for (int64_t c : comps) {
          const T diff = qb[i * ds + c] - kb[j * ds + c];
          sq += diff * diff;
        }
        ob[i * n_k + j] = std::sqrt(sq);
      }
    }
  }
  return out;
}

BiasKernel bias_kernel_from_string(const std::string& name) {
  if (name == "tisa") return BiasKernel::tisa;
  if (name == "rbf") return BiasKernel::rbf;
  if (name == "periodic") return BiasKernel::periodic;
  if (name == "matern32") return BiasKernel::matern32;
  throw ConfigError("unknown bias kernel '" + name + "'");
}

std::string bias_kernel_to_string(BiasKernel k) {
  switch (k) {
    case BiasKernel::tisa: return "tisa";
    case BiasKernel::rbf: return "rbf";
    case BiasKernel::periodic: return "periodic";
    case BiasKernel::matern32: return "matern32";
  }
  return "?";
}

namespace {

// out = alpha[idx] * x, differentiable in both.
template <typename T>
Tensor<T> scale_by_coeff(const Tensor<T>& x, const Tensor<T>& alpha, int64_t idx) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T a = alpha[idx];
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) ov[i] = a * xv[i];
  attach_node<T>(out, "scale_by_coeff", {x, alpha}, [x, alpha, idx](Tensor<T>& o) {
    Tensor<T> px = x, pa = alpha;
    const T* og = o.grad_data();
    if (px.requires_grad()) {
      const T a2 = pa[idx];
      T* xg = px.grad_data();
      for (int64_t i = 0; i < px.numel(); ++i) xg[i] += a2 * og[i];
    }
    if (pa.requires_grad()) {
      const T* xv2 = px.data();
      T acc = T(0);
      for (int64_t i = 0; i < px.numel(); ++i) acc += og[i] * xv2[i];
      pa.grad_data()[idx] += acc;
    }
  });
  return out;
}

// Fixed-form kernel matrices from distances, parameterized in log space.
template <typename T>
Tensor<T> kernel_matrix(BiasKernel kind, const Tensor<T>& dist, const Tensor<T>& log_params) {
  Tensor<T> out = Tensor<T>::zeros(dist.shape());
  const T* dv = dist.data();
  T* ov = out.data();
  const int64_t n = dist.numel();
  switch (kind) {
    case BiasKernel::rbf: {
      const T s2 = std::exp(log_params[0]);
      const T ell = std::exp(log_params[1]);
      for (int64_t i = 0; i < n; ++i) ov[i] = rbf_kernel(dv[i], s2, ell);
      break;
    }
    case BiasKernel::periodic: {
      const T ell = std::exp(log_params[0]);
      const T p = std::exp(log_params[1]);
      for (int64_t i = 0; i < n; ++i) ov[i] = periodic_kernel(dv[i], ell, p);
      break;
    }
    case BiasKernel::matern32: {
      const T ell = std::exp(log_params[0]);
      for (int64_t i = 0; i < n; ++i) ov[i] = matern32_kernel(dv[i], ell);
      break;
    }
    case BiasKernel::tisa:
      throw ConfigError("kernel_matrix: tisa handled separately");
  }
  attach_node<T>(out, "kernel_matrix", {log_params, dist},
                 [kind, dist, log_params, n](Tensor<T>& o) {
                   Tensor<T> plp = log_params;
                   if (!plp.requires_grad()) return;
                   const T* og = o.grad_data();
                   const T* ov2 = o.data();
                   const T* dv2 = dist.data();
                   T* g = plp.grad_data();
                   switch (kind) {
                     case BiasKernel::rbf: {
                       const T ell = std::exp(plp[1]);
                       T g0 = T(0), g1 = T(0);
                       for (int64_t i = 0; i < n; ++i) {
                         g0 += og[i] * ov2[i];
                         g1 += og[i] * ov2[i] * (dv2[i] * dv2[i] / (T(2) * ell));
                       }
                       g[0] += g0;
                       g[1] += g1;
                       break;
                     }
                     case BiasKernel::periodic: {
                       const T ell = std::exp(plp[0]);
                       const T p = std::exp(plp[1]);
                       T g0 = T(0), g1 = T(0);
                       for (int64_t i = 0; i < n; ++i) {
                         const T u = static_cast<T>(kPi) * dv2[i] / p;
                         const T s = std::sin(u), c = std::cos(u);
                         g0 += og[i] * ov2[i] * (T(4) * s * s / (ell * ell));
                         g1 += og[i] * ov2[i] * (T(4) * s * c * u / (ell * ell));
                       }
                       g[0] += g0;
                       g[1] += g1;
                       break;
                     }
                     case BiasKernel::matern32: {
                       const T ell = std::exp(plp[0]);
                       T g0 = T(0);
                       for (int64_t i = 0; i < n; ++i) {
                         const T r = static_cast<T>(kSqrt3) * dv2[i] / ell;
                         g0 += og[i] * (r * r * std::exp(-r));
                       }
                       g[0] += g0;
                       break;
                     }
                     case BiasKernel::tisa:
                       break;
                   }
                 });
  return out;
}

}  // namespace

template <typename T>
void BiasSpec<T>::collect_params(const std::string& prefix, ParamMap<T>& out) const {
  out.emplace(prefix + ".alpha", alpha);
  for (size_t i = 0; i < terms.size(); ++i) {
    const auto& t = terms[i];
    const std::string p = prefix + ".term" + std::to_string(i);
    if (t.kernel == BiasKernel::tisa) {
      out.emplace(p + ".a", t.tisa.a);
      out.emplace(p + ".b", t.tisa.b);
      out.emplace(p + ".c", t.tisa.c);
    } else {
      out.emplace(p + ".log_params", t.log_params);
    }
  }
}

template <typename T>
Tensor<T> combine_bias(const BiasSpec<T>& spec, const Tensor<T>& s_q, const Tensor<T>& s_k) {
  if (spec.terms.empty()) {
    std::vector<int64_t> oshape(s_q.shape().begin(), s_q.shape().end() - 1);
    oshape.push_back(s_k.size(-2));
    return Tensor<T>::zeros(std::move(oshape));
  }
  if (spec.alpha.numel() != static_cast<int64_t>(spec.terms.size())) {
    throw ConfigError("combine_bias: alpha length " + std::to_string(spec.alpha.numel()) +
                      " does not match " + std::to_string(spec.terms.size()) + " terms");
  }
  Tensor<T> total;
  for (size_t i = 0; i < spec.terms.size(); ++i) {
    const auto& term = spec.terms[i];
    Tensor<T> dist = pairwise_distance(s_q, s_k, term.components);
    Tensor<T> mat = term.kernel == BiasKernel::tisa ? tisa_bias(dist, term.tisa)
                                                    : kernel_matrix(term.kernel, dist, term.log_params);
    Tensor<T> weighted = scale_by_coeff(mat, spec.alpha, static_cast<int64_t>(i));
    total = total.defined() ? add(total, weighted) : weighted;
  }
  return total;
}

template <typename T>
BiasSpec<T> default_tisa_spec(RngStream& rng, int64_t n_basis) {
  BiasSpec<T> spec;
  BiasTerm<T> term;
  term.kernel = BiasKernel::tisa;
  RngStream r = rng.split("tisa_init");
  term.tisa = TisaParams<T>::init(n_basis, r);
  spec.terms.push_back(std::move(term));
  spec.alpha = Tensor<T>::zeros({1}, true);
  return spec;
}

#define TNPKR_INSTANTIATE_KERNELS(T)                                                      \
  template T rbf_kernel(T, T, T);                                                        \
  template T periodic_kernel(T, T, T);                                                   \
  template T matern32_kernel(T, T);                                                      \
  template T causal_temporal(T, T, T);                                                   \
  template struct TisaParams<T>;                                                         \
  template Tensor<T> tisa_bias(const Tensor<T>&, const TisaParams<T>&);                  \
  template Tensor<T> pairwise_distance(const Tensor<T>&, const Tensor<T>&,               \
                                       const std::vector<int64_t>&);                     \
  template struct BiasSpec<T>;                                                           \
  template Tensor<T> combine_bias(const BiasSpec<T>&, const Tensor<T>&, const Tensor<T>&); \
  template BiasSpec<T> default_tisa_spec(RngStream&, int64_t);

TNPKR_INSTANTIATE_KERNELS(float)
TNPKR_INSTANTIATE_KERNELS(double)

#undef TNPKR_INSTANTIATE_KERNELS

}  // namespace tnpkr
