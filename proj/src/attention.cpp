#include "tnpkr/attention.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <optional>

#include "tnpkr/memtrack.hpp"
#include "tnpkr/parallel.hpp"

namespace tnpkr {

namespace {

thread_local EngineStats t_last_stats;

class StatsScope {
 public:
  StatsScope() : start_(std::chrono::steady_clock::now()) {}
  ~StatsScope() {
    t_last_stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    t_last_stats.peak_bytes = scope_.peak_over_entry();
    t_last_stats.score_peak_bytes = scope_.score_peak_over_entry();
  }

 private:
  std::chrono::steady_clock::time_point start_;
  memtrack::Scope scope_;
};

struct AttnDims {
  int64_t bs = 1;
  int64_t n_q = 0;
  int64_t n_k = 0;
  int64_t d_qk = 0;
  int64_t d_v = 0;
  bool batched = false;
};

template <typename T>
AttnDims parse_dims(const AttentionInputs<T>& in) {
  AttnDims d;
  if (in.q.dim() == 3) {
    d.batched = true;
    d.bs = in.q.size(0);
  } else if (in.q.dim() != 2) {
    throw ConfigError("attention: queries must be rank 2 or 3, got " +
                      shape_str(in.q.shape()));
  }
  if (in.k.dim() != in.q.dim() || in.v.dim() != in.q.dim()) {
    throw ConfigError("attention: Q/K/V rank mismatch");
  }
  d.n_q = in.q.size(-2);
  d.n_k = in.k.size(-2);
  d.d_qk = in.q.size(-1);
  d.d_v = in.v.size(-1);
  if (in.k.size(-1) != d.d_qk) {
    throw ConfigError("attention: query dim " + std::to_string(d.d_qk) +
                      " does not match key dim " + std::to_string(in.k.size(-1)));
  }
  if (in.v.size(-2) != d.n_k) {
    throw ConfigError("attention: value count " + std::to_string(in.v.size(-2)) +
                      " does not match key count " + std::to_string(d.n_k));
  }
  if (d.batched && (in.k.size(0) != d.bs || in.v.size(0) != d.bs)) {
    throw ConfigError("attention: batch mismatch across Q/K/V");
  }
  if (!in.key_mask.empty() &&
      static_cast<int64_t>(in.key_mask.size()) != d.bs * d.n_k) {
    throw ConfigError("attention: key mask length " + std::to_string(in.key_mask.size()) +
                      ", expected " + std::to_string(d.bs * d.n_k));
  }
  return d;
}

// Value-only row slice of [n, ds] or [bs, n, ds] -> [rows, ds].
template <typename T>
Tensor<T> slice_rows_value(const Tensor<T>& s, int64_t b, int64_t row0, int64_t rows) {
  const int64_t ds = s.size(-1);
  const int64_t n = s.size(-2);
  Tensor<T> out = Tensor<T>::zeros({rows, ds});
  const T* sv = s.data() + (s.dim() == 3 ? b * n * ds : 0);
  std::memcpy(out.data(), sv + row0 * ds, sizeof(T) * static_cast<size_t>(rows * ds));
  return out;
}

}  // namespace

const EngineStats& last_engine_stats() { return t_last_stats; }

// ---------------------------------------------------------------------------
// Full attention (oracle)

template <typename T>
Tensor<T> apply_key_mask(const Tensor<T>& scores, const std::vector<uint8_t>& key_mask) {
  if (key_mask.empty()) return scores;
  const int64_t n_k = scores.size(-1);
  const int64_t rows = scores.numel() / n_k;
  const int64_t n_q = scores.size(-2);
  const int64_t batch = rows / n_q;
  if (static_cast<int64_t>(key_mask.size()) != batch * n_k) {
    throw ConfigError("apply_key_mask: mask length " + std::to_string(key_mask.size()) +
                      ", expected " + std::to_string(batch * n_k));
  }
  Tensor<T> out = Tensor<T>::zeros(scores.shape());
  const T* sv = scores.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t b = r / n_q;
    for (int64_t j = 0; j < n_k; ++j) {
      ov[r * n_k + j] = key_mask[static_cast<size_t>(b * n_k + j)]
                            ? sv[r * n_k + j]
                            : neg_inf_sentinel<T>();
    }
  }
  attach_node<T>(out, "apply_key_mask", {scores}, [scores, key_mask, n_k, rows, n_q](Tensor<T>& o) {
    Tensor<T> ps = scores;
    if (!ps.requires_grad()) return;
    const T* og = o.grad_data();
    T* sg = ps.grad_data();
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t b = r / n_q;
      for (int64_t j = 0; j < n_k; ++j) {
        if (key_mask[static_cast<size_t>(b * n_k + j)]) sg[r * n_k + j] += og[r * n_k + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> full_biased_attention(const AttentionInputs<T>& in, const Tensor<T>& bias) {
  const AttnDims d = parse_dims(in);
  StatsScope stats;
  Tensor<T> probs;
  {
    memtrack::ScoreRegion score_region;
    Tensor<T> scores = scale(matmul(in.q, transpose_last2(in.k)),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(d.d_qk))));
    if (bias.defined()) {
      if (bias.shape() != scores.shape()) {
        throw ConfigError("full_biased_attention: bias shape " + shape_str(bias.shape()) +
                          " does not match scores " + shape_str(scores.shape()));
      }
      scores = add(scores, bias);
    }
    scores = apply_key_mask(scores, in.key_mask);
    probs = softmax_rows(scores);
  }
  return matmul(probs, in.v);
}

template <typename T>
Tensor<T> full_biased_attention(const AttentionInputs<T>& in, const BiasSpec<T>* spec) {
  StatsScope stats;
  if (spec != nullptr && !spec->empty()) {
    if (!in.s_q.defined() || !in.s_k.defined()) {
      throw ConfigError("full_biased_attention: bias spec requires index sets");
    }
    Tensor<T> bias;
    {
      memtrack::ScoreRegion score_region;
      bias = combine_bias(*spec, in.s_q, in.s_k);
    }
    return full_biased_attention(in, bias);
  }
  return full_biased_attention(in, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Scan attention

namespace {

template <typename T>
Tensor<T> eval_bias_block(const BiasSpec<T>& spec, const Tensor<T>& s_q, const Tensor<T>& s_k,
                          int64_t b, int64_t q0, int64_t nq, int64_t k0, int64_t nk) {
  Tensor<T> sq = slice_rows_value(s_q, b, q0, nq);
  Tensor<T> sk = slice_rows_value(s_k, b, k0, nk);
  return combine_bias(spec, sq, sk);
}

template <typename T>
struct ScanSaved {
  std::shared_ptr<std::vector<double>> row_max;     // [bs*H*n_q]
  std::shared_ptr<std::vector<double>> normalizer;  // [bs*H*n_q]
};

}  // namespace

template <typename T>
Tensor<T> scan_attention(const AttentionInputs<T>& in, const BiasSpec<T>* spec_ptr,
                         const ScanConfig& cfg, int64_t heads) {
  const AttnDims dims = parse_dims(in);
  if (cfg.block_size < 1 || cfg.query_tile < 1) {
    throw ConfigError("scan_attention: block size and query tile must be >= 1");
  }
  if (dims.d_qk % heads != 0 || dims.d_v % heads != 0) {
    throw ConfigError("scan_attention: dims not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const bool has_bias = spec_ptr != nullptr && !spec_ptr->empty();
  if (has_bias && (!in.s_q.defined() || !in.s_k.defined())) {
    throw ConfigError("scan_attention: bias spec requires index sets");
  }
  StatsScope stats;

  const int64_t H = heads;
  const int64_t dk = dims.d_qk / H;
  const int64_t dv = dims.d_v / H;
  const int64_t tile = cfg.query_tile;
  const int64_t B = cfg.block_size;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  Tensor<T> out = Tensor<T>::zeros(
      dims.batched ? std::vector<int64_t>{dims.bs, dims.n_q, dims.d_v}
                   : std::vector<int64_t>{dims.n_q, dims.d_v});
  ScanSaved<T> saved{
      std::make_shared<std::vector<double>>(static_cast<size_t>(dims.bs * H * dims.n_q)),
      std::make_shared<std::vector<double>>(static_cast<size_t>(dims.bs * H * dims.n_q))};

  const T* qv = in.q.data();
  const T* kv = in.k.data();
  const T* vv = in.v.data();
  T* ov = out.data();
  const auto masked = [&](int64_t b, int64_t j) {
    return !in.key_mask.empty() && !in.key_mask[static_cast<size_t>(b * dims.n_k + j)];
  };

  {
    // Per-block score tile; the only O(B)-sized transient. Allocated once.
    memtrack::ScoreRegion score_region;
    std::vector<double, memtrack::TrackingAllocator<double>> x(
        static_cast<size_t>(tile * B));

    std::vector<double> row_max(static_cast<size_t>(H * tile));
    std::vector<double> norm(static_cast<size_t>(H * tile));
    std::vector<double> acc(static_cast<size_t>(H * tile * dv));

    for (int64_t b = 0; b < dims.bs; ++b) {
      for (int64_t q0 = 0; q0 < dims.n_q; q0 += tile) {
        const int64_t nq = std::min(tile, dims.n_q - q0);
        std::fill(row_max.begin(), row_max.end(), -std::numeric_limits<double>::infinity());
        std::fill(norm.begin(), norm.end(), 0.0);
        std::fill(acc.begin(), acc.end(), 0.0);

        for (int64_t k0 = 0; k0 < dims.n_k; k0 += B) {
          const int64_t nk = std::min(B, dims.n_k - k0);
          Tensor<T> bias;
          if (has_bias) {
            NoGradGuard ng;
            bias = eval_bias_block(*spec_ptr, in.s_q, in.s_k, b, q0, nq, k0, nk);
          }
          const T* bias_v = has_bias ? bias.data() : nullptr;
          for (int64_t h = 0; h < H; ++h) {
            for (int64_t i = 0; i < nq; ++i) {
              const T* qrow = qv + ((b * dims.n_q + q0 + i) * dims.d_qk) + h * dk;
              double block_max = -std::numeric_limits<double>::infinity();
              for (int64_t j = 0; j < nk; ++j) {
                if (masked(b, k0 + j)) continue;
                const T* krow = kv + ((b * dims.n_k + k0 + j) * dims.d_qk) + h * dk;
                double dot = 0;
                for (int64_t c = 0; c < dk; ++c) {
                  dot += static_cast<double>(qrow[c]) * static_cast<double>(krow[c]);
                }
                double s = dot * inv_sqrt_dk;
                if (bias_v) s += static_cast<double>(bias_v[i * nk + j]);
                x[static_cast<size_t>(i * nk + j)] = s;
                if (s > block_max) block_max = s;
              }
              if (!std::isfinite(block_max)) continue;  // no usable key in this block
              const int64_t st = h * tile + i;
              const double m_new = std::max(row_max[static_cast<size_t>(st)], block_max);
              const double rescale = std::exp(row_max[static_cast<size_t>(st)] - m_new);
              double* accrow = acc.data() + st * dv;
              for (int64_t c = 0; c < dv; ++c) accrow[c] *= rescale;
              double sum_f = 0;
              for (int64_t j = 0; j < nk; ++j) {
                if (masked(b, k0 + j)) continue;
                const double f = std::exp(x[static_cast<size_t>(i * nk + j)] - m_new);
                sum_f += f;
                const T* vrow = vv + ((b * dims.n_k + k0 + j) * dims.d_v) + h * dv;
                for (int64_t c = 0; c < dv; ++c) accrow[c] += f * static_cast<double>(vrow[c]);
              }
              norm[static_cast<size_t>(st)] = rescale * norm[static_cast<size_t>(st)] + sum_f;
              row_max[static_cast<size_t>(st)] = m_new;
            }
          }
        }

        for (int64_t h = 0; h < H; ++h) {
          for (int64_t i = 0; i < nq; ++i) {
            const int64_t st = h * tile + i;
            if (norm[static_cast<size_t>(st)] == 0.0) {
              throw DataError("scan_attention: all keys masked for query " +
                              std::to_string(q0 + i));
            }
            const double inv = 1.0 / norm[static_cast<size_t>(st)];
            T* orow = ov + ((b * dims.n_q + q0 + i) * dims.d_v) + h * dv;
            const double* accrow = acc.data() + st * dv;
            for (int64_t c = 0; c < dv; ++c) orow[c] = static_cast<T>(accrow[c] * inv);
            const size_t slot = static_cast<size_t>((b * H + h) * dims.n_q + q0 + i);
            (*saved.row_max)[slot] = row_max[static_cast<size_t>(st)];
            (*saved.normalizer)[slot] = norm[static_cast<size_t>(st)];
          }
        }
      }
    }
  }

  std::optional<BiasSpec<T>> spec_copy;
  if (has_bias) spec_copy = *spec_ptr;

  std::vector<Tensor<T>> parents = {in.q, in.k, in.v};
  if (has_bias) {
    ParamMap<T> bias_params;
    spec_copy->collect_params("bias", bias_params);
    for (auto& [name, t] : bias_params) {
      (void)name;
      parents.push_back(t);
    }
  }

  AttentionInputs<T> inputs = in;  // shared impls; keeps Q/K/V/s/mask alive
  attach_node<T>(
      out, "scan_attention", std::move(parents),
      [inputs, spec_copy, dims, H, dk, dv, tile, B, inv_sqrt_dk, saved](Tensor<T>& o) {
        Tensor<T> q = inputs.q, k = inputs.k, v = inputs.v;
        const T* qv2 = q.data();
        const T* kv2 = k.data();
        const T* vv2 = v.data();
        const T* ov2 = o.data();
        const T* og = o.grad_data();
        T* qg = q.requires_grad() ? q.grad_data() : nullptr;
        T* kg = k.requires_grad() ? k.grad_data() : nullptr;
        T* vg = v.requires_grad() ? v.grad_data() : nullptr;
        bool bias_grad = false;
        if (spec_copy) {
          ParamMap<T> bias_params;
          spec_copy->collect_params("bias", bias_params);
          for (auto& [name, t] : bias_params) {
            (void)name;
            bias_grad = bias_grad || t.requires_grad();
          }
        }
        const auto masked2 = [&](int64_t b, int64_t j) {
          return !inputs.key_mask.empty() &&
                 !inputs.key_mask[static_cast<size_t>(b * dims.n_k + j)];
        };

        memtrack::ScoreRegion score_region;
        std::vector<double, memtrack::TrackingAllocator<double>> dbias(
            spec_copy ? static_cast<size_t>(tile * B) : 0);
        std::vector<double> dsum(static_cast<size_t>(H * tile));

        for (int64_t b = 0; b < dims.bs; ++b) {
          for (int64_t q0 = 0; q0 < dims.n_q; q0 += tile) {
            const int64_t nq = std::min(tile, dims.n_q - q0);
            // d(output).output rowsums, fixed per tile.
            for (int64_t h = 0; h < H; ++h) {
              for (int64_t i = 0; i < nq; ++i) {
                const int64_t base = (b * dims.n_q + q0 + i) * dims.d_v + h * dv;
                double acc_d = 0;
                for (int64_t c = 0; c < dv; ++c) {
                  acc_d += static_cast<double>(og[base + c]) * static_cast<double>(ov2[base + c]);
                }
                dsum[static_cast<size_t>(h * tile + i)] = acc_d;
              }
            }
            for (int64_t k0 = 0; k0 < dims.n_k; k0 += B) {
              const int64_t nk = std::min(B, dims.n_k - k0);
              Tensor<T> bias;
              if (spec_copy) {
                NoGradGuard ng;
                bias = eval_bias_block(*spec_copy, inputs.s_q, inputs.s_k, b, q0, nq, k0, nk);
                std::fill(dbias.begin(), dbias.end(), 0.0);
              }
              const T* bias_v = spec_copy ? bias.data() : nullptr;
              for (int64_t h = 0; h < H; ++h) {
                for (int64_t i = 0; i < nq; ++i) {
                  const size_t slot = static_cast<size_t>((b * H + h) * dims.n_q + q0 + i);
                  const double m_final = (*saved.row_max)[slot];
                  const double inv_l = 1.0 / (*saved.normalizer)[slot];
                  const T* qrow = qv2 + ((b * dims.n_q + q0 + i) * dims.d_qk) + h * dk;
                  const T* ogrow = og + (b * dims.n_q + q0 + i) * dims.d_v + h * dv;
                  const double d_i = dsum[static_cast<size_t>(h * tile + i)];
                  for (int64_t j = 0; j < nk; ++j) {
                    if (masked2(b, k0 + j)) continue;
                    const T* krow = kv2 + ((b * dims.n_k + k0 + j) * dims.d_qk) + h * dk;
                    double dot = 0;
                    for (int64_t c = 0; c < dk; ++c) {
                      dot += static_cast<double>(qrow[c]) * static_cast<double>(krow[c]);
                    }
                    double s = dot * inv_sqrt_dk;
                    if (bias_v) s += static_cast<double>(bias_v[i * nk + j]);
                    const double p = std::exp(s - m_final) * inv_l;
                    const T* vrow = vv2 + ((b * dims.n_k + k0 + j) * dims.d_v) + h * dv;
                    double dp = 0;
                    for (int64_t c = 0; c < dv; ++c) {
                      dp += static_cast<double>(ogrow[c]) * static_cast<double>(vrow[c]);
                    }
                    const double ds = p * (dp - d_i);
                    if (vg) {
                      T* vgrow = vg + ((b * dims.n_k + k0 + j) * dims.d_v) + h * dv;
                      for (int64_t c = 0; c < dv; ++c) {
                        vgrow[c] += static_cast<T>(p * static_cast<double>(ogrow[c]));
                      }
                    }
                    if (qg) {
                      T* qgrow = qg + ((b * dims.n_q + q0 + i) * dims.d_qk) + h * dk;
                      for (int64_t c = 0; c < dk; ++c) {
                        qgrow[c] += static_cast<T>(ds * inv_sqrt_dk * static_cast<double>(krow[c]));
                      }
                    }
                    if (kg) {
                      T* kgrow = kg + ((b * dims.n_k + k0 + j) * dims.d_qk) + h * dk;
                      for (int64_t c = 0; c < dk; ++c) {
                        kgrow[c] += static_cast<T>(ds * inv_sqrt_dk * static_cast<double>(qrow[c]));
                      }
                    }
                    if (bias_grad) dbias[static_cast<size_t>(i * nk + j)] += ds;
                  }
                }
              }
              if (bias_grad) {
                // Re-evaluate the block bias on its own tape and push the
                // accumulated upstream gradient through it.
                const bool prev = grad_enabled();
                set_grad_enabled(true);
                Tensor<T> bias_t =
                    eval_bias_block(*spec_copy, inputs.s_q, inputs.s_k, b, q0, nq, k0, nk);
                set_grad_enabled(prev);
                Tensor<T> seed = Tensor<T>::zeros({nq, nk});
                for (int64_t i = 0; i < nq; ++i) {
                  for (int64_t j = 0; j < nk; ++j) {
                    seed[i * nk + j] = static_cast<T>(dbias[static_cast<size_t>(i * nk + j)]);
                  }
                }
                run_backward(bias_t, &seed);
              }
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Performer

template <typename T>
FeatureMap<T> make_feature_map(int64_t d_k, int64_t r, uint64_t seed) {
  if (r < 1 || d_k < 1) throw ConfigError("make_feature_map: need r >= 1 and d_k >= 1");
  RngStream rng(seed);
  FeatureMap<T> fm;
  fm.r = r;
  fm.w = Tensor<T>::zeros({r, d_k});
  const int64_t n_blocks = (r + d_k - 1) / d_k;
  std::vector<double> block(static_cast<size_t>(d_k * d_k));
  int64_t row_out = 0;
  for (int64_t blk = 0; blk < n_blocks && row_out < r; ++blk) {
    for (auto& g : block) g = rng.normal();
    // Gram-Schmidt on the rows.
    for (int64_t i = 0; i < d_k; ++i) {
      double* ri = block.data() + i * d_k;
      for (int64_t p = 0; p < i; ++p) {
        const double* rp = block.data() + p * d_k;
        double dot = 0;
        for (int64_t c = 0; c < d_k; ++c) dot += ri[c] * rp[c];
        for (int64_t c = 0; c < d_k; ++c) ri[c] -= dot * rp[c];
      }
      double nrm = 0;
      for (int64_t c = 0; c < d_k; ++c) nrm += ri[c] * ri[c];
      nrm = std::sqrt(nrm);
      if (nrm < 1e-12) throw NumericError("make_feature_map: degenerate Gaussian block");
      for (int64_t c = 0; c < d_k; ++c) ri[c] /= nrm;
    }
    // Scale rows back to chi-distributed norms so the marginals stay Gaussian.
    for (int64_t i = 0; i < d_k && row_out < r; ++i, ++row_out) {
      double sq = 0;
      for (int64_t c = 0; c < d_k; ++c) {
        const double g = rng.normal();
        sq += g * g;
      }
      const double target = std::sqrt(sq);
      for (int64_t c = 0; c < d_k; ++c) {
        fm.w[row_out * d_k + c] = static_cast<T>(block[static_cast<size_t>(i * d_k + c)] * target);
      }
    }
  }
  return fm;
}

template <typename T>
Tensor<T> performer_features(const Tensor<T>& x_scaled, const FeatureMap<T>& fm) {
  Tensor<T> z = matmul(x_scaled, transpose_last2(fm.w));
  Tensor<T> half_sq = scale(sum_last(square(x_scaled)), T(0.5));
  Tensor<T> e = add_bcast_last(z, neg(half_sq));
  return scale(exp_op(e), static_cast<T>(1.0 / std::sqrt(static_cast<double>(fm.r))));
}

template <typename T>
Tensor<T> performer_attention(const AttentionInputs<T>& in, const FeatureMap<T>& fm) {
  const AttnDims d = parse_dims(in);
  if (fm.w.size(-1) != d.d_qk) {
    throw ConfigError("performer_attention: feature map built for d_k " +
                      std::to_string(fm.w.size(-1)) + ", inputs have " +
                      std::to_string(d.d_qk));
  }
  StatsScope stats;
  const T scl = static_cast<T>(std::pow(static_cast<double>(d.d_qk), -0.25));
  Tensor<T> qs = scale(in.q, scl);
  Tensor<T> ks = scale(in.k, scl);

  // Stabilizers are constants w.r.t. the tape: a per-row shift for queries and
  // a global shift for keys cancel after normalization.
  Tensor<T> zq = matmul(qs, transpose_last2(fm.w));
  Tensor<T> hq = scale(sum_last(square(qs)), T(0.5));
  Tensor<T> eq = add_bcast_last(zq, neg(hq));
  Tensor<T> stab_q = rowmax_last_detached(eq);
  Tensor<T> phi_q = exp_op(add_bcast_last(eq, neg(stab_q)));

  Tensor<T> zk = matmul(ks, transpose_last2(fm.w));
  Tensor<T> hk = scale(sum_last(square(ks)), T(0.5));
  Tensor<T> ek = add_bcast_last(zk, neg(hk));
  const T stab_k = global_max(ek);
  Tensor<T> phi_k = exp_op(add_scalar(ek, -stab_k));

  if (!in.key_mask.empty()) {
    std::vector<int64_t> mshape = phi_k.shape();
    mshape.back() = 1;
    Tensor<T> m01 = Tensor<T>::zeros(mshape);
    for (size_t i = 0; i < in.key_mask.size(); ++i) m01[static_cast<int64_t>(i)] = in.key_mask[i] ? T(1) : T(0);
    phi_k = mul_bcast_last(phi_k, m01);
  }

  Tensor<T> kv = matmul(transpose_last2(phi_k), in.v);  // [r, d_v]
  Tensor<T> numer = matmul(phi_q, kv);
  std::vector<int64_t> ones_shape = phi_k.shape();
  ones_shape.back() = 1;
  Tensor<T> key_sum = matmul(transpose_last2(phi_k), Tensor<T>::ones(ones_shape));  // [r, 1]
  Tensor<T> denom = matmul(phi_q, key_sum);  // [n_q, 1]
  for (int64_t i = 0; i < denom.numel(); ++i) {
    if (!(denom[i] > T(1e-30))) {
      throw NumericError(
          "performer_attention: normalizer underflow; use 64-bit precision or a larger "
          "feature count");
    }
  }
  return div_bcast_last(numer, denom);
}

// ---------------------------------------------------------------------------
// Deep kernel attention

template <typename T>
Tensor<T> Mlp<T>::apply(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (size_t i = 0; i < weights.size(); ++i) {
    h = linear(h, weights[i], biases[i]);
    if (i + 1 < weights.size()) h = gelu(h);
  }
  return h;
}

template <typename T>
Mlp<T> Mlp<T>::make(int64_t d_in, int64_t d_hidden, int64_t d_out, RngStream& rng) {
  Mlp<T> m;
  const auto layer = [&](int64_t in_w, int64_t out_w) {
    m.weights.push_back(Tensor<T>::randn({in_w, out_w}, rng,
                                         static_cast<T>(1.0 / std::sqrt(static_cast<double>(in_w))),
                                         true));
    m.biases.push_back(Tensor<T>::zeros({out_w}, true));
  };
  layer(d_in, d_hidden);
  layer(d_hidden, d_out);
  return m;
}

template <typename T>
void Mlp<T>::collect_params(const std::string& prefix, ParamMap<T>& out) const {
  for (size_t i = 0; i < weights.size(); ++i) {
    out.emplace(prefix + ".w" + std::to_string(i), weights[i]);
    out.emplace(prefix + ".b" + std::to_string(i), biases[i]);
  }
}

template <typename T>
Tensor<T> dka_attention(const AttentionInputs<T>& in, const DkaParams<T>& p) {
  const AttnDims d = parse_dims(in);
  if (!in.s_q.defined() || !in.s_k.defined()) {
    throw ConfigError("dka_attention: index sets are required");
  }
  if (in.s_q.size(-2) != d.n_q || in.s_k.size(-2) != d.n_k) {
    throw ConfigError("dka_attention: index set sizes do not match Q/K");
  }
  StatsScope stats;
  Tensor<T> fq = p.phi.apply(concat_last<T>({in.q, in.s_q}));
  Tensor<T> fk = p.phi.apply(concat_last<T>({in.k, in.s_k}));
  Tensor<T> pv = p.psi.apply(in.v);
  if (!in.key_mask.empty()) {
    std::vector<int64_t> mshape = fk.shape();
    mshape.back() = 1;
    Tensor<T> m01 = Tensor<T>::zeros(mshape);
    for (size_t i = 0; i < in.key_mask.size(); ++i) m01[static_cast<int64_t>(i)] = in.key_mask[i] ? T(1) : T(0);
    fk = mul_bcast_last(fk, m01);
  }
  Tensor<T> kv = matmul(transpose_last2(fk), pv);
  Tensor<T> raw = matmul(fq, kv);
  if (!p.apply_ln) return raw;
  return layer_norm(raw, p.ln_gain, p.ln_shift, T(1e-5));
}

// ---------------------------------------------------------------------------
// Multi-head wrapper

AttentionVariant attention_variant_from_string(const std::string& name) {
  if (name == "full") return AttentionVariant::full;
  if (name == "scan") return AttentionVariant::scan;
  if (name == "performer") return AttentionVariant::performer;
  if (name == "dka") return AttentionVariant::dka;
  throw ConfigError("unknown attention variant '" + name + "'");
}

std::string attention_variant_to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::full: return "full";
    case AttentionVariant::scan: return "scan";
    case AttentionVariant::performer: return "performer";
    case AttentionVariant::dka: return "dka";
  }
  return "?";
}

template <typename T>
MhaParams<T> MhaParams<T>::make(int64_t d_model, RngStream& rng) {
  MhaParams<T> p;
  const T std0 = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_model)));
  p.wq = Tensor<T>::randn({d_model, d_model}, rng, std0, true);
  p.bq = Tensor<T>::zeros({d_model}, true);
  p.wk = Tensor<T>::randn({d_model, d_model}, rng, std0, true);
  p.bk = Tensor<T>::zeros({d_model}, true);
  p.wv = Tensor<T>::randn({d_model, d_model}, rng, std0, true);
  p.bv = Tensor<T>::zeros({d_model}, true);
  p.wo = Tensor<T>::randn({d_model, d_model}, rng, std0, true);
  p.bo = Tensor<T>::zeros({d_model}, true);
  return p;
}

template <typename T>
void MhaParams<T>::collect_params(const std::string& prefix, ParamMap<T>& out) const {
  out.emplace(prefix + ".wq", wq);
  out.emplace(prefix + ".bq", bq);
  out.emplace(prefix + ".wk", wk);
  out.emplace(prefix + ".bk", bk);
  out.emplace(prefix + ".wv", wv);
  out.emplace(prefix + ".bv", bv);
  out.emplace(prefix + ".wo", wo);
  out.emplace(prefix + ".bo", bo);
}

template <typename T>
Tensor<T> multi_head_attention(AttentionVariant variant, const Tensor<T>& queries,
                               const Tensor<T>& keys_values,
                               const std::vector<uint8_t>& key_mask, const Tensor<T>& s_q,
                               const Tensor<T>& s_k, const MhaParams<T>& p, int64_t heads,
                               const MhaContext<T>& ctx) {
  const int64_t d_model = queries.size(-1);
  if (d_model % heads != 0) {
    throw ConfigError("multi_head_attention: d_model " + std::to_string(d_model) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const int64_t dk = d_model / heads;
  Tensor<T> q = linear(queries, p.wq, p.bq);
  Tensor<T> k = linear(keys_values, p.wk, p.bk);
  Tensor<T> v = linear(keys_values, p.wv, p.bv);

  Tensor<T> ctx_out;
  switch (variant) {
    case AttentionVariant::scan: {
      AttentionInputs<T> in{q, k, v, key_mask, s_q, s_k};
      ctx_out = scan_attention(in, ctx.bias, ctx.scan, heads);
      break;
    }
    case AttentionVariant::full: {
      Tensor<T> bias;
      if (ctx.bias != nullptr && !ctx.bias->empty()) {
        if (!s_q.defined() || !s_k.defined()) {
          throw ConfigError("multi_head_attention: bias spec requires index sets");
        }
        memtrack::ScoreRegion score_region;
        bias = combine_bias(*ctx.bias, s_q, s_k);
      }
      std::vector<Tensor<T>> parts;
      for (int64_t h = 0; h < heads; ++h) {
        AttentionInputs<T> in{slice_last(q, h * dk, dk), slice_last(k, h * dk, dk),
                              slice_last(v, h * dk, dk), key_mask, s_q, s_k};
        parts.push_back(full_biased_attention(in, bias));
      }
      ctx_out = heads == 1 ? parts[0] : concat_last(parts);
      break;
    }
    case AttentionVariant::performer: {
      if (ctx.feature_map == nullptr) {
        throw ConfigError("multi_head_attention: performer variant needs a feature map");
      }
      std::vector<Tensor<T>> parts;
      for (int64_t h = 0; h < heads; ++h) {
        AttentionInputs<T> in{slice_last(q, h * dk, dk), slice_last(k, h * dk, dk),
                              slice_last(v, h * dk, dk), key_mask, Tensor<T>(), Tensor<T>()};
        parts.push_back(performer_attention(in, *ctx.feature_map));
      }
      ctx_out = heads == 1 ? parts[0] : concat_last(parts);
      break;
    }
    case AttentionVariant::dka: {
      if (ctx.dka == nullptr) {
        throw ConfigError("multi_head_attention: dka variant needs projection parameters");
      }
      std::vector<Tensor<T>> parts;
      for (int64_t h = 0; h < heads; ++h) {
        AttentionInputs<T> in{slice_last(q, h * dk, dk), slice_last(k, h * dk, dk),
                              slice_last(v, h * dk, dk), key_mask, s_q, s_k};
        parts.push_back(dka_attention(in, *ctx.dka));
      }
      ctx_out = heads == 1 ? parts[0] : concat_last(parts);
      break;
    }
  }
  return linear(ctx_out, p.wo, p.bo);
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define TNPKR_INSTANTIATE_ATTENTION(T)                                                       \
  template Tensor<T> apply_key_mask(const Tensor<T>&, const std::vector<uint8_t>&);          \
  template Tensor<T> full_biased_attention(const AttentionInputs<T>&, const Tensor<T>&);     \
  template Tensor<T> full_biased_attention(const AttentionInputs<T>&, const BiasSpec<T>*);   \
  template Tensor<T> scan_attention(const AttentionInputs<T>&, const BiasSpec<T>*,           \
                                    const ScanConfig&, int64_t);                             \
  template FeatureMap<T> make_feature_map(int64_t, int64_t, uint64_t);                       \
  template Tensor<T> performer_features(const Tensor<T>&, const FeatureMap<T>&);             \
  template Tensor<T> performer_attention(const AttentionInputs<T>&, const FeatureMap<T>&);   \
  template struct Mlp<T>;                                                                    \
  template Tensor<T> dka_attention(const AttentionInputs<T>&, const DkaParams<T>&);          \
  template struct MhaParams<T>;                                                              \
  template Tensor<T> multi_head_attention(AttentionVariant, const Tensor<T>&,                \
                                          const Tensor<T>&, const std::vector<uint8_t>&,     \
                                          const Tensor<T>&, const Tensor<T>&,                \
                                          const MhaParams<T>&, int64_t,                      \
                                          const MhaContext<T>&);

TNPKR_INSTANTIATE_ATTENTION(float)
TNPKR_INSTANTIATE_ATTENTION(double)

#undef TNPKR_INSTANTIATE_ATTENTION

}  // namespace tnpkr
