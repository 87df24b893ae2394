#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tnpkr/kernels.hpp"
#include "tnpkr/ops.hpp"
#include "tnpkr/tensor.hpp"

namespace tnpkr {

// Inputs accept [n, d] or [batch, n, d]; a missing mask means every key is
// valid, otherwise it holds batch*n_k entries with 1 = attend.
template <typename T>
struct AttentionInputs {
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> v;
  std::vector<uint8_t> key_mask;
  Tensor<T> s_q;  // optional index sets, [.., n, ds]
  Tensor<T> s_k;
};

struct ScanConfig {
  int64_t block_size = 128;
  int64_t query_tile = 128;
};

// Wall time and tracked allocation peaks for the most recent engine call on
// this thread.
struct EngineStats {
  double seconds = 0;
  std::size_t peak_bytes = 0;
  std::size_t score_peak_bytes = 0;
};
const EngineStats& last_engine_stats();

// Reference engine: softmax(QK^T/sqrt(d_k) + bias) V with the bias matrix
// materialized in full. Single head; this is the oracle the scan engine is
// checked against.
template <typename T>
Tensor<T> full_biased_attention(const AttentionInputs<T>& in, const Tensor<T>& bias);
template <typename T>
Tensor<T> full_biased_attention(const AttentionInputs<T>& in,
                                const BiasSpec<T>* spec = nullptr);

// Sets masked-out score entries to the sentinel; pass-through elsewhere.
template <typename T>
Tensor<T> apply_key_mask(const Tensor<T>& scores, const std::vector<uint8_t>& key_mask);

// Streaming-softmax engine. Keys are consumed in blocks of cfg.block_size
// with a running (row max, normalizer, unnormalized output) state, so score
// and bias tiles never exceed query_tile x block_size. The backward pass
// recomputes block scores instead of storing them, keeping the same bound.
// heads > 1 treats the last dim as heads-by-(d/heads) with the bias shared
// across heads.
template <typename T>
Tensor<T> scan_attention(const AttentionInputs<T>& in, const BiasSpec<T>* spec,
                         const ScanConfig& cfg = {}, int64_t heads = 1);

// Positive orthogonal random features for the softmax kernel.
template <typename T>
struct FeatureMap {
  Tensor<T> w;  // [r, d_k]; d_k-sized blocks of orthogonal rows, chi-scaled
  int64_t r = 0;
};

template <typename T>
FeatureMap<T> make_feature_map(int64_t d_k, int64_t r, uint64_t seed);

// Raw feature map phi(x) = exp(x W^T - |x|^2/2)/sqrt(r) on inputs already
// scaled by d_k^{-1/4}; phi(q).phi(k) estimates exp(q.k / sqrt(d_k)).
template <typename T>
Tensor<T> performer_features(const Tensor<T>& x_scaled, const FeatureMap<T>& fm);

// Low-rank softmax approximation; contracts (K' V) first so cost stays
// linear in sequence length. Masked keys are removed from both the numerator
// and the normalizer.
template <typename T>
Tensor<T> performer_attention(const AttentionInputs<T>& in, const FeatureMap<T>& fm);

// Affine chain with GELU between layers; no layers = identity.
template <typename T>
struct Mlp {
  std::vector<Tensor<T>> weights;
  std::vector<Tensor<T>> biases;
  Tensor<T> apply(const Tensor<T>& x) const;
  static Mlp make(int64_t d_in, int64_t d_hidden, int64_t d_out, RngStream& rng);
  void collect_params(const std::string& prefix, ParamMap<T>& out) const;
};

template <typename T>
struct DkaParams {
  Mlp<T> phi;  // shared projection for (query, location) and (key, location)
  Mlp<T> psi;  // value projection
  Tensor<T> ln_gain;
  Tensor<T> ln_shift;
  bool apply_ln = true;
};

// Linear-time attention that co-embeds the index set: weights are inner
// products of shared phi features, normalization is a layer norm.
template <typename T>
Tensor<T> dka_attention(const AttentionInputs<T>& in, const DkaParams<T>& p);

enum class AttentionVariant { full, scan, performer, dka };

AttentionVariant attention_variant_from_string(const std::string& name);
std::string attention_variant_to_string(AttentionVariant v);

template <typename T>
struct MhaParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  static MhaParams make(int64_t d_model, RngStream& rng);
  void collect_params(const std::string& prefix, ParamMap<T>& out) const;
};

// Engine-specific state owned by the caller.
template <typename T>
struct MhaContext {
  const BiasSpec<T>* bias = nullptr;        // full / scan
  const FeatureMap<T>* feature_map = nullptr;  // performer
  const DkaParams<T>* dka = nullptr;
  ScanConfig scan;
};

// Projections -> per-head engine -> concat -> output projection.
template <typename T>
Tensor<T> multi_head_attention(AttentionVariant variant, const Tensor<T>& queries,
                               const Tensor<T>& keys_values,
                               const std::vector<uint8_t>& key_mask, const Tensor<T>& s_q,
                               const Tensor<T>& s_k, const MhaParams<T>& p, int64_t heads,
                               const MhaContext<T>& ctx);

}  // namespace tnpkr
