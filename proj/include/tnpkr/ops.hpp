#pragma once

#include <vector>

#include "tnpkr/tensor.hpp"

namespace tnpkr {

// Elementwise (same shape unless noted). All differentiable ops record tape
// nodes when grad mode is on and any input requires grad.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> exp_op(const Tensor<T>& a);
template <typename T> Tensor<T> log_op(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt_op(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> softplus_op(const Tensor<T>& a);

// Reductions and broadcasts.
template <typename T> Tensor<T> sum(const Tensor<T>& a);   // -> [1]
template <typename T> Tensor<T> mean(const Tensor<T>& a);  // -> [1]
template <typename T> Tensor<T> sum_last(const Tensor<T>& a);  // [..., d] -> [..., 1]
// b has the shape of a with last dimension 1.
template <typename T> Tensor<T> add_bcast_last(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul_bcast_last(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div_bcast_last(const Tensor<T>& a, const Tensor<T>& b);
// v is a vector of length a.size(-1), broadcast across leading dims.
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v);
template <typename T> Tensor<T> mul_rowvec(const Tensor<T>& a, const Tensor<T>& v);

// Shape manipulation (contiguous copies).
template <typename T> Tensor<T> reshape(const Tensor<T>& a, std::vector<int64_t> shape);
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& a);
template <typename T> Tensor<T> concat_last(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_last(const Tensor<T>& a, int64_t offset, int64_t len);

// Batched contraction over the last two dims: [*, m, k] @ [*, k, n] -> [*, m, n].
// Batch dims must match elementwise, or one operand may be rank-2 (shared).
// BLAS-backed; the serial reference below is the test oracle for it.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> matmul_reference(const Tensor<T>& a, const Tensor<T>& b);

// Row softmax over the last dim. Entries at or below the mask sentinel map to
// exactly zero; a fully masked row raises DataError.
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);

// Sentinel standing in for -inf in attention logits; finite so that shifted
// exponentials underflow to zero instead of producing NaNs.
template <typename T>
constexpr T neg_inf_sentinel() {
  return std::numeric_limits<T>::lowest();
}
template <typename T>
bool is_masked_score(T x) {
  return !(x > neg_inf_sentinel<T>() * T(0.5));  // also catches -inf and NaN
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T(1e-5));

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, RngStream& rng);

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Mean of -log softmax(logits)[label] over rows; labels.size() == row count.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& labels);

// Masked mean over dim -2: x [*, n, d], mask length n (or batch*n) -> [*, d].
// An all-masked group pools to zeros.
template <typename T>
Tensor<T> masked_mean_rows(const Tensor<T>& x, const std::vector<uint8_t>& mask);

// Value-only helpers.
template <typename T> Tensor<T> linspace(T lo, T hi, int64_t n);
template <typename T> Tensor<T> rowmax_last_detached(const Tensor<T>& x);  // [..., 1]
template <typename T> T global_max(const Tensor<T>& x);

}  // namespace tnpkr
