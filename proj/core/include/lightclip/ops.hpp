#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lightclip/tensor.hpp"

// Differentiable primitives. Every op checks shapes explicitly; there is no
// implicit broadcasting. When a tape is active and any input requires a
// gradient, the op records its backward rule on that tape.
namespace lightclip::ops {

Tensor reshape(const Tensor& x, Shape shape);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m,n] -> [n,m]
Tensor transpose(const Tensor& x);
/// x[..., in] * w[in, out] + b[out]; `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// Multiplies every element by the single value held in `s` (shape [1]).
Tensor scale_by(const Tensor& x, const Tensor& s);

Tensor exp(const Tensor& x);
/// Throws DomainError on any non-positive input.
Tensor log(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

/// Divides each slice along `axis` by its L2 norm. Throws DomainError on a
/// zero-norm slice.
Tensor l2_normalize(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Full reductions to shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reductions along one axis; the axis is removed (rank-1 input gives [1]).
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);

/// Elements at flat indices -> [k].
Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices);
/// Slices along the leading axis: [N, ...] -> [k, ...].
Tensor index_select(const Tensor& x, std::span<const std::size_t> rows);

/// Replaces elements where mask != 0 with `value`; those positions get zero
/// gradient.
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value);

/// Normalizes over the last axis, then applies per-channel gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

struct AttentionWeights {
  Tensor wq, bq;  // [d_query, d_model], [d_model]
  Tensor wk, bk;  // [d_kv, d_model], [d_model]
  Tensor wv, bv;  // [d_kv, d_model], [d_model]
  Tensor wo, bo;  // [d_model, d_query], [d_query]
};

/// Fused multi-head scaled dot-product attention including the input and
/// output projections.
///
/// query_src: [n, lq, d_query], kv_src: [n, lk, d_kv]. `key_valid` has n*lk
/// entries (non-zero = attendable); empty means every key is valid. Each
/// query row must see at least one valid key. Returns [n, lq, d_query].
Tensor attention(const Tensor& query_src, const Tensor& kv_src, const AttentionWeights& w,
                 std::span<const std::uint8_t> key_valid, std::size_t heads);

}  // namespace lightclip::ops
