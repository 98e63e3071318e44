#pragma once

#include <span>

#include "roundfit/tensor.hpp"

namespace roundfit {

// Differentiable tensor operations. Each op records itself on the tape of its
// tracked operands (all tracked operands must share one tape); with no
// tracked operand the result is a plain constant.

enum class Elementwise { kAdd, kSub, kMul, kDiv };

/// a ∘ b where b's shape equals a's shape or a trailing suffix of it. The
/// gradient of a broadcast operand is summed over the repeated leading axes.
template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Elementwise kind);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, Elementwise::kAdd); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, Elementwise::kSub); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, Elementwise::kMul); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, Elementwise::kDiv); }

/// x * c.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c);
/// x / c, evaluated as a true division.
template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, T c);
/// max(x, floor); gradient passes where x >= floor.
template <typename T>
Tensor<T> floor_at(const Tensor<T>& x, T floor);

/// [m×k]·[k×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x·wᵀ for x [..., in] and w [out, in]; leading dims of x are kept.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w);
/// Batched product over identical leading dims: [..., m, k]·[..., k, n],
/// or [..., m, k]·[..., n, k]ᵀ when transpose_b is set.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// [a, b, c, d] -> [a, c, b, d].
template <typename T>
Tensor<T> swap_axes12(const Tensor<T>& x);

/// Softmax over the last dimension with max subtraction. NaN inputs propagate.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);
/// Normalizes over the last dimension (population variance), then gamma * x̂ + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);
/// tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Round half to even; the backward pass is the identity.
template <typename T>
Tensor<T> round_ste(const Tensor<T>& x);
/// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
template <typename T>
Tensor<T> clip_ste(const Tensor<T>& x, T lo, T hi);

/// Mean of squared differences over all elements.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Rows `ids` of `table` [n, d], laid out as `shape` (whose last dim is d).
/// The backward pass scatter-adds into the table.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const Index> ids, Shape shape);

/// Mean negative log-likelihood of `targets` under softmax(logits) over the last dim.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const Index> targets);

}  // namespace roundfit
