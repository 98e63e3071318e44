#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "roundfit/tensor.hpp"

namespace roundfit {

/// Smallest permitted quantization scale; constant groups land here.
inline constexpr double kScaleFloor = 1e-8;
/// Lower clamp for the clip scales alpha and beta.
inline constexpr double kClipScaleMin = 1e-3;
/// Rounding offsets live in [-kRoundingBound, kRoundingBound].
inline constexpr double kRoundingBound = 0.5;

using Code = std::uint8_t;

/// Weight-only asymmetric quantization settings, written W{bits}G{group_size}.
struct QuantConfig {
  int bits = 4;
  /// Consecutive input-dimension weights sharing one scale; -1 is one group per output row.
  Index group_size = -1;

  void validate() const;
  int max_code() const { return (1 << bits) - 1; }
  Index effective_group_size(Index in_features) const {
    return group_size == -1 ? in_features : group_size;
  }
  Index groups_per_row(Index in_features) const;
  std::string label() const;
  bool operator==(const QuantConfig&) const = default;
};

/// Contiguous run of one output row that shares quantization parameters.
struct GroupSlice {
  Index row;
  Index begin;
  Index size;
};

/// Partitions each row of an [out x in] weight along the input dimension.
/// The last group of a row may be shorter than group_size.
std::vector<GroupSlice> group_view(const Shape& weight_shape, const QuantConfig& cfg);

template <typename T>
struct GroupParams {
  T scale;
  int zero_point;
};

/// Scale and zero point of one group for clip scales alpha, beta.
///
/// The range always contains zero: lo = min(min(w), 0), hi = max(max(w), 0);
/// s = max((hi*alpha - lo*beta) / (2^bits - 1), kScaleFloor) and
/// zp = clamp(round(-lo*beta / s), 0, 2^bits - 1).
template <typename T>
GroupParams<T> compute_scale_zp(std::span<const T> group, const QuantConfig& cfg, T alpha, T beta);

/// Trainable state for one weight: per-element rounding offsets and per-group clip scales.
template <typename T>
struct TunedParams {
  Tensor<T> v;      // [out, in]
  Tensor<T> alpha;  // [out, groups_per_row]
  Tensor<T> beta;   // [out, groups_per_row]

  /// V = 0, alpha = beta = 1: plain round-to-nearest.
  static TunedParams identity(const Shape& weight_shape, const QuantConfig& cfg);
};

template <typename T>
struct QdqResult {
  Tensor<T> weight;      // dequantized, same shape as the input weight
  Tensor<T> codes;       // integer-valued, [out, in]
  Tensor<T> scale;       // [out, groups_per_row]
  Tensor<T> zero_point;  // integer-valued, [out, groups_per_row]
};

/// Broadcasts per-group values [out, groups] to per-element [out, in];
/// the backward pass sums each group.
template <typename T>
Tensor<T> expand_groups(const Tensor<T>& per_group, Index in_features, const QuantConfig& cfg);

/// Per-group lower and upper range ends of `weight`, each [out, groups_per_row].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> group_range(const Tensor<T>& weight, const QuantConfig& cfg);

/// Quantize-dequantize with rounding offsets and clip scales:
/// W~ = s * (clamp(round(W/s + zp + V), 0, 2^bits - 1) - zp).
/// Differentiable in V, alpha and beta through straight-through rounding and clipping; W is a constant.
template <typename T>
QdqResult<T> qdq_detail(const Tensor<T>& weight, const QuantConfig& cfg, const TunedParams<T>& tuned);

template <typename T>
Tensor<T> qdq(const Tensor<T>& weight, const QuantConfig& cfg, const TunedParams<T>& tuned) {
  return qdq_detail(weight, cfg, tuned).weight;
}

/// Integer codes and group parameters for storage.
template <typename T>
struct QuantizedWeight {
  Shape shape;
  QuantConfig config;
  std::vector<Code> codes;                  // row-major, one per weight
  std::vector<GroupParams<T>> groups;       // row-major over [out, groups_per_row]
  Tensor<T> dequantized;
};

template <typename T>
QuantizedWeight<T> quantize(const Tensor<T>& weight, const QuantConfig& cfg, const TunedParams<T>& tuned);

/// Round-to-nearest: quantize() with the identity parameters.
template <typename T>
QuantizedWeight<T> rtn(const Tensor<T>& weight, const QuantConfig& cfg) {
  return quantize(weight, cfg, TunedParams<T>::identity(weight.shape(), cfg));
}

}  // namespace roundfit
