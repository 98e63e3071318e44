#include "roundfit/quant.hpp"

#include <algorithm>
#include <cmath>

#include "roundfit/ops.hpp"

namespace roundfit {

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) throw ArgumentError("bits must be in [2, 8], got " + std::to_string(bits));
  if (group_size != -1 && group_size < 1) {
    throw ArgumentError("group_size must be -1 or positive, got " + std::to_string(group_size));
  }
}

Index QuantConfig::groups_per_row(Index in_features) const {
  const Index g = effective_group_size(in_features);
  return g == 0 ? 0 : (in_features + g - 1) / g;
}

std::string QuantConfig::label() const {
  return "W" + std::to_string(bits) + "G" + std::to_string(group_size);
}

std::vector<GroupSlice> group_view(const Shape& weight_shape, const QuantConfig& cfg) {
  cfg.validate();
  if (weight_shape.size() != 2) throw DimensionError("group_view expects a 2-D weight, got " + shape_str(weight_shape));
  const Index rows = weight_shape[0];
  const Index in = weight_shape[1];
  const Index g = cfg.effective_group_size(in);
  std::vector<GroupSlice> out;
  out.reserve(static_cast<std::size_t>(rows * cfg.groups_per_row(in)));
  for (Index r = 0; r < rows; ++r) {
    for (Index b = 0; b < in; b += g) out.push_back({r, b, std::min(g, in - b)});
  }
  return out;
}

template <typename T>
GroupParams<T> compute_scale_zp(std::span<const T> group, const QuantConfig& cfg, T alpha, T beta) {
  cfg.validate();
  if (group.empty()) throw ArgumentError("compute_scale_zp on an empty group");
  const auto [mn, mx] = std::minmax_element(group.begin(), group.end());
  const T lo = std::min(*mn, T(0));
  const T hi = std::max(*mx, T(0));
  const T qmax = static_cast<T>(cfg.max_code());
  const T s = std::max((hi * alpha - lo * beta) / qmax, static_cast<T>(kScaleFloor));
  const T zp = std::clamp(std::nearbyint(((-lo) * beta) / s), T(0), qmax);
  return {s, static_cast<int>(zp)};
}

template <typename T>
TunedParams<T> TunedParams<T>::identity(const Shape& weight_shape, const QuantConfig& cfg) {
  if (weight_shape.size() != 2) throw DimensionError("expected a 2-D weight, got " + shape_str(weight_shape));
  const Shape groups{weight_shape[0], cfg.groups_per_row(weight_shape[1])};
  return {Tensor<T>::zeros(weight_shape), Tensor<T>::full(groups, T(1)), Tensor<T>::full(groups, T(1))};
}

template <typename T>
Tensor<T> expand_groups(const Tensor<T>& per_group, Index in_features, const QuantConfig& cfg) {
  const Index ng = cfg.groups_per_row(in_features);
  if (per_group.rank() != 2 || per_group.dim(1) != ng) {
    throw DimensionError("per-group tensor " + shape_str(per_group.shape()) + " does not match " +
                         std::to_string(ng) + " groups per row");
  }
  const Index rows = per_group.dim(0);
  const Index g = cfg.effective_group_size(in_features);
  Buffer<T> out(rows * in_features);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < in_features; ++c) out(r * in_features + c) = per_group[r * ng + c / g];
  }
  Shape shape{rows, in_features};
  if (!per_group.tracked()) return Tensor<T>(std::move(shape), std::move(out));
  return per_group.tape()->record(std::move(shape), std::move(out),
                                  [per_group, rows, in_features, ng, g](const Buffer<T>& grad, GradSink<T>& sink) {
                                    Buffer<T> acc = Buffer<T>::Zero(rows * ng);
                                    for (Index r = 0; r < rows; ++r) {
                                      for (Index c = 0; c < in_features; ++c) {
                                        acc(r * ng + c / g) += grad(r * in_features + c);
                                      }
                                    }
                                    sink.accumulate(per_group.node(), acc);
                                  });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> group_range(const Tensor<T>& weight, const QuantConfig& cfg) {
  const auto groups = group_view(weight.shape(), cfg);
  const Index ng = cfg.groups_per_row(weight.dim(1));
  const Index in = weight.dim(1);
  Buffer<T> lo(weight.dim(0) * ng), hi(weight.dim(0) * ng);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& gs = groups[k];
    const auto seg = weight.array().segment(gs.row * in + gs.begin, gs.size);
    lo(static_cast<Index>(k)) = std::min(seg.minCoeff(), T(0));
    hi(static_cast<Index>(k)) = std::max(seg.maxCoeff(), T(0));
  }
  const Shape shape{weight.dim(0), ng};
  return {Tensor<T>(shape, std::move(lo)), Tensor<T>(shape, std::move(hi))};
}

template <typename T>
QdqResult<T> qdq_detail(const Tensor<T>& weight, const QuantConfig& cfg, const TunedParams<T>& tuned) {
  cfg.validate();
  if (weight.rank() != 2) throw DimensionError("qdq expects a 2-D weight, got " + shape_str(weight.shape()));
  if (weight.tracked()) throw ArgumentError("qdq treats the weight as a constant; pass an untracked tensor");
  const Index in = weight.dim(1);
  const Shape group_shape{weight.dim(0), cfg.groups_per_row(in)};
  if (tuned.v.shape() != weight.shape() || tuned.alpha.shape() != group_shape || tuned.beta.shape() != group_shape) {
    throw DimensionError("tuned parameter shapes V" + shape_str(tuned.v.shape()) + " alpha" +
                         shape_str(tuned.alpha.shape()) + " beta" + shape_str(tuned.beta.shape()) +
                         " do not match weight " + shape_str(weight.shape()) + " grouped as " +
                         shape_str(group_shape));
  }
  const T qmax = static_cast<T>(cfg.max_code());
  const auto [lo, hi] = group_range(weight, cfg);
  const Tensor<T> neg_lo = scale(lo, T(-1));

  const Tensor<T> s = floor_at(div_scalar(sub(mul(hi, tuned.alpha), mul(lo, tuned.beta)), qmax),
                               static_cast<T>(kScaleFloor));
  const Tensor<T> zp = clip_ste(round_ste(div(mul(neg_lo, tuned.beta), s)), T(0), qmax);

  const Tensor<T> s_full = expand_groups(s, in, cfg);
  const Tensor<T> zp_full = expand_groups(zp, in, cfg);
  const Tensor<T> codes = clip_ste(round_ste(add(add(div(weight, s_full), zp_full), tuned.v)), T(0), qmax);
  Tensor<T> dequantized = mul(s_full, sub(codes, zp_full));
  return {std::move(dequantized), codes, s, zp};
}

template <typename T>
QuantizedWeight<T> quantize(const Tensor<T>& weight, const QuantConfig& cfg, const TunedParams<T>& tuned) {
  const TunedParams<T> constant{tuned.v.detach(), tuned.alpha.detach(), tuned.beta.detach()};
  QdqResult<T> r = qdq_detail(weight, cfg, constant);
  QuantizedWeight<T> out;
  out.shape = weight.shape();
  out.config = cfg;
  out.codes.resize(static_cast<std::size_t>(weight.numel()));
  for (Index i = 0; i < weight.numel(); ++i) out.codes[static_cast<std::size_t>(i)] = static_cast<Code>(r.codes[i]);
  out.groups.resize(static_cast<std::size_t>(r.scale.numel()));
  for (Index i = 0; i < r.scale.numel(); ++i) {
    out.groups[static_cast<std::size_t>(i)] = {r.scale[i], static_cast<int>(r.zero_point[i])};
  }
  out.dequantized = std::move(r.weight);
  return out;
}

#define ROUNDFIT_INSTANTIATE_QUANT(T)                                                                         \
  template GroupParams<T> compute_scale_zp(std::span<const T>, const QuantConfig&, T, T);                   \
  template struct TunedParams<T>;                                                                            \
  template Tensor<T> expand_groups(const Tensor<T>&, Index, const QuantConfig&);                             \
  template std::pair<Tensor<T>, Tensor<T>> group_range(const Tensor<T>&, const QuantConfig&);                \
  template QdqResult<T> qdq_detail(const Tensor<T>&, const QuantConfig&, const TunedParams<T>&);             \
  template QuantizedWeight<T> quantize(const Tensor<T>&, const QuantConfig&, const TunedParams<T>&);

ROUNDFIT_INSTANTIATE_QUANT(float)
ROUNDFIT_INSTANTIATE_QUANT(double)

}  // namespace roundfit
