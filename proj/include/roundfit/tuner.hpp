#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "roundfit/calib.hpp"
#include "roundfit/model.hpp"
#include "roundfit/pack.hpp"
#include "roundfit/quant.hpp"

namespace roundfit {

enum class OptimizerKind { kSignSgd, kAdam };
enum class TuneMode { kRounding, kClip, kBoth };
enum class Method { kRtn, kSignRound };

std::string to_string(OptimizerKind k);
std::string to_string(TuneMode m);
std::string to_string(Method m);
OptimizerKind parse_optimizer(const std::string& s);
TuneMode parse_mode(const std::string& s);
Method parse_method(const std::string& s);

/// Learning rate used by Adam when none is given.
inline constexpr double kAdamDefaultLr = 1e-2;

struct TuneConfig {
  Index steps = 200;
  double lr0 = 5e-3;
  Index batch_size = 8;
  OptimizerKind optimizer = OptimizerKind::kSignSgd;
  TuneMode mode = TuneMode::kBoth;
  bool quantized_input = true;
  /// Multiplies the learning rate of alpha and beta.
  double clip_lr_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool tunes_rounding() const { return mode != TuneMode::kClip; }
  bool tunes_clip() const { return mode != TuneMode::kRounding; }
};

/// Linearly decayed learning rate lr0 * (1 - t / steps) for 0 <= t < steps.
double lr_at(Index t, Index steps, double lr0);

struct Bounds {
  double lo;
  double hi;
};

inline constexpr Bounds kRoundingBounds{-kRoundingBound, kRoundingBound};
inline constexpr Bounds kClipBounds{kClipScaleMin, 1.0};

/// param <- clamp(param - lr * sign(grad)); sign(0) = 0.
template <typename T>
void signsgd_step(Buffer<T>& param, const Buffer<T>& grad, double lr, Bounds bounds);

template <typename T>
struct AdamState {
  Buffer<T> m;
  Buffer<T> v;
  Index t = 0;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  static AdamState zeros(Index n) { return {Buffer<T>::Zero(n), Buffer<T>::Zero(n), 0}; }
};

/// Bias-corrected Adam update followed by a clamp to `bounds`.
template <typename T>
void adam_step(Buffer<T>& param, const Buffer<T>& grad, AdamState<T>& state, double lr, Bounds bounds);

/// Parameters that produced the lowest recorded step loss, taken before that step's update.
template <typename T>
struct BestSnapshot {
  std::vector<TunedParams<T>> params;
  double loss = std::numeric_limits<double>::infinity();
  Index step = -1;
};

/// A reconstruction objective over a fixed set of quantizable weights.
template <typename T>
class TuningObjective {
 public:
  virtual ~TuningObjective() = default;
  virtual std::span<const Tensor<T>> weights() const = 0;
  virtual Index num_samples() const = 0;
  /// Mean squared error between outputs with `qweights` and the full-precision outputs on `batch`.
  virtual Tensor<T> loss(std::span<const Tensor<T>> qweights, std::span<const Index> batch) const = 0;
};

/// One transformer block against its full-precision outputs on cached inputs.
template <typename T>
class BlockObjective final : public TuningObjective<T> {
 public:
  BlockObjective(BlockWeights<T> block, Tensor<T> inputs, Index n_heads);

  std::span<const Tensor<T>> weights() const override { return linears_; }
  Index num_samples() const override { return inputs_.dim(0); }
  Tensor<T> loss(std::span<const Tensor<T>> qweights, std::span<const Index> batch) const override;

  const Tensor<T>& targets() const { return targets_; }

 private:
  BlockWeights<T> block_;
  std::vector<Tensor<T>> linears_;
  Tensor<T> inputs_;
  Tensor<T> targets_;
  Index n_heads_;
};

/// A single linear layer y = W x with samples as rows of `inputs` [samples, in].
template <typename T>
class LinearObjective final : public TuningObjective<T> {
 public:
  LinearObjective(Tensor<T> weight, Tensor<T> inputs);

  std::span<const Tensor<T>> weights() const override { return {&weight_, 1}; }
  Index num_samples() const override { return inputs_.dim(0); }
  Tensor<T> loss(std::span<const Tensor<T>> qweights, std::span<const Index> batch) const override;

 private:
  Tensor<T> weight_;
  Tensor<T> inputs_;
  Tensor<T> targets_;
};

template <typename T>
struct TuneResult {
  BestSnapshot<T> best;
  std::vector<double> history;  // per-step batch loss
  double rtn_loss = 0.0;        // all samples, V = 0, alpha = beta = 1
  double tuned_loss = 0.0;      // all samples, best snapshot
  std::size_t bound_violations = 0;
};

/// Loss over every sample of the objective for fixed parameters.
template <typename T>
double evaluate_objective(const TuningObjective<T>& objective, const QuantConfig& qcfg,
                          std::span<const TunedParams<T>> params);

/// Signed-gradient tuning of rounding offsets and clip scales for every weight of `objective`.
template <typename T>
TuneResult<T> tune(const TuningObjective<T>& objective, const QuantConfig& qcfg, const TuneConfig& tcfg);

template <typename T>
TuneResult<T> tune_block(const BlockWeights<T>& block, const Tensor<T>& inputs, Index n_heads,
                         const QuantConfig& qcfg, const TuneConfig& tcfg) {
  return tune(BlockObjective<T>(block, inputs, n_heads), qcfg, tcfg);
}

struct BlockReport {
  Index block = 0;
  double rtn_loss = 0.0;
  double best_loss = 0.0;
  double tuned_loss = 0.0;
  Index best_step = 0;
  Index steps = 0;
  Method method = Method::kSignRound;
  TuneMode mode = TuneMode::kBoth;
  OptimizerKind optimizer = OptimizerKind::kSignSgd;
  double lr0 = 0.0;
  double clip_lr_scale = 1.0;
  bool quantized_input = true;
  std::size_t bound_violations = 0;

  nlohmann::json to_json() const;
};

struct QuantizedModel {
  Model model;  // block linears replaced by their dequantized values
  std::map<std::string, PackedTensor> packed;
  std::vector<BlockReport> reports;
  std::vector<std::vector<TunedParams<float>>> snapshots;  // per block, kLinearNames order
  /// Inputs each block was tuned on, when requested.
  std::vector<Tensor<float>> block_inputs;
};

struct TuneModelOptions {
  bool keep_block_inputs = false;
};

/// Quantizes every block in order. With quantized_input, block k sees the
/// outputs of the already-quantized blocks before it.
QuantizedModel tune_model(const Model& model, const CalibSet& calib, const QuantConfig& qcfg, const TuneConfig& tcfg,
                          Method method, TuneModelOptions options = {});

/// Runs a block over [n, seq, d] inputs in chunks.
Tensor<float> run_block(const BlockWeights<float>& block, const Tensor<float>& inputs, Index n_heads);

}  // namespace roundfit
