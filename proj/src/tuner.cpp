#include "roundfit/tuner.hpp"

#include <cmath>
#include <numeric>

#include "roundfit/ops.hpp"

namespace roundfit {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSignSgd ? "signsgd" : "adam"; }

std::string to_string(TuneMode m) {
  switch (m) {
    case TuneMode::kRounding: return "rounding";
    case TuneMode::kClip: return "clip";
    case TuneMode::kBoth: return "both";
  }
  return "?";
}

std::string to_string(Method m) { return m == Method::kRtn ? "rtn" : "signround"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "signsgd") return OptimizerKind::kSignSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ArgumentError("unknown optimizer '" + s + "' (expected signsgd or adam)");
}

TuneMode parse_mode(const std::string& s) {
  if (s == "rounding") return TuneMode::kRounding;
  if (s == "clip") return TuneMode::kClip;
  if (s == "both") return TuneMode::kBoth;
  throw ArgumentError("unknown tuning mode '" + s + "' (expected rounding, clip or both)");
}

Method parse_method(const std::string& s) {
  if (s == "rtn") return Method::kRtn;
  if (s == "signround") return Method::kSignRound;
  throw ArgumentError("unknown method '" + s + "' (expected rtn or signround)");
}

void TuneConfig::validate() const {
  if (steps < 1) throw ArgumentError("steps must be >= 1");
  if (!(lr0 > 0.0)) throw ArgumentError("learning rate must be > 0");
  if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  if (!(clip_lr_scale > 0.0)) throw ArgumentError("clip learning-rate scale must be > 0");
}

double lr_at(Index t, Index steps, double lr0) {
  if (steps < 1 || t < 0 || t >= steps) {
    throw ArgumentError("step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
  }
  return lr0 * (1.0 - static_cast<double>(t) / static_cast<double>(steps));
}

template <typename T>
void signsgd_step(Buffer<T>& param, const Buffer<T>& grad, double lr, Bounds bounds) {
  param = (param - static_cast<T>(lr) * grad.sign())
              .max(static_cast<T>(bounds.lo))
              .min(static_cast<T>(bounds.hi));
}

template <typename T>
void adam_step(Buffer<T>& param, const Buffer<T>& grad, AdamState<T>& state, double lr, Bounds bounds) {
  using S = AdamState<T>;
  state.t += 1;
  state.m = T(S::kBeta1) * state.m + T(1 - S::kBeta1) * grad;
  state.v = T(S::kBeta2) * state.v + T(1 - S::kBeta2) * grad.square();
  const T c1 = static_cast<T>(1.0 - std::pow(S::kBeta1, static_cast<double>(state.t)));
  const T c2 = static_cast<T>(1.0 - std::pow(S::kBeta2, static_cast<double>(state.t)));
  param = (param - static_cast<T>(lr) * (state.m / c1) / ((state.v / c2).sqrt() + T(S::kEps)))
              .max(static_cast<T>(bounds.lo))
              .min(static_cast<T>(bounds.hi));
}

template <typename T>
BlockObjective<T>::BlockObjective(BlockWeights<T> block, Tensor<T> inputs, Index n_heads)
    : block_(std::move(block)), inputs_(std::move(inputs)), n_heads_(n_heads) {
  for (const Tensor<T>* w : block_.linears()) linears_.push_back(*w);
  if (inputs_.rank() != 3 || inputs_.dim(0) < 1) {
    throw DimensionError("block inputs must be [samples, seq, d_model], got " + shape_str(inputs_.shape()));
  }
  // Full-precision targets do not change during tuning.
  constexpr Index kChunk = 16;
  const Index n = inputs_.dim(0);
  Buffer<T> y(inputs_.numel());
  Index filled = 0;
  for (Index s = 0; s < n; s += kChunk) {
    std::vector<Index> idx;
    for (Index i = s; i < std::min(n, s + kChunk); ++i) idx.push_back(i);
    const Tensor<T> out = block_forward(block_, gather_rows(inputs_, idx), n_heads_);
    y.segment(filled, out.numel()) = out.array();
    filled += out.numel();
  }
  targets_ = Tensor<T>(inputs_.shape(), std::move(y));
}

template <typename T>
Tensor<T> BlockObjective<T>::loss(std::span<const Tensor<T>> qweights, std::span<const Index> batch) const {
  const Tensor<T> y = block_forward(block_.with_linears(qweights), gather_rows(inputs_, batch), n_heads_);
  return mse_loss(y, gather_rows(targets_, batch));
}

template <typename T>
LinearObjective<T>::LinearObjective(Tensor<T> weight, Tensor<T> inputs)
    : weight_(std::move(weight)), inputs_(std::move(inputs)) {
  if (weight_.rank() != 2 || inputs_.rank() != 2 || inputs_.dim(1) != weight_.dim(1)) {
    throw DimensionError("linear objective: weight " + shape_str(weight_.shape()) + " vs inputs " +
                         shape_str(inputs_.shape()));
  }
  targets_ = linear(inputs_, weight_);
}

template <typename T>
Tensor<T> LinearObjective<T>::loss(std::span<const Tensor<T>> qweights, std::span<const Index> batch) const {
  if (qweights.size() != 1) throw ArgumentError("linear objective takes one weight");
  return mse_loss(linear(gather_rows(inputs_, batch), qweights[0]), gather_rows(targets_, batch));
}

template <typename T>
double evaluate_objective(const TuningObjective<T>& objective, const QuantConfig& qcfg,
                          std::span<const TunedParams<T>> params) {
  const auto weights = objective.weights();
  if (params.size() != weights.size()) throw ArgumentError("parameter count does not match objective weights");
  std::vector<Tensor<T>> qweights;
  for (std::size_t i = 0; i < weights.size(); ++i) qweights.push_back(qdq(weights[i], qcfg, params[i]));
  // One pass over every sample so that a full-batch step loss and this value agree exactly.
  std::vector<Index> all(static_cast<std::size_t>(objective.num_samples()));
  std::iota(all.begin(), all.end(), Index{0});
  return static_cast<double>(objective.loss(qweights, all).item());
}

namespace {

template <typename T>
std::size_t count_outside(const Buffer<T>& p, Bounds b) {
  return static_cast<std::size_t>(
      (p < static_cast<T>(b.lo) || p > static_cast<T>(b.hi) || p.isNaN()).count());
}

}  // namespace

template <typename T>
TuneResult<T> tune(const TuningObjective<T>& objective, const QuantConfig& qcfg, const TuneConfig& tcfg) {
  qcfg.validate();
  tcfg.validate();
  const auto weights = objective.weights();
  const Index n = objective.num_samples();
  if (n < 1) throw ArgumentError("tuning needs at least one calibration sample");
  const Index batch_size = std::min(tcfg.batch_size, n);

  std::vector<Buffer<T>> v, alpha, beta;
  std::vector<Shape> vshape, gshape;
  std::vector<TunedParams<T>> identity;
  for (const Tensor<T>& w : weights) {
    if (!w.array().allFinite()) throw NumericError("weights to quantize contain non-finite values");
    identity.push_back(TunedParams<T>::identity(w.shape(), qcfg));
    v.push_back(identity.back().v.array());
    alpha.push_back(identity.back().alpha.array());
    beta.push_back(identity.back().beta.array());
    vshape.push_back(identity.back().v.shape());
    gshape.push_back(identity.back().alpha.shape());
  }
  const auto current = [&] {
    std::vector<TunedParams<T>> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back({Tensor<T>(vshape[i], v[i]), Tensor<T>(gshape[i], alpha[i]), Tensor<T>(gshape[i], beta[i])});
    }
    return out;
  };

  std::vector<AdamState<T>> adam_v, adam_a, adam_b;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    adam_v.push_back(AdamState<T>::zeros(v[i].size()));
    adam_a.push_back(AdamState<T>::zeros(alpha[i].size()));
    adam_b.push_back(AdamState<T>::zeros(beta[i].size()));
  }
  const auto step_param = [&](Buffer<T>& p, const Buffer<T>& g, AdamState<T>& st, double lr, Bounds b) {
    if (tcfg.optimizer == OptimizerKind::kSignSgd) {
      signsgd_step(p, g, lr, b);
    } else {
      adam_step(p, g, st, lr, b);
    }
  };

  TuneResult<T> result;
  result.rtn_loss = evaluate_objective<T>(objective, qcfg, identity);
  result.history.reserve(static_cast<std::size_t>(tcfg.steps));

  for (Index t = 0; t < tcfg.steps; ++t) {
    const std::vector<Index> batch = draw_indices(n, batch_size, t, tcfg.seed);
    Tape<T> tape;
    std::vector<TunedParams<T>> leaves = current();
    for (auto& p : leaves) {
      if (tcfg.tunes_rounding()) p.v = tape.leaf(p.v);
      if (tcfg.tunes_clip()) {
        p.alpha = tape.leaf(p.alpha);
        p.beta = tape.leaf(p.beta);
      }
    }
    std::vector<Tensor<T>> qweights;
    for (std::size_t i = 0; i < weights.size(); ++i) qweights.push_back(qdq(weights[i], qcfg, leaves[i]));
    const Tensor<T> loss = objective.loss(qweights, batch);
    const double l = static_cast<double>(loss.item());
    if (!std::isfinite(l)) throw NumericError("non-finite reconstruction loss at step " + std::to_string(t));
    result.history.push_back(l);
    if (l < result.best.loss) {
      result.best.params = current();
      result.best.loss = l;
      result.best.step = t;
    }
    if (!loss.tracked()) continue;  // nothing to train
    tape.backward(loss);

    const double lr = lr_at(t, tcfg.steps, tcfg.lr0);
    const double lr_clip = lr * tcfg.clip_lr_scale;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (tcfg.tunes_rounding()) {
        step_param(v[i], tape.grad(leaves[i].v).array(), adam_v[i], lr, kRoundingBounds);
        result.bound_violations += count_outside(v[i], kRoundingBounds);
      }
      if (tcfg.tunes_clip()) {
        step_param(alpha[i], tape.grad(leaves[i].alpha).array(), adam_a[i], lr_clip, kClipBounds);
        step_param(beta[i], tape.grad(leaves[i].beta).array(), adam_b[i], lr_clip, kClipBounds);
        result.bound_violations += count_outside(alpha[i], kClipBounds) + count_outside(beta[i], kClipBounds);
      }
    }
  }
  result.tuned_loss = evaluate_objective<T>(objective, qcfg, result.best.params);
  return result;
}

nlohmann::json BlockReport::to_json() const {
  return {{"block", block},
          {"method", to_string(method)},
          {"rtn_loss", rtn_loss},
          {"best_loss", best_loss},
          {"tuned_loss", tuned_loss},
          {"best_step", best_step},
          {"steps", steps},
          {"mode", to_string(mode)},
          {"optimizer", to_string(optimizer)},
          {"lr0", lr0},
          {"clip_lr_scale", clip_lr_scale},
          {"quantized_input", quantized_input},
          {"bound_violations", bound_violations}};
}

Tensor<float> run_block(const BlockWeights<float>& block, const Tensor<float>& inputs, Index n_heads) {
  constexpr Index kChunk = 16;
  const Index n = inputs.dim(0);
  Buffer<float> y(inputs.numel());
  Index filled = 0;
  for (Index s = 0; s < n; s += kChunk) {
    std::vector<Index> idx;
    for (Index i = s; i < std::min(n, s + kChunk); ++i) idx.push_back(i);
    const Tensor<float> out = block_forward(block, gather_rows(inputs, idx), n_heads);
    y.segment(filled, out.numel()) = out.array();
    filled += out.numel();
  }
  return Tensor<float>(inputs.shape(), std::move(y));
}

QuantizedModel tune_model(const Model& model, const CalibSet& calib, const QuantConfig& qcfg, const TuneConfig& tcfg,
                          Method method, TuneModelOptions options) {
  qcfg.validate();
  tcfg.validate();
  QuantizedModel out;
  out.model = model;
  if (model.config.n_layers == 0) return out;

  // Block inputs are cached once per block; the next block's inputs come from
  // either the quantized or the original outputs of this one.
  Tensor<float> h_fp = capture_block_inputs(model, calib, 0, false).inputs;
  Tensor<float> h_q = h_fp;
  const Index heads = model.config.n_heads;
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    const BlockWeights<float>& block = model.blocks[k];
    const Tensor<float>& x = tcfg.quantized_input ? h_q : h_fp;
    const BlockObjective<float> objective(block, x, heads);

    BlockReport report;
    report.block = static_cast<Index>(k);
    report.method = method;
    report.mode = tcfg.mode;
    report.optimizer = tcfg.optimizer;
    report.lr0 = tcfg.lr0;
    report.clip_lr_scale = tcfg.clip_lr_scale;
    report.quantized_input = tcfg.quantized_input;

    std::vector<TunedParams<float>> params;
    if (method == Method::kRtn) {
      for (const Tensor<float>& w : objective.weights()) params.push_back(TunedParams<float>::identity(w.shape(), qcfg));
      report.rtn_loss = evaluate_objective<float>(objective, qcfg, params);
      report.best_loss = report.tuned_loss = report.rtn_loss;
    } else {
      TuneResult<float> r = tune<float>(objective, qcfg, tcfg);
      params = std::move(r.best.params);
      report.rtn_loss = r.rtn_loss;
      report.best_loss = r.best.loss;
      report.tuned_loss = r.tuned_loss;
      report.best_step = r.best.step;
      report.steps = tcfg.steps;
      report.bound_violations = r.bound_violations;
    }

    std::vector<Tensor<float>> dequantized;
    const auto weights = objective.weights();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const QuantizedWeight<float> qw = quantize(weights[i], qcfg, params[i]);
      const std::string name = "blocks." + std::to_string(k) + "." + BlockWeights<float>::kLinearNames[i];
      out.packed.emplace(name, pack(qw, name));
      dequantized.push_back(qw.dequantized);
    }
    out.model.blocks[k] = block.with_linears(dequantized);
    if (options.keep_block_inputs) out.block_inputs.push_back(x);
    out.reports.push_back(report);
    out.snapshots.push_back(std::move(params));

    if (k + 1 < model.blocks.size()) {
      if (tcfg.quantized_input) {
        h_q = run_block(out.model.blocks[k], h_q, heads);
      } else {
        h_fp = objective.targets();
      }
    }
  }
  return out;
}

#define ROUNDFIT_INSTANTIATE_TUNER(T)                                                                        \
  template void signsgd_step(Buffer<T>&, const Buffer<T>&, double, Bounds);                                 \
  template void adam_step(Buffer<T>&, const Buffer<T>&, AdamState<T>&, double, Bounds);                     \
  template class BlockObjective<T>;                                                                          \
  template class LinearObjective<T>;                                                                         \
  template double evaluate_objective(const TuningObjective<T>&, const QuantConfig&,                          \
                                     std::span<const TunedParams<T>>);                                       \
  template TuneResult<T> tune(const TuningObjective<T>&, const QuantConfig&, const TuneConfig&);

ROUNDFIT_INSTANTIATE_TUNER(float)
ROUNDFIT_INSTANTIATE_TUNER(double)

}  // namespace roundfit
