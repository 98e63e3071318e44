#include "roundfit/oracle.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "roundfit/ops.hpp"
#include "roundfit/parallel.hpp"

namespace roundfit {

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Tensor<double> random_tensor(std::mt19937_64& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  Buffer<double> b(shape_numel(shape));
  for (Index i = 0; i < b.size(); ++i) b(i) = uniform(rng, lo, hi);
  return Tensor<double>(std::move(shape), std::move(b));
}

signed char clip_side(double x, double lo, double hi) {
  if (x < lo) return -1;
  if (x > hi) return 1;
  return 0;
}

double apply_clip(double x, signed char side, double lo, double hi) {
  return side < 0 ? lo : (side > 0 ? hi : x);
}

}  // namespace

nlohmann::json OracleResult::to_json() const {
  nlohmann::json j = {{"optimal_codes", optimal_codes},
                      {"rtn_codes", rtn_codes},
                      {"optimal_mse", optimal_mse},
                      {"rtn_mse", rtn_mse},
                      {"candidates", candidates}};
  if (!tuned_codes.empty()) {
    j["tuned_codes"] = tuned_codes;
    j["tuned_mse"] = tuned_mse;
    j["gap_ratio"] = gap_ratio;
  }
  return j;
}

double rounding_mse(const Tensor<double>& weight, const Tensor<double>& x, const GroupParams<double>& group,
                    std::span<const Code> codes) {
  const Index n = weight.numel();
  const Index b = x.dim(1);
  std::vector<double> err(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    err[static_cast<std::size_t>(i)] =
        weight[i] - group.scale * (static_cast<double>(codes[static_cast<std::size_t>(i)]) - group.zero_point);
  }
  double total = 0.0;
  for (Index c = 0; c < b; ++c) {
    double out = 0.0;
    for (Index i = 0; i < n; ++i) out += err[static_cast<std::size_t>(i)] * x[i * b + c];
    total += out * out;
  }
  return total / static_cast<double>(b);
}

OracleResult brute_force_rounding(const Tensor<double>& weight, const Tensor<double>& x, const QuantConfig& qcfg,
                                  std::optional<TuneConfig> tune) {
  qcfg.validate();
  if (weight.rank() != 2 || weight.dim(0) != 1) {
    throw DimensionError("brute-force oracle expects a 1 x n weight, got " + shape_str(weight.shape()));
  }
  const Index n = weight.dim(1);
  if (n > kMaxBruteForceWidth) {
    throw SizeError("brute-force oracle refuses n = " + std::to_string(n) + " (limit " +
                    std::to_string(kMaxBruteForceWidth) + ")");
  }
  if (x.rank() != 2 || x.dim(0) != n) {
    throw DimensionError("oracle inputs " + shape_str(x.shape()) + " do not match weight " + shape_str(weight.shape()));
  }
  if (qcfg.groups_per_row(n) != 1) throw ArgumentError("brute-force oracle handles a single group");

  const GroupParams<double> g = compute_scale_zp(weight.values(), qcfg, 1.0, 1.0);
  const double qmax = qcfg.max_code();
  std::vector<Code> down(static_cast<std::size_t>(n)), up(static_cast<std::size_t>(n));
  OracleResult r;
  r.rtn_codes.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const double real = weight[i] / g.scale + g.zero_point;
    const auto k = static_cast<std::size_t>(i);
    down[k] = static_cast<Code>(std::clamp(std::floor(real), 0.0, qmax));
    up[k] = static_cast<Code>(std::clamp(std::ceil(real), 0.0, qmax));
    r.rtn_codes[k] = static_cast<Code>(std::clamp(std::nearbyint(real), 0.0, qmax));
  }

  r.candidates = std::uint64_t{1} << n;
  r.optimal_mse = std::numeric_limits<double>::infinity();
  std::vector<Code> codes(static_cast<std::size_t>(n));
  for (std::uint64_t mask = 0; mask < r.candidates; ++mask) {
    for (Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      codes[k] = (mask >> i) & 1u ? up[k] : down[k];
    }
    const double mse = rounding_mse(weight, x, g, codes);
    if (mse < r.optimal_mse || (mse == r.optimal_mse && codes < r.optimal_codes)) {
      r.optimal_mse = mse;
      r.optimal_codes = codes;
    }
  }
  r.rtn_mse = rounding_mse(weight, x, g, r.rtn_codes);

  if (tune) {
    TuneConfig tcfg = *tune;
    tcfg.mode = TuneMode::kRounding;
    tcfg.batch_size = x.dim(1);
    Buffer<double> xt = x.matrix().transpose().reshaped<Eigen::RowMajor>().array();
    const LinearObjective<double> objective(weight, Tensor<double>({x.dim(1), n}, std::move(xt)));
    const TuneResult<double> result = roundfit::tune<double>(objective, qcfg, tcfg);
    r.tuned_codes = quantize(weight, qcfg, result.best.params.front()).codes;
    r.tuned_mse = rounding_mse(weight, x, g, r.tuned_codes);
    r.gap_ratio = r.optimal_mse == 0.0 ? 1.0 : r.tuned_mse / r.optimal_mse;
  }
  return r;
}

OracleFixture oracle_fixture(std::uint64_t seed, Index n, Index b) {
  std::mt19937_64 rng(mix_seed(seed, 0x0A11CE));
  OracleFixture f;
  f.weight = random_tensor(rng, {1, n}, -1.0, 1.0);
  f.x = random_tensor(rng, {n, b}, -1.0, 1.0);
  return f;
}

OracleFixture on_grid_fixture(Index b, std::uint64_t seed) {
  // bits = 2: range [-1, 0.5] gives s = 0.5, zp = 2, grid {-1, -0.5, 0, 0.5}.
  std::mt19937_64 rng(mix_seed(seed, 0x0A11CE));
  OracleFixture f;
  f.weight = Tensor<double>::from({1, 8}, {-1.0, -0.5, 0.0, 0.5, 0.5, 0.0, -0.5, -1.0});
  f.x = random_tensor(rng, {8, b}, -1.0, 1.0);
  return f;
}

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / std::max(scale, 1e-300);
}

QdqSurrogate::QdqSurrogate(const Tensor<double>& weight, const QuantConfig& cfg, const TunedParams<double>& base)
    : weight_(weight), cfg_(cfg) {
  const Index rows = weight.dim(0), cols = weight.dim(1);
  const Index ng = cfg.groups_per_row(cols), gs = cfg.effective_group_size(cols);
  const double qmax = cfg.max_code();
  scale_floored_.resize(static_cast<std::size_t>(rows * ng));
  zp_residual_.resize(scale_floored_.size());
  zp_clip_.resize(scale_floored_.size());
  code_residual_.resize(static_cast<std::size_t>(rows * cols));
  code_clip_.resize(code_residual_.size());
  for (Index r = 0; r < rows; ++r) {
    for (Index g = 0; g < ng; ++g) {
      const Index begin = g * gs, end = std::min(cols, begin + gs);
      double lo = 0.0, hi = 0.0;
      for (Index c = begin; c < end; ++c) {
        lo = std::min(lo, weight[r * cols + c]);
        hi = std::max(hi, weight[r * cols + c]);
      }
      const auto k = static_cast<std::size_t>(r * ng + g);
      const double s_raw = (hi * base.alpha[r * ng + g] - lo * base.beta[r * ng + g]) / qmax;
      scale_floored_[k] = s_raw < kScaleFloor;
      const double s = scale_floored_[k] ? kScaleFloor : s_raw;
      const double zp_real = -lo * base.beta[r * ng + g] / s;
      zp_residual_[k] = std::nearbyint(zp_real) - zp_real;
      zp_clip_[k] = clip_side(std::nearbyint(zp_real), 0.0, qmax);
      const double zp = apply_clip(std::nearbyint(zp_real), zp_clip_[k], 0.0, qmax);
      for (Index c = begin; c < end; ++c) {
        const auto e = static_cast<std::size_t>(r * cols + c);
        const double code_real = weight[r * cols + c] / s + zp + base.v[r * cols + c];
        code_residual_[e] = std::nearbyint(code_real) - code_real;
        code_clip_[e] = clip_side(std::nearbyint(code_real), 0.0, qmax);
      }
    }
  }
}

Tensor<double> QdqSurrogate::operator()(std::span<const double> v, std::span<const double> alpha,
                                        std::span<const double> beta) const {
  const Index rows = weight_.dim(0), cols = weight_.dim(1);
  const Index ng = cfg_.groups_per_row(cols), gs = cfg_.effective_group_size(cols);
  const double qmax = cfg_.max_code();
  Buffer<double> out(rows * cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index g = 0; g < ng; ++g) {
      const Index begin = g * gs, end = std::min(cols, begin + gs);
      double lo = 0.0, hi = 0.0;
      for (Index c = begin; c < end; ++c) {
        lo = std::min(lo, weight_[r * cols + c]);
        hi = std::max(hi, weight_[r * cols + c]);
      }
      const auto k = static_cast<std::size_t>(r * ng + g);
      const double s = scale_floored_[k] ? kScaleFloor : (hi * alpha[k] - lo * beta[k]) / qmax;
      const double zp = apply_clip(-lo * beta[k] / s + zp_residual_[k], zp_clip_[k], 0.0, qmax);
      for (Index c = begin; c < end; ++c) {
        const auto e = static_cast<std::size_t>(r * cols + c);
        const double code = weight_[r * cols + c] / s + zp + v[e] + code_residual_[e];
        out(r * cols + c) = s * (apply_clip(code, code_clip_[e], 0.0, qmax) - zp);
      }
    }
  }
  return Tensor<double>(weight_.shape(), std::move(out));
}

namespace {

constexpr double kFdStep = 1e-5;

double weighted_sum(const Tensor<double>& out, const Tensor<double>& w) {
  return (out.array() * w.array()).sum();
}

using MultiFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Reverse-mode gradients of sum(f(inputs) * R) against central differences, for inputs flagged in `wrt`.
GradCheckRow check_op(const std::string& name, double tol, std::vector<Tensor<double>> inputs, const MultiFn& f,
                      std::mt19937_64& rng, std::vector<bool> wrt = {}) {
  if (wrt.empty()) wrt.assign(inputs.size(), true);
  const Tensor<double> probe = f(inputs);
  const Tensor<double> weights = random_tensor(rng, probe.shape(), -1.0, 1.0);

  Tape<double> tape;
  std::vector<Tensor<double>> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(wrt[i] ? tape.leaf(inputs[i]) : inputs[i]);
  tape.backward(sum(mul(f(leaves), weights)));

  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!wrt[i]) continue;
    const Tensor<double> g = tape.grad(leaves[i]);
    analytic.insert(analytic.end(), g.values().begin(), g.values().end());
    for (Index e = 0; e < inputs[i].numel(); ++e) {
      std::vector<Tensor<double>> plus = inputs, minus = inputs;
      Buffer<double> bp = inputs[i].array(), bm = inputs[i].array();
      bp(e) += kFdStep;
      bm(e) -= kFdStep;
      plus[i] = Tensor<double>(inputs[i].shape(), std::move(bp));
      minus[i] = Tensor<double>(inputs[i].shape(), std::move(bm));
      numeric.push_back((weighted_sum(f(plus), weights) - weighted_sum(f(minus), weights)) / (2 * kFdStep));
    }
  }
  const double err = relative_error(analytic, numeric);
  return {name, err, tol, err <= tol};
}

/// Straight-through ops have exact gradients; compare them against the expected map.
GradCheckRow check_exact(const std::string& name, const Tensor<double>& analytic, const Buffer<double>& expected) {
  const double err = (analytic.array() - expected).abs().maxCoeff();
  return {name, err, 0.0, err == 0.0};
}

struct QdqGradInputs {
  std::vector<Tensor<double>> weights;
  std::vector<TunedParams<double>> params;
};

QdqGradInputs random_qdq_inputs(std::mt19937_64& rng, const std::vector<Shape>& shapes, const QuantConfig& cfg) {
  QdqGradInputs in;
  for (const Shape& s : shapes) {
    in.weights.push_back(random_tensor(rng, s, -0.5, 0.5));
    const Shape gshape{s[0], cfg.groups_per_row(s[1])};
    in.params.push_back({random_tensor(rng, s, -0.45, 0.45), random_tensor(rng, gshape, 0.6, 1.0),
                         random_tensor(rng, gshape, 0.6, 1.0)});
  }
  return in;
}

enum class Trainable { kV, kAlpha, kBeta };

/// Gradient of `loss(qdq(W_j, params_j) for all j)` with respect to one kind of trainable
/// (or all of them when `kinds` has several entries), checked against FD of the surrogate.
GradCheckRow check_qdq_path(const std::string& name, double tol, const QdqGradInputs& in, const QuantConfig& cfg,
                            const std::vector<Trainable>& kinds,
                            const std::function<Tensor<double>(std::span<const Tensor<double>>)>& loss) {
  const auto has = [&](Trainable k) { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); };
  const std::size_t m = in.weights.size();

  Tape<double> tape;
  std::vector<TunedParams<double>> leaves = in.params;
  for (auto& p : leaves) {
    if (has(Trainable::kV)) p.v = tape.leaf(p.v);
    if (has(Trainable::kAlpha)) p.alpha = tape.leaf(p.alpha);
    if (has(Trainable::kBeta)) p.beta = tape.leaf(p.beta);
  }
  std::vector<Tensor<double>> qw;
  for (std::size_t j = 0; j < m; ++j) qw.push_back(qdq(in.weights[j], cfg, leaves[j]));
  tape.backward(loss(qw));

  std::vector<QdqSurrogate> surrogates;
  for (std::size_t j = 0; j < m; ++j) surrogates.emplace_back(in.weights[j], cfg, in.params[j]);
  std::vector<std::vector<double>> v(m), a(m), b(m);
  for (std::size_t j = 0; j < m; ++j) {
    v[j].assign(in.params[j].v.values().begin(), in.params[j].v.values().end());
    a[j].assign(in.params[j].alpha.values().begin(), in.params[j].alpha.values().end());
    b[j].assign(in.params[j].beta.values().begin(), in.params[j].beta.values().end());
  }
  const auto eval = [&] {
    std::vector<Tensor<double>> w;
    for (std::size_t j = 0; j < m; ++j) w.push_back(surrogates[j](v[j], a[j], b[j]));
    return loss(w).item();
  };

  std::vector<double> analytic, numeric;
  const auto sweep = [&](Trainable kind, std::vector<std::vector<double>>& values,
                         const std::function<const Tensor<double>&(const TunedParams<double>&)>& pick) {
    if (!has(kind)) return;
    for (std::size_t j = 0; j < m; ++j) {
      const Tensor<double> g = tape.grad(pick(leaves[j]));
      analytic.insert(analytic.end(), g.values().begin(), g.values().end());
      for (double& p : values[j]) {
        const double saved = p;
        p = saved + kFdStep;
        const double fp = eval();
        p = saved - kFdStep;
        const double fm = eval();
        p = saved;
        numeric.push_back((fp - fm) / (2 * kFdStep));
      }
    }
  };
  sweep(Trainable::kV, v, [](const TunedParams<double>& p) -> const Tensor<double>& { return p.v; });
  sweep(Trainable::kAlpha, a, [](const TunedParams<double>& p) -> const Tensor<double>& { return p.alpha; });
  sweep(Trainable::kBeta, b, [](const TunedParams<double>& p) -> const Tensor<double>& { return p.beta; });
  const double err = relative_error(analytic, numeric);
  return {name, err, tol, err <= tol};
}

BlockWeights<double> random_block(std::mt19937_64& rng, Index d, Index d_ff, double spread) {
  BlockWeights<double> b;
  b.ln1_gamma = random_tensor(rng, {d}, 0.5, 1.5);
  b.ln1_beta = random_tensor(rng, {d}, -0.2, 0.2);
  b.wq = random_tensor(rng, {d, d}, -spread, spread);
  b.wk = random_tensor(rng, {d, d}, -spread, spread);
  b.wv = random_tensor(rng, {d, d}, -spread, spread);
  b.wo = random_tensor(rng, {d, d}, -spread, spread);
  b.ln2_gamma = random_tensor(rng, {d}, 0.5, 1.5);
  b.ln2_beta = random_tensor(rng, {d}, -0.2, 0.2);
  b.w_up = random_tensor(rng, {d_ff, d}, -spread, spread);
  b.w_down = random_tensor(rng, {d, d_ff}, -spread, spread);
  return b;
}

}  // namespace

std::vector<GradCheckRow> grad_check_suite(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x6AD));
  std::vector<GradCheckRow> rows;
  using V = std::vector<Tensor<double>>;
  const auto r = [&](Shape s) { return random_tensor(rng, std::move(s)); };

  rows.push_back(check_op("matmul", 1e-6, {r({4, 5}), r({5, 3})}, [](const V& x) { return matmul(x[0], x[1]); }, rng));
  rows.push_back(check_op("add_broadcast", 1e-6, {r({2, 3}), r({3})}, [](const V& x) { return add(x[0], x[1]); }, rng));
  rows.push_back(check_op("sub_broadcast", 1e-6, {r({2, 2, 3}), r({2, 3})},
                          [](const V& x) { return sub(x[0], x[1]); }, rng));
  rows.push_back(check_op("mul_broadcast", 1e-6, {r({3, 4}), r({4})}, [](const V& x) { return mul(x[0], x[1]); }, rng));
  rows.push_back(check_op("div_broadcast", 1e-6, {r({3, 4}), random_tensor(rng, {4}, 0.5, 2.0)},
                          [](const V& x) { return div(x[0], x[1]); }, rng));
  rows.push_back(check_op("scale", 1e-6, {r({3, 3})}, [](const V& x) { return scale(x[0], 0.7); }, rng));
  rows.push_back(check_op("div_scalar", 1e-6, {r({3, 3})}, [](const V& x) { return div_scalar(x[0], 3.0); }, rng));
  rows.push_back(check_op("floor_at", 1e-6, {random_tensor(rng, {3, 3}, 0.1, 2.0)},
                          [](const V& x) { return floor_at(x[0], 0.05); }, rng));
  rows.push_back(check_op("linear", 1e-6, {r({2, 3, 5}), r({4, 5})}, [](const V& x) { return linear(x[0], x[1]); }, rng));
  rows.push_back(check_op("bmm", 1e-6, {r({2, 3, 4}), r({2, 4, 2})}, [](const V& x) { return bmm(x[0], x[1]); }, rng));
  rows.push_back(check_op("bmm_transposed", 1e-6, {r({2, 3, 4}), r({2, 5, 4})},
                          [](const V& x) { return bmm(x[0], x[1], true); }, rng));
  rows.push_back(check_op("reshape_swap_axes", 1e-6, {r({2, 3, 4})},
                          [](const V& x) { return swap_axes12(reshape(x[0], {2, 3, 2, 2})); }, rng));
  rows.push_back(check_op("softmax_lastdim", 1e-6, {r({3, 4})}, [](const V& x) { return softmax_lastdim(x[0]); }, rng));
  rows.push_back(check_op("layer_norm", 1e-5, {r({3, 5}), r({5}), r({5})},
                          [](const V& x) { return layer_norm(x[0], x[1], x[2], 1e-5); }, rng));
  rows.push_back(check_op("gelu", 1e-5, {r({4, 4})}, [](const V& x) { return gelu(x[0]); }, rng));
  rows.push_back(check_op("mse_loss", 1e-7, {r({3, 4}), r({3, 4})}, [](const V& x) { return mse_loss(x[0], x[1]); }, rng));
  rows.push_back(check_op("sum", 1e-7, {r({3, 4})}, [](const V& x) { return sum(x[0]); }, rng));
  {
    const std::vector<Index> ids{2, 0, 2, 1, 3, 2};
    rows.push_back(check_op("embedding", 1e-6, {r({4, 3})},
                            [ids](const V& x) { return embedding(x[0], ids, {2, 3, 3}); }, rng));
    const std::vector<Index> targets{1, 0, 4};
    rows.push_back(check_op("cross_entropy", 1e-6, {r({3, 5})},
                            [targets](const V& x) { return cross_entropy(x[0], targets); }, rng));
  }
  {
    const QuantConfig cfg{4, 3};
    rows.push_back(check_op("expand_groups", 1e-6, {r({2, 3})},
                            [cfg](const V& x) { return expand_groups(x[0], 8, cfg); }, rng));
  }

  {
    // Straight-through ops: identity and the inclusive 0/1 mask.
    Tape<double> tape;
    const Tensor<double> x = tape.leaf(Tensor<double>::from({6}, {-1.5, -0.5, 0.5, 1.5, 2.5, 5.6}));
    const Tensor<double> w = random_tensor(rng, {6});
    tape.backward(sum(mul(round_ste(x), w)));
    rows.push_back(check_exact("round_ste", tape.grad(x), w.array()));
  }
  {
    Tape<double> tape;
    const Tensor<double> x = tape.leaf(Tensor<double>::from({5}, {-1.0, 0.0, 5.3, 15.0, 17.0}));
    const Tensor<double> w = random_tensor(rng, {5});
    tape.backward(sum(mul(clip_ste(x, 0.0, 15.0), w)));
    Buffer<double> mask(5);
    mask << 0, 1, 1, 1, 0;
    rows.push_back(check_exact("clip_ste", tape.grad(x), w.array() * mask));
  }
  {
    Tape<double> tape;
    const Tensor<double> x = tape.leaf(r({3, 3}));
    tape.backward(mse_loss(x, x));
    rows.push_back(check_exact("mse_self", tape.grad(x), Buffer<double>::Zero(9)));
  }

  {
    const QuantConfig cfg{4, 4};
    const QdqGradInputs in = random_qdq_inputs(rng, {{3, 10}}, cfg);
    const Tensor<double> w = random_tensor(rng, {3, 10}, -1.0, 1.0);
    const auto loss = [w](std::span<const Tensor<double>> q) { return sum(mul(q[0], w)); };
    rows.push_back(check_qdq_path("qdq_v", 1e-4, in, cfg, {Trainable::kV}, loss));
    rows.push_back(check_qdq_path("qdq_alpha", 1e-4, in, cfg, {Trainable::kAlpha}, loss));
    rows.push_back(check_qdq_path("qdq_beta", 1e-4, in, cfg, {Trainable::kBeta}, loss));
  }

  {
    constexpr Index d = 8, d_ff = 16, heads = 2;
    const BlockWeights<double> block = random_block(rng, d, d_ff, 0.5);
    const Tensor<double> x = r({2, 3, d});
    rows.push_back(check_op(
        "block_forward", 1e-5, {x, block.wq, block.wk, block.wv, block.wo, block.w_up, block.w_down},
        [block](const V& in) {
          const std::vector<Tensor<double>> lin(in.begin() + 1, in.end());
          return block_forward(block.with_linears(lin), in[0], heads);
        },
        rng));

    const QuantConfig cfg{4, 4};
    std::vector<Shape> shapes;
    for (const Tensor<double>* t : block.linears()) shapes.push_back(t->shape());
    QdqGradInputs in = random_qdq_inputs(rng, shapes, cfg);
    for (std::size_t j = 0; j < in.weights.size(); ++j) in.weights[j] = *block.linears()[j];
    const BlockObjective<double> objective(block, x, heads);
    const std::vector<Index> all{0, 1};
    rows.push_back(check_qdq_path("block_qdq", 1e-4, in, cfg, {Trainable::kV, Trainable::kAlpha, Trainable::kBeta},
                                  [&](std::span<const Tensor<double>> q) { return objective.loss(q, all); }));
  }
  return rows;
}

std::vector<Variant> parse_grid(const std::string& grid, const TuneConfig& base) {
  std::vector<Variant> out;
  std::stringstream ss(grid);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    Variant v{item, Method::kSignRound, base};
    if (item == "rtn") {
      v.method = Method::kRtn;
    } else if (item == "rounding" || item == "clip" || item == "both") {
      v.tune.optimizer = OptimizerKind::kSignSgd;
      v.tune.mode = parse_mode(item);
    } else {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ArgumentError("grid entry '" + item + "' is not optimizer:lr or a mode");
      v.tune.optimizer = parse_optimizer(item.substr(0, colon));
      std::size_t used = 0;
      const std::string lr = item.substr(colon + 1);
      try {
        v.tune.lr0 = std::stod(lr, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != lr.size()) throw ArgumentError("grid entry '" + item + "' has a bad learning rate");
    }
    v.tune.validate();
    out.push_back(std::move(v));
  }
  if (out.empty()) throw ArgumentError("empty comparison grid");
  return out;
}

std::vector<Variant> default_grid(const TuneConfig& base) {
  return parse_grid(
      "signsgd:2.5e-3,signsgd:5e-3,signsgd:1e-2,signsgd:2e-2,"
      "adam:2.5e-3,adam:5e-3,adam:1e-2,adam:2e-2,"
      "rtn,rounding,clip,both",
      base);
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    rows_json.push_back({{"config", r.config},
                         {"variant", r.variant},
                         {"method", r.method},
                         {"optimizer", r.optimizer},
                         {"mode", r.mode},
                         {"lr", r.lr},
                         {"seed", r.seed},
                         {"rtn_loss", r.rtn_loss},
                         {"tuned_loss", r.tuned_loss},
                         {"block_rtn_loss", r.block_rtn_loss},
                         {"block_tuned_loss", r.block_tuned_loss},
                         {"ppl_fp", r.ppl_fp},
                         {"ppl_rtn", r.ppl_rtn},
                         {"ppl_tuned", r.ppl_tuned}});
  }
  return {{"rows", rows_json}};
}

std::string AblationReport::to_text() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %-16s %-9s %-9s %-8s %8s %12s %12s %10s %10s %10s\n", "config", "variant",
                "method", "optimizer", "mode", "lr", "rtn_loss", "tuned_loss", "ppl_fp", "ppl_rtn", "ppl_tuned");
  out += line;
  for (const AblationRow& r : rows) {
    std::snprintf(line, sizeof line, "%-8s %-16s %-9s %-9s %-8s %8.2e %12.4e %12.4e %10.4f %10.4f %10.4f\n",
                  r.config.c_str(), r.variant.c_str(), r.method.c_str(), r.optimizer.c_str(), r.mode.c_str(), r.lr,
                  r.rtn_loss, r.tuned_loss, r.ppl_fp, r.ppl_rtn, r.ppl_tuned);
    out += line;
  }
  return out;
}

AblationReport compare_quantizers(const Model& model, const CalibSet& calib, std::span<const Token> heldout,
                                  const QuantConfig& qcfg, std::span<const Variant> variants) {
  if (variants.empty()) throw ArgumentError("no variants to compare");
  const double ppl_fp = perplexity(model, heldout);
  const QuantizedModel rtn_model = tune_model(model, calib, qcfg, variants.front().tune, Method::kRtn);
  const double ppl_rtn = perplexity(rtn_model.model, heldout);

  AblationReport report;
  report.rows.resize(variants.size());
  parallel_for(static_cast<Index>(variants.size()), [&](Index i) {
    const Variant& v = variants[static_cast<std::size_t>(i)];
    const QuantizedModel q = tune_model(model, calib, qcfg, v.tune, v.method);
    AblationRow& row = report.rows[static_cast<std::size_t>(i)];
    row.config = qcfg.label();
    row.variant = v.name;
    row.method = to_string(v.method);
    row.optimizer = v.method == Method::kRtn ? "-" : to_string(v.tune.optimizer);
    row.mode = v.method == Method::kRtn ? "-" : to_string(v.tune.mode);
    row.lr = v.method == Method::kRtn ? 0.0 : v.tune.lr0;
    row.seed = v.tune.seed;
    for (const BlockReport& b : q.reports) {
      row.block_rtn_loss.push_back(b.rtn_loss);
      row.block_tuned_loss.push_back(b.tuned_loss);
      row.rtn_loss += b.rtn_loss / static_cast<double>(q.reports.size());
      row.tuned_loss += b.tuned_loss / static_cast<double>(q.reports.size());
    }
    row.ppl_fp = ppl_fp;
    row.ppl_rtn = ppl_rtn;
    row.ppl_tuned = v.method == Method::kRtn ? ppl_rtn : perplexity(q.model, heldout);
  });
  return report;
}

std::vector<ParamHistogram> param_histograms(const std::vector<std::vector<TunedParams<float>>>& snapshots) {
  if (snapshots.empty()) throw ArgumentError("no parameter snapshots");
  std::vector<ParamHistogram> out;
  const auto bin = [](ParamHistogram& h, double value) {
    const double t = (value - h.lo) / (h.hi - h.lo) * kHistogramBins;
    const auto k = static_cast<std::size_t>(std::clamp(std::floor(t), 0.0, double(kHistogramBins - 1)));
    ++h.counts[k];
  };
  for (std::size_t b = 0; b < snapshots.size(); ++b) {
    ParamHistogram v{static_cast<Index>(b), "abs_v", 0.0, kRoundingBound, std::vector<std::uint64_t>(kHistogramBins)};
    ParamHistogram a{static_cast<Index>(b), "alpha", kClipScaleMin, 1.0, std::vector<std::uint64_t>(kHistogramBins)};
    ParamHistogram be{static_cast<Index>(b), "beta", kClipScaleMin, 1.0, std::vector<std::uint64_t>(kHistogramBins)};
    for (const TunedParams<float>& p : snapshots[b]) {
      for (float x : p.v.values()) bin(v, std::abs(static_cast<double>(x)));
      for (float x : p.alpha.values()) bin(a, x);
      for (float x : p.beta.values()) bin(be, x);
    }
    out.push_back(std::move(v));
    out.push_back(std::move(a));
    out.push_back(std::move(be));
  }
  return out;
}

std::string emit_param_stats(const std::vector<std::vector<TunedParams<float>>>& snapshots) {
  std::string out = "block,param,bin,lo,hi,count\n";
  char line[128];
  for (const ParamHistogram& h : param_histograms(snapshots)) {
    const double width = (h.hi - h.lo) / kHistogramBins;
    for (int k = 0; k < kHistogramBins; ++k) {
      std::snprintf(line, sizeof line, "%lld,%s,%d,%.6g,%.6g,%llu\n", static_cast<long long>(h.block), h.param.c_str(),
                    k, h.lo + k * width, h.lo + (k + 1) * width,
                    static_cast<unsigned long long>(h.counts[static_cast<std::size_t>(k)]));
      out += line;
    }
  }
  return out;
}

}  // namespace roundfit
