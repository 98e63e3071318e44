#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "roundfit/calib.hpp"
#include "roundfit/model.hpp"
#include "roundfit/quant.hpp"
#include "roundfit/tuner.hpp"

namespace roundfit {

/// Largest weight row the exhaustive rounding search accepts.
inline constexpr Index kMaxBruteForceWidth = 16;

struct OracleResult {
  std::vector<Code> optimal_codes;
  std::vector<Code> rtn_codes;
  std::vector<Code> tuned_codes;  // empty unless a tuner run was requested
  double optimal_mse = 0.0;
  double rtn_mse = 0.0;
  double tuned_mse = std::numeric_limits<double>::quiet_NaN();
  double gap_ratio = std::numeric_limits<double>::quiet_NaN();  // tuned / optimal, 1 when optimal is 0
  std::uint64_t candidates = 0;

  nlohmann::json to_json() const;
};

/// Mean over the b columns of (sum_i (w_i - w~_i) x_ib)^2 for w~ = s (codes - zp).
double rounding_mse(const Tensor<double>& weight, const Tensor<double>& x, const GroupParams<double>& group,
                    std::span<const Code> codes);

/// Exhaustive search over floor/ceil of every W/s + zp for a single-group 1 x n weight
/// (n <= 16) against inputs X [n x b], with alpha = beta = 1. When `tune` is given the
/// tuner is also run on the same problem in rounding mode with a full batch, and
/// tuned_mse / gap_ratio are filled in.
OracleResult brute_force_rounding(const Tensor<double>& weight, const Tensor<double>& x, const QuantConfig& qcfg,
                                  std::optional<TuneConfig> tune = std::nullopt);

/// Seeded 1 x n weight and n x b inputs.
struct OracleFixture {
  Tensor<double> weight;
  Tensor<double> x;
};
OracleFixture oracle_fixture(std::uint64_t seed, Index n, Index b);
/// A 1 x 8 bits=2 weight whose entries all sit on the quantization grid.
OracleFixture on_grid_fixture(Index b, std::uint64_t seed);

struct GradCheckRow {
  std::string op;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

/// Central finite differences (h = 1e-5, f64) against reverse-mode gradients for every
/// differentiable op, the quantize-dequantize path in V, alpha and beta, and a whole block.
std::vector<GradCheckRow> grad_check_suite(std::uint64_t seed);

/// Relative error max|a - n| / max(max|n|, tiny).
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// Straight-through surrogate of quantize-dequantize evaluated in plain scalar code: rounding
/// residuals and clip decisions are frozen at (V0, alpha0, beta0), everything else is smooth.
class QdqSurrogate {
 public:
  QdqSurrogate(const Tensor<double>& weight, const QuantConfig& cfg, const TunedParams<double>& base);
  Tensor<double> operator()(std::span<const double> v, std::span<const double> alpha,
                            std::span<const double> beta) const;

 private:
  Tensor<double> weight_;
  QuantConfig cfg_;
  std::vector<double> zp_residual_, code_residual_;
  std::vector<signed char> scale_floored_, zp_clip_, code_clip_;  // -1 low, 0 interior, +1 high
};

/// One ablation cell.
struct Variant {
  std::string name;
  Method method = Method::kSignRound;
  TuneConfig tune;
};

/// Parses a comma-separated grid such as "signsgd:5e-3,adam:1e-2,rounding,rtn".
/// Entries are optimizer:lr, a tuning mode (rounding|clip|both), or rtn.
std::vector<Variant> parse_grid(const std::string& grid, const TuneConfig& base);
/// Optimizer sweep plus mode sweep.
std::vector<Variant> default_grid(const TuneConfig& base);

struct AblationRow {
  std::string config;
  std::string variant;
  std::string method;
  std::string optimizer;
  std::string mode;
  double lr = 0.0;
  std::uint64_t seed = 0;
  double rtn_loss = 0.0;    // mean over blocks
  double tuned_loss = 0.0;  // mean over blocks
  std::vector<double> block_rtn_loss;
  std::vector<double> block_tuned_loss;
  double ppl_fp = 0.0;
  double ppl_rtn = 0.0;
  double ppl_tuned = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

AblationReport compare_quantizers(const Model& model, const CalibSet& calib, std::span<const Token> heldout,
                                  const QuantConfig& qcfg, std::span<const Variant> variants);

inline constexpr int kHistogramBins = 32;

struct ParamHistogram {
  Index block = 0;
  std::string param;  // "abs_v", "alpha" or "beta"
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::uint64_t> counts;
};

/// 32-bin histograms of |V| over [0, 0.5] and of alpha, beta over [1e-3, 1] for each block.
std::vector<ParamHistogram> param_histograms(const std::vector<std::vector<TunedParams<float>>>& snapshots);
/// CSV with columns block,param,bin,lo,hi,count.
std::string emit_param_stats(const std::vector<std::vector<TunedParams<float>>>& snapshots);

}  // namespace roundfit
