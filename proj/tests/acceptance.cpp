// One PASS/FAIL line per acceptance criterion. Exit status is nonzero if any line fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "roundfit/cli.hpp"
#include "roundfit/model_io.hpp"
#include "roundfit/oracle.hpp"
#include "roundfit/train.hpp"

using namespace roundfit;

namespace {

using Clock = std::chrono::steady_clock;

// Frozen from one oracle run on oracle_fixture(0, 8, 16), bits 2.
constexpr double kFrozenGapRatio = 1.0;
constexpr Index kPretrainSteps = 200;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Model default_model(std::uint64_t seed) {
  ModelConfig mc;
  mc.seed = seed;
  TrainConfig tc;
  tc.steps = kPretrainSteps;
  tc.seed = seed;
  return pretrained_model(mc, tc);
}

Outcome lr_budget() {
  double total = 0.0;
  for (Index t = 0; t < 200; ++t) total += lr_at(t, 200, 5e-3);
  return {total >= 0.4975 && total <= 0.5075 && std::abs(total - 0.5025) < 1e-12, fmt("sum %.10f", total)};
}

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  const auto rows = grad_check_suite(0);
  double worst = 0.0;
  std::string worst_op, failed;
  for (const auto& r : rows) {
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_op = r.op;
    }
    if (!r.pass || r.max_rel_err > 1e-4) failed += " " + r.op;
  }
  const double secs = seconds_since(t0);
  return {failed.empty() && secs < 30.0,
          fmt("%zu rows, worst %.2e (%s), %.2fs%s", rows.size(), worst, worst_op.c_str(), secs,
              failed.empty() ? "" : (", failing:" + failed).c_str())};
}

Outcome rtn_bound() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  constexpr Index kRows = 32, kCols = 261;  // ragged against G=8 and G=32
  Index checked = 0, violations = 0, clipped = 0;
  double worst = 0.0;
  for (const int bits : {2, 3, 4, 8}) {
    for (const Index gs : {Index(-1), Index(8), Index(32)}) {
      const QuantConfig cfg{bits, gs};
      Buffer<double> b(kRows * kCols);
      const double spread = std::exp(3.0 * u(rng));
      for (Index i = 0; i < b.size(); ++i) b(i) = spread * u(rng) + 0.3 * spread * u(rng) * (i % 3 == 0);
      const Tensor<double> w({kRows, kCols}, b);
      const auto q = rtn(w, cfg);
      const auto slices = group_view(w.shape(), cfg);
      for (std::size_t k = 0; k < slices.size(); ++k) {
        const double s = q.groups[k].scale;
        const int zp = q.groups[k].zero_point;
        for (Index j = 0; j < slices[k].size; ++j) {
          const Index i = slices[k].row * kCols + slices[k].begin + j;
          const double x = w[i] / s + zp;
          if (x < -0.5 || x > cfg.max_code() + 0.5) {
            ++clipped;
            continue;
          }
          ++checked;
          const double err = std::abs(w[i] - q.dequantized[i]);
          worst = std::max(worst, err / s);
          if (err > s / 2 + 1e-6 * s) ++violations;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && checked + clipped >= 100000 && secs < 10.0,
          fmt("f64, %lld elements checked, %lld clipped, worst |W-W~|/s %.6f, %lld violations, %.2fs",
              static_cast<long long>(checked), static_cast<long long>(clipped), worst,
              static_cast<long long>(violations), secs)};
}

Outcome optimality_sandwich() {
  const auto t0 = Clock::now();
  const auto f = oracle_fixture(0, 8, 16);
  TuneConfig t;
  t.steps = 2000;
  t.seed = 0;
  const auto r = brute_force_rounding(f.weight, f.x, {2, -1}, t);
  const double secs = seconds_since(t0);
  const bool ok = r.optimal_mse <= r.tuned_mse && r.tuned_mse <= r.rtn_mse && r.gap_ratio <= kFrozenGapRatio &&
                  secs < 60.0;
  return {ok, fmt("optimal %.10g <= tuned %.10g <= rtn %.10g, gap %.6f (frozen %.1f), %.2fs", r.optimal_mse,
                  r.tuned_mse, r.rtn_mse, r.gap_ratio, kFrozenGapRatio, secs)};
}

Outcome monotone_improvement(const Model& model) {
  const auto t0 = Clock::now();
  const CalibSet calib = synth_tokens(0, 64, 128, model.config.vocab_size);
  TuneConfig t;
  t.batch_size = calib.nsamples();
  std::string detail;
  bool ok = true;
  for (const QuantConfig q : {QuantConfig{2, 8}, QuantConfig{4, -1}}) {
    const QuantizedModel qm = tune_model(model, calib, q, t, Method::kSignRound);
    for (const BlockReport& r : qm.reports) {
      const bool block_ok = r.best_loss <= r.rtn_loss && r.tuned_loss <= r.rtn_loss &&
                            (r.rtn_loss > 0.0 || r.best_loss == r.rtn_loss);
      ok = ok && block_ok;
      detail += fmt("%s b%lld %.3e<=%.3e; ", q.label().c_str(), static_cast<long long>(r.block), r.best_loss,
                    r.rtn_loss);
    }
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 300.0, detail + fmt("%.1fs", secs)};
}

struct EndToEnd {
  Outcome ppl;
  Outcome bounds;
};

EndToEnd end_to_end() {
  const auto t0 = Clock::now();
  int wins = 0;
  std::size_t violations = 0;
  Index steps = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Model m = default_model(seed);
    const CalibSet calib = synth_tokens(seed, 64, 128, m.config.vocab_size);
    const TokenSequence held = synth_heldout(seed, 10000, m.config.vocab_size);
    TuneConfig t;
    t.seed = seed;
    const QuantizedModel rq = tune_model(m, calib, {2, 8}, t, Method::kRtn);
    const QuantizedModel sq = tune_model(m, calib, {2, 8}, t, Method::kSignRound);
    const double p_rtn = perplexity(rq.model, held);
    const double p_sr = perplexity(sq.model, held);
    wins += p_sr <= p_rtn;
    for (const auto& r : sq.reports) {
      violations += r.bound_violations;
      steps += r.steps;
    }
    detail += fmt("s%llu %.3f/%.3f ", static_cast<unsigned long long>(seed), p_sr, p_rtn);
  }
  const double secs = seconds_since(t0);
  return {{wins >= 9 && secs < 900.0, fmt("signround<=rtn in %d/10 seeds, %.1fs: %s", wins, secs, detail.c_str())},
          {violations == 0, fmt("%zu violations over %lld tuning steps", violations, static_cast<long long>(steps))}};
}

Outcome ablation_harness() {
  const auto t0 = Clock::now();
  const auto path = std::filesystem::temp_directory_path() / "roundfit_acceptance_compare.json";
  std::ostringstream out, err;
  const int code = run_cli({"roundfit", "compare", "--init-seed", "0", "--out", path.string()}, out, err);
  const double secs = seconds_since(t0);
  if (code != 0) return {false, fmt("compare exited %d: %s", code, err.str().c_str())};
  const auto bytes = read_file_bytes(path);
  const auto rows = nlohmann::json::parse(bytes.begin(), bytes.end())["rows"];
  std::filesystem::remove(path);
  int optimizer_cells = 0;
  bool modes[4] = {false, false, false, false};
  bool finite = true;
  for (const auto& r : rows) {
    finite = finite && std::isfinite(r["tuned_loss"].get<double>()) && std::isfinite(r["ppl_tuned"].get<double>());
    const std::string v = r["variant"];
    if (v.find(':') != std::string::npos) ++optimizer_cells;
    if (v == "rounding") modes[0] = true;
    if (v == "clip") modes[1] = true;
    if (v == "both") modes[2] = true;
    if (v == "rtn") modes[3] = true;
  }
  const bool ok = optimizer_cells == 8 && modes[0] && modes[1] && modes[2] && modes[3] && finite && secs < 1800.0;
  return {ok, fmt("%zu rows (%d optimizer x lr cells, mode rows %s), %.1fs", rows.size(), optimizer_cells,
                  (modes[0] && modes[1] && modes[2] && modes[3]) ? "rounding/clip/both/rtn" : "incomplete", secs)};
}

Outcome determinism_and_formats() {
  const auto t0 = Clock::now();
  ModelConfig mc;
  mc.d_model = 32;
  mc.d_ff = 64;
  mc.n_heads = 2;
  mc.max_seq_len = 32;
  mc.seed = 4;
  const Model m = model_init(mc);
  const CalibSet calib = synth_tokens(4, 32, 16, mc.vocab_size);
  TuneConfig t;
  t.steps = 20;
  t.seed = 4;
  const auto file_bytes = [&] {
    const QuantizedModel q = tune_model(m, calib, {3, 8}, t, Method::kSignRound);
    return encode_tensor_file(quantized_model_to_file(q.model, q.packed));
  };
  const bool same_packed = file_bytes() == file_bytes();

  bool packs = true;
  std::mt19937_64 rng(8);
  for (const int bits : {2, 3, 4, 8}) {
    const int levels = 1 << bits;
    std::vector<Code> codes(static_cast<std::size_t>(levels * 37 + 5));
    for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = static_cast<Code>(i % static_cast<std::size_t>(levels));
    std::shuffle(codes.begin(), codes.end(), rng);
    packs = packs && unpack_codes(pack_codes(codes, bits), bits, static_cast<Index>(codes.size())) == codes;
  }

  const auto fp = encode_tensor_file(model_to_file(m));
  const auto back = encode_tensor_file(decode_tensor_file(fp));
  const Model reread = model_from_file(decode_tensor_file(fp));
  bool same_values = true;
  const auto a = m.named_tensors(), b = reread.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    same_values = same_values && std::memcmp(a[i].second.data(), b[i].second.data(),
                                              sizeof(float) * static_cast<std::size_t>(a[i].second.numel())) == 0;
  }
  const double secs = seconds_since(t0);
  return {same_packed && packs && back == fp && same_values && secs < 10.0,
          fmt("packed files identical %s, pack/unpack %s, tensor file %s, %.2fs", same_packed ? "yes" : "no",
              packs ? "exact" : "MISMATCH", back == fp && same_values ? "bit-exact" : "MISMATCH", secs)};
}

int failures = 0;

void report(int id, const char* name, const Outcome& o) {
  std::printf("criterion %d %-26s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

void guarded(int id, const char* name, const std::function<Outcome()>& fn) {
  try {
    report(id, name, fn());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("error: ") + e.what()});
  }
}

}  // namespace

int main() {
  guarded(1, "lr budget", lr_budget);
  guarded(2, "gradient oracle", gradient_oracle);
  guarded(3, "rtn error bound", rtn_bound);
  guarded(4, "brute-force sandwich", optimality_sandwich);
  guarded(5, "monotone improvement", [] { return monotone_improvement(default_model(0)); });
  EndToEnd e{{false, "not run"}, {false, "not run"}};
  try {
    e = end_to_end();
  } catch (const std::exception& ex) {
    e.ppl = {false, std::string("error: ") + ex.what()};
  }
  report(6, "signround vs rtn ppl", e.ppl);
  guarded(7, "ablation harness", ablation_harness);
  guarded(8, "determinism and formats", determinism_and_formats);
  report(9, "bound invariants", e.bounds);
  std::printf("%d failing\n", failures);
  return failures == 0 ? 0 : 1;
}
