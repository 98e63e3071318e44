#include "roundfit/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "roundfit/calib.hpp"
#include "roundfit/model_io.hpp"
#include "roundfit/oracle.hpp"
#include "roundfit/train.hpp"
#include "roundfit/tuner.hpp"

namespace roundfit {

namespace {

struct ModelFlags {
  ModelConfig config;
  std::string model_path;
  std::optional<std::uint64_t> init_seed;
  TrainConfig train{.steps = 200};

  void add_shape(CLI::App* app) {
    app->add_option("--vocab", config.vocab_size, "Vocabulary size")->capture_default_str();
    app->add_option("--d-model", config.d_model, "Hidden width")->capture_default_str();
    app->add_option("--heads", config.n_heads, "Attention heads")->capture_default_str();
    app->add_option("--layers", config.n_layers, "Transformer blocks")->capture_default_str();
    app->add_option("--d-ff", config.d_ff, "MLP width")->capture_default_str();
    app->add_option("--max-seq-len", config.max_seq_len, "Positional table length")->capture_default_str();
    app->add_option("--train-steps", train.steps, "Next-token training steps on the synthetic source after init")
        ->capture_default_str();
    app->add_option("--train-lr", train.lr, "Adam learning rate for --train-steps")->capture_default_str();
  }

  Model build(std::uint64_t seed) const {
    ModelConfig c = config;
    c.seed = seed;
    TrainConfig t = train;
    t.seed = seed;
    return pretrained_model(c, t);
  }

  void add_source(CLI::App* app) {
    auto* m = app->add_option("--model", model_path, "Model file");
    auto* s = app->add_option("--init-seed", init_seed, "Build a fresh seeded model instead of loading one");
    m->excludes(s);
    add_shape(app);
  }

  Model resolve() const {
    if (!model_path.empty()) return load_model(model_path);
    if (!init_seed) throw ArgumentError("one of --model or --init-seed is required");
    return build(*init_seed);
  }
};

struct QuantFlags {
  QuantConfig quant;
  TuneConfig tune;
  std::string method = "signround";
  std::string optimizer = "signsgd";
  std::string mode = "both";
  std::optional<double> lr;
  Index seqlen = 64;
  Index nsamples = 128;
  std::string calib = "synth";

  std::vector<CLI::Option*> tuning_options;

  void add(CLI::App* app, bool with_method) {
    app->add_option("--bits", quant.bits, "Weight bits")->check(CLI::IsMember({2, 3, 4, 8}))->capture_default_str();
    app->add_option("--group-size", quant.group_size, "Group size along the input dimension, -1 for whole rows")
        ->capture_default_str();
    if (with_method) {
      app->add_option("--method", method, "Quantizer")->check(CLI::IsMember({"rtn", "signround"}))
          ->capture_default_str();
    }
    tuning_options = {
        app->add_option("--optimizer", optimizer, "Optimizer")->check(CLI::IsMember({"signsgd", "adam"}))
            ->capture_default_str(),
        app->add_option("--steps", tune.steps, "Tuning steps per block")->capture_default_str(),
        app->add_option("--lr", lr, "Initial learning rate (default 5e-3 for signsgd, 1e-2 for adam)"),
        app->add_option("--clip-lr-scale", tune.clip_lr_scale, "Learning-rate factor for the clip scales")
            ->capture_default_str(),
        app->add_option("--batch-size", tune.batch_size, "Samples per tuning step")->capture_default_str(),
        app->add_option("--tune", mode, "Trainables")->check(CLI::IsMember({"rounding", "clip", "both"}))
            ->capture_default_str(),
    };
    app->add_option("--seqlen", seqlen, "Calibration sequence length")->capture_default_str();
    app->add_option("--nsamples", nsamples, "Calibration sequences")->capture_default_str();
    app->add_option("--seed", tune.seed, "Seed for calibration data and batch draws")->capture_default_str();
    app->add_option("--quantized-input", tune.quantized_input,
                    "Feed each block the outputs of the already-quantized blocks (true|false)")
        ->capture_default_str();
    app->add_option("--calib", calib, "Token file, or 'synth' for the seeded Markov source")->capture_default_str();
  }

  void finish() {
    quant.validate();
    tune.optimizer = parse_optimizer(optimizer);
    tune.mode = parse_mode(mode);
    tune.lr0 = lr ? *lr : (tune.optimizer == OptimizerKind::kAdam ? kAdamDefaultLr : TuneConfig{}.lr0);
    tune.validate();
    if (parse_method(method) == Method::kRtn) {
      for (const CLI::Option* o : tuning_options) {
        if (o->count() > 0) throw ArgumentError(o->get_name() + " has no effect with --method rtn");
      }
    }
  }

  CalibSet load_calib(const ModelConfig& model) const {
    if (seqlen > model.max_seq_len) {
      throw DataError("--seqlen " + std::to_string(seqlen) + " exceeds the model's max_seq_len " +
                      std::to_string(model.max_seq_len));
    }
    if (calib == "synth") return synth_tokens(tune.seed, seqlen, nsamples, model.vocab_size);
    return load_tokens(calib, seqlen, nsamples, model.vocab_size);
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write '" + path + "'");
  f << text;
  if (!f) throw FormatError("short write to '" + path + "'");
}

TokenSequence heldout_tokens(const std::string& tokens_path, std::uint64_t seed, Index n, Index vocab) {
  if (!tokens_path.empty()) return read_token_file(tokens_path, vocab);
  return synth_heldout(seed, n, vocab);
}

nlohmann::json tune_config_json(const TuneConfig& t, Method method) {
  nlohmann::json j = {{"method", to_string(method)}, {"quantized_input", t.quantized_input}, {"seed", t.seed}};
  if (method == Method::kSignRound) {
    j.update({{"optimizer", to_string(t.optimizer)},
              {"mode", to_string(t.mode)},
              {"steps", t.steps},
              {"lr0", t.lr0},
              {"clip_lr_scale", t.clip_lr_scale},
              {"batch_size", t.batch_size}});
  }
  return j;
}

void print_block_table(std::ostream& out, const std::vector<BlockReport>& reports) {
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %14s %14s %14s %10s\n", "block", "rtn_loss", "best_loss", "tuned_loss",
                "best_step");
  out << line;
  for (const BlockReport& r : reports) {
    std::snprintf(line, sizeof line, "%-6lld %14.6e %14.6e %14.6e %10lld\n", static_cast<long long>(r.block),
                  r.rtn_loss, r.best_loss, r.tuned_loss, static_cast<long long>(r.best_step));
    out << line;
  }
}

/// Per-block output MSE of `model` against `reference` on the reference's own hidden states.
std::vector<double> block_mse(const Model& model, const Model& reference, std::span<const Token> tokens) {
  if (model.config.d_model != reference.config.d_model || model.config.n_layers != reference.config.n_layers) {
    throw ArgumentError("model and reference have different shapes");
  }
  constexpr Index kMaxSequences = 16;
  const Index seq = reference.config.max_seq_len;
  const Index count = std::min<Index>(kMaxSequences, static_cast<Index>(tokens.size()) / seq);
  if (count < 1) throw DataError("need at least " + std::to_string(seq) + " held-out tokens for block MSE");
  const CalibSet set = chunk_tokens(tokens, seq, count, "heldout");
  std::vector<double> out;
  Tensor<float> h = capture_block_inputs(reference, set, 0, false).inputs;
  for (std::size_t k = 0; k < reference.blocks.size(); ++k) {
    const Tensor<float> y_ref = run_block(reference.blocks[k], h, reference.config.n_heads);
    const Tensor<float> y = run_block(model.blocks[k], h, model.config.n_heads);
    out.push_back((y.array().cast<double>() - y_ref.array().cast<double>()).square().mean());
    h = y_ref;
  }
  return out;
}

int cmd_init(const ModelFlags& mf, std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  const Model m = mf.build(seed);
  TensorFile file = model_to_file(m);
  file.meta["training"] = {{"steps", mf.train.steps}, {"lr", mf.train.lr}, {"batch_size", mf.train.batch_size},
                           {"nsamples", mf.train.nsamples}, {"seed", seed}};
  save_tensors(out_path, file);
  out << "wrote " << out_path << " (" << config_to_json(m.config).dump() << ")\n";
  return kExitOk;
}

int cmd_quantize(const ModelFlags& mf, QuantFlags& qf, const std::string& out_path, std::string report_path,
                 const std::string& stats_path, std::ostream& out) {
  qf.finish();
  const Method method = parse_method(qf.method);
  const Model model = mf.resolve();
  const CalibSet calib = qf.load_calib(model.config);
  const QuantizedModel q = tune_model(model, calib, qf.quant, qf.tune, method);

  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockReport& r : q.reports) blocks.push_back(r.to_json());
  const nlohmann::json report = {{"quantization", {{"bits", qf.quant.bits},
                                                   {"group_size", qf.quant.group_size},
                                                   {"label", qf.quant.label()}}},
                                 {"tuning", tune_config_json(qf.tune, method)},
                                 {"calibration", {{"source", calib.source},
                                                  {"seqlen", calib.seqlen},
                                                  {"nsamples", calib.nsamples()}}},
                                 {"blocks", blocks}};
  save_tensors(out_path, quantized_model_to_file(q.model, q.packed, {{"report", report}}));
  if (report_path.empty()) report_path = out_path + ".json";
  write_text(report_path, report.dump(2) + "\n");
  if (!stats_path.empty()) write_text(stats_path, emit_param_stats(q.snapshots));
  out << qf.quant.label() << " " << to_string(method) << " -> " << out_path << "\n";
  print_block_table(out, q.reports);
  return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& reference_path, const std::string& tokens_path,
             std::uint64_t seed, Index ntokens, bool json, std::ostream& out) {
  const TensorFile file = load_tensors(model_path);
  const Model model = model_from_file(file);
  const TokenSequence tokens = heldout_tokens(tokens_path, seed, ntokens, model.config.vocab_size);
  const double ppl = perplexity(model, tokens);
  std::vector<double> mse;
  if (!reference_path.empty()) mse = block_mse(model, load_model(reference_path), tokens);
  const std::string kind = file.meta.value("kind", "model");
  if (json) {
    out << nlohmann::json{{"model", model_path}, {"kind", kind}, {"tokens", tokens.size()},
                          {"ppl", ppl}, {"block_mse", mse}}
               .dump()
        << "\n";
    return kExitOk;
  }
  char line[128];
  std::snprintf(line, sizeof line, "%-12s %s\n%-12s %zu\n%-12s %.6f\n", "model", kind.c_str(), "tokens",
                tokens.size(), "ppl", ppl);
  out << line;
  for (std::size_t k = 0; k < mse.size(); ++k) {
    std::snprintf(line, sizeof line, "block %-6zu %.6e\n", k, mse[k]);
    out << line;
  }
  return kExitOk;
}

int cmd_oracle(int bits, Index width, Index samples, Index steps, std::uint64_t seed, const std::string& fixture,
               std::optional<double> max_gap, bool json, std::ostream& out, std::ostream& err) {
  const QuantConfig qcfg{bits, -1};
  qcfg.validate();
  const OracleFixture f = fixture == "grid" ? on_grid_fixture(samples, seed) : oracle_fixture(seed, width, samples);
  if (fixture == "grid" && bits != 2) throw ArgumentError("the on-grid fixture is defined for --bits 2");
  TuneConfig tcfg;
  tcfg.steps = steps;
  tcfg.seed = seed;
  const OracleResult r = brute_force_rounding(f.weight, f.x, qcfg, tcfg);
  const bool sandwich = r.optimal_mse <= r.rtn_mse && r.optimal_mse <= r.tuned_mse + 1e-9;
  const bool gap_ok = !max_gap || r.gap_ratio <= *max_gap;
  if (json) {
    nlohmann::json j = r.to_json();
    j["pass"] = sandwich && gap_ok;
    out << j.dump() << "\n";
  } else {
    char line[160];
    std::snprintf(line, sizeof line,
                  "candidates %llu\noptimal_mse %.9e\nrtn_mse     %.9e\ntuned_mse   %.9e\ngap_ratio   %.6f\n",
                  static_cast<unsigned long long>(r.candidates), r.optimal_mse, r.rtn_mse, r.tuned_mse, r.gap_ratio);
    out << line;
  }
  if (!sandwich) {
    err << "FAIL: optimal " << r.optimal_mse << " is not below rtn " << r.rtn_mse << " and tuned " << r.tuned_mse
        << "\n";
    return kExitFailed;
  }
  if (!gap_ok) {
    err << "FAIL: gap ratio " << r.gap_ratio << " exceeds " << *max_gap << "\n";
    return kExitFailed;
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, bool json, std::ostream& out, std::ostream& err) {
  const std::vector<GradCheckRow> rows = grad_check_suite(seed);
  bool ok = true;
  nlohmann::json j = nlohmann::json::array();
  char line[128];
  for (const GradCheckRow& r : rows) {
    ok = ok && r.pass;
    j.push_back({{"op", r.op}, {"max_rel_err", r.max_rel_err}, {"tol", r.tol}, {"pass", r.pass}});
    std::snprintf(line, sizeof line, "%-20s %12.3e %10.1e  %s\n", r.op.c_str(), r.max_rel_err, r.tol,
                  r.pass ? "pass" : "FAIL");
    if (!json) out << line;
    if (!r.pass) err << "FAIL " << line;
  }
  if (json) out << j.dump() << "\n";
  return ok ? kExitOk : kExitFailed;
}

int cmd_compare(const ModelFlags& mf, QuantFlags& qf, const std::string& grid, const std::string& out_path,
                const std::string& tokens_path, Index ntokens, std::ostream& out) {
  qf.finish();
  const Model model = mf.resolve();
  const CalibSet calib = qf.load_calib(model.config);
  const TokenSequence heldout = heldout_tokens(tokens_path, qf.tune.seed, ntokens, model.config.vocab_size);
  const std::vector<Variant> variants = grid.empty() ? default_grid(qf.tune) : parse_grid(grid, qf.tune);
  const AblationReport report = compare_quantizers(model, calib, heldout, qf.quant, variants);
  out << report.to_text();
  if (!out_path.empty()) write_text(out_path, report.to_json().dump(2) + "\n");
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weight-only quantization with signed-gradient rounding and clip tuning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "roundfit 1.0");

  std::uint64_t seed = 0;
  bool json = false;
  std::string out_path, report_path, stats_path, tokens_path, reference_path, grid, model_path;
  Index ntokens = 10000;

  auto* init = app.add_subcommand("init", "Write a seeded full-precision toy model");
  ModelFlags init_model;
  init_model.add_shape(init);
  init->add_option("--init-seed,--seed", seed, "Initialization seed")->capture_default_str();
  init->add_option("--out", out_path, "Output model file")->required();

  auto* quantize = app.add_subcommand("quantize", "Quantize every block linear and write a packed model");
  ModelFlags q_model;
  QuantFlags q_flags;
  q_model.add_source(quantize);
  q_flags.add(quantize, true);
  quantize->add_option("--out", out_path, "Output quantized model file")->required();
  quantize->add_option("--report", report_path, "JSON tuning report (default: <out>.json)");
  quantize->add_option("--stats", stats_path, "CSV histograms of |V|, alpha and beta per block");

  auto* eval = app.add_subcommand("eval", "Perplexity and per-block output error on held-out tokens");
  eval->add_option("--model", model_path, "Model file (full precision or quantized)")->required();
  eval->add_option("--reference", reference_path, "Full-precision model for per-block MSE");
  eval->add_option("--tokens", tokens_path, "Held-out token file (default: synthetic held-out stream)");
  eval->add_option("--ntokens", ntokens, "Synthetic held-out tokens")->capture_default_str();
  eval->add_option("--seed", seed, "Seed of the synthetic token source")->capture_default_str();
  eval->add_flag("--json", json, "Machine-readable output");

  auto* oracle = app.add_subcommand("oracle", "Exhaustive rounding search against round-to-nearest and the tuner");
  int o_bits = 2;
  Index o_width = 8, o_samples = 16, o_steps = 2000;
  std::string o_fixture = "random";
  std::optional<double> o_max_gap;
  oracle->add_option("--bits", o_bits, "Weight bits")->check(CLI::Range(2, 8))->capture_default_str();
  oracle->add_option("--width", o_width, "Weights in the single group (at most 16)")->capture_default_str();
  oracle->add_option("--samples", o_samples, "Calibration columns")->capture_default_str();
  oracle->add_option("--steps", o_steps, "Tuner steps")->capture_default_str();
  oracle->add_option("--seed", seed, "Fixture seed")->capture_default_str();
  oracle->add_option("--fixture", o_fixture, "random or grid")->check(CLI::IsMember({"random", "grid"}))
      ->capture_default_str();
  oracle->add_option("--max-gap", o_max_gap, "Fail when tuned / optimal exceeds this");
  oracle->add_flag("--json", json, "Machine-readable output");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable op");
  gradcheck->add_option("--seed", seed, "Seed for random inputs")->capture_default_str();
  gradcheck->add_flag("--json", json, "Machine-readable output");

  auto* compare = app.add_subcommand("compare", "Optimizer and tuning-mode ablation table");
  ModelFlags c_model;
  QuantFlags c_flags;
  c_model.add_source(compare);
  c_flags.add(compare, false);
  compare->add_option("--grid", grid,
                      "Comma-separated cells: optimizer:lr, rounding, clip, both or rtn (default: full table)");
  compare->add_option("--out", out_path, "JSON report");
  compare->add_option("--tokens", tokens_path, "Held-out token file (default: synthetic held-out stream)");
  compare->add_option("--ntokens", ntokens, "Synthetic held-out tokens")->capture_default_str();

  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*init) return cmd_init(init_model, seed, out_path, out);
    if (*quantize) return cmd_quantize(q_model, q_flags, out_path, report_path, stats_path, out);
    if (*eval) return cmd_eval(model_path, reference_path, tokens_path, seed, ntokens, json, out);
    if (*oracle) return cmd_oracle(o_bits, o_width, o_samples, o_steps, seed, o_fixture, o_max_gap, json, out, err);
    if (*gradcheck) return cmd_gradcheck(seed, json, out, err);
    if (*compare) return cmd_compare(c_model, c_flags, grid, out_path, tokens_path, ntokens, out);
  } catch (const std::invalid_argument& e) {  // argument, dimension and size errors
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const EncodingError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitFailed;
  }
  return kExitUsage;
}

}  // namespace roundfit
