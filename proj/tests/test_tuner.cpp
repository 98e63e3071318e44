#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "roundfit/tuner.hpp"

using namespace roundfit;

namespace {

ModelConfig fixture_config(Index layers) {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 32;
  c.max_seq_len = 8;
  c.seed = 21;
  return c;
}

Buffer<double> buf(std::initializer_list<double> v) {
  Buffer<double> b(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) b(i++) = x;
  return b;
}

struct BlockFixture {
  Model model;
  Tensor<float> inputs;
};

BlockFixture block_fixture(Index nsamples = 32) {
  const Model m = model_init(fixture_config(1));
  const CalibSet c = synth_tokens(21, 8, nsamples, 64);
  return {m, capture_block_inputs(m, c, 0, false).inputs};
}

bool within(const Tensor<float>& t, Bounds b) {
  return t.array().minCoeff() >= b.lo && t.array().maxCoeff() <= b.hi;
}

}  // namespace

TEST(LrSchedule, Examples) {
  EXPECT_DOUBLE_EQ(lr_at(0, 200, 5e-3), 5e-3);
  EXPECT_DOUBLE_EQ(lr_at(100, 200, 5e-3), 2.5e-3);
  double total = 0.0;
  for (Index t = 0; t < 200; ++t) total += lr_at(t, 200, 5e-3);
  EXPECT_NEAR(total, 0.5025, 1e-12);
  EXPECT_NEAR(total, 5e-3 * 201 / 2, 1e-12);
  EXPECT_THROW(lr_at(200, 200, 5e-3), ArgumentError);
  EXPECT_THROW(lr_at(-1, 200, 5e-3), ArgumentError);
}

TEST(TuneConfig, DefaultsAndValidation) {
  const TuneConfig t;
  EXPECT_EQ(t.steps, 200);
  EXPECT_DOUBLE_EQ(t.lr0, 5e-3);
  EXPECT_EQ(t.batch_size, 8);
  EXPECT_EQ(t.mode, TuneMode::kBoth);
  EXPECT_TRUE(t.quantized_input);
  EXPECT_NO_THROW(t.validate());
  TuneConfig bad;
  bad.steps = 0;
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = {};
  bad.lr0 = 0.0;
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = {};
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ArgumentError);
  EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::kAdam);
  EXPECT_EQ(parse_mode("clip"), TuneMode::kClip);
  EXPECT_EQ(parse_method("rtn"), Method::kRtn);
  EXPECT_THROW(parse_optimizer("sgd"), ArgumentError);
}

TEST(SignSgd, Examples) {
  Buffer<double> p = buf({0.2, 0.0, 1.0});
  signsgd_step(p, buf({-3.1, 0.0, -0.2}), 5e-3, {-10.0, 1.0});
  EXPECT_DOUBLE_EQ(p(0), 0.205);
  EXPECT_EQ(p(1), 0.0);
  EXPECT_EQ(p(2), 1.0);
}

TEST(SignSgd, MoveIsExactlyLrWhenUnclamped) {
  Buffer<double> p = Buffer<double>::Zero(4);
  signsgd_step(p, buf({1e-30, -7.0, 2.0, -1e-12}), 0.125, kRoundingBounds);
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(std::abs(p(i)), 0.125);
}

TEST(Adam, FirstStepIsAboutLrTimesSign) {
  Buffer<double> p = Buffer<double>::Zero(1);
  auto st = AdamState<double>::zeros(1);
  adam_step(p, buf({2.0}), st, 5e-3, {-1.0, 1.0});
  // m_hat = 2, v_hat = 4, so the move is lr * 2 / (2 + 1e-8)
  EXPECT_NEAR(p(0), -5e-3 * 2.0 / (2.0 + 1e-8), 1e-18);
  EXPECT_NEAR(p(0), -4.99999e-3, 1e-8);
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, ZeroGradientWithZeroStateDoesNotMove) {
  Buffer<double> p = buf({0.3, -0.1});
  auto st = AdamState<double>::zeros(2);
  adam_step(p, buf({0.0, 0.0}), st, 1e-2, kRoundingBounds);
  EXPECT_EQ(p(0), 0.3);
  EXPECT_EQ(p(1), -0.1);
}

TEST(Adam, OppositeGradientsPartiallyCancel) {
  Buffer<double> p = Buffer<double>::Zero(1);
  auto st = AdamState<double>::zeros(1);
  adam_step(p, buf({1.0}), st, 1e-2, {-1.0, 1.0});
  adam_step(p, buf({-1.0}), st, 1e-2, {-1.0, 1.0});
  EXPECT_LT(std::abs(p(0)), 2 * 1e-2);
}

TEST(Adam, ClampsToBounds) {
  Buffer<double> p = buf({0.999});
  auto st = AdamState<double>::zeros(1);
  adam_step(p, buf({-5.0}), st, 0.5, kClipBounds);
  EXPECT_EQ(p(0), 1.0);
}

TEST(TuneBlock, SeededFixtureBeatsRtn) {
  const auto f = block_fixture();
  TuneConfig t;
  t.batch_size = 32;
  t.seed = 21;
  const auto r = tune_block(f.model.blocks[0], f.inputs, 2, {2, 8}, t);
  EXPECT_LT(r.best.loss, r.rtn_loss);
  EXPECT_EQ(r.history.size(), 200u);
  EXPECT_EQ(r.rtn_loss, r.history[0]);
  EXPECT_EQ(r.tuned_loss, r.best.loss);
  EXPECT_EQ(r.bound_violations, 0u);
}

TEST(TuneBlock, BestSnapshotIsHistoryMinimumAndReproducible) {
  const auto f = block_fixture(16);
  TuneConfig t;
  t.steps = 60;
  t.batch_size = 4;
  t.seed = 3;
  const auto r = tune_block(f.model.blocks[0], f.inputs, 2, {2, 8}, t);
  double running = std::numeric_limits<double>::infinity();
  Index argmin = -1;
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    if (r.history[i] < running) {
      running = r.history[i];
      argmin = static_cast<Index>(i);
    }
  }
  EXPECT_EQ(r.best.loss, running);
  EXPECT_EQ(r.best.step, argmin);
  // the snapshot reproduces the recorded loss on the batch of that step
  const BlockObjective<float> obj(f.model.blocks[0], f.inputs, 2);
  std::vector<Tensor<float>> qw;
  for (std::size_t k = 0; k < r.best.params.size(); ++k) qw.push_back(qdq(obj.weights()[k], {2, 8}, r.best.params[k]));
  const auto idx = draw_indices(16, 4, r.best.step, t.seed);
  EXPECT_EQ(static_cast<double>(obj.loss(qw, idx).item()), r.best.loss);
  for (const auto& p : r.best.params) {
    EXPECT_TRUE(within(p.v, kRoundingBounds));
    EXPECT_TRUE(within(p.alpha, kClipBounds));
    EXPECT_TRUE(within(p.beta, kClipBounds));
  }
}

TEST(TuneBlock, ModesOnlyTouchTheirParameters) {
  const auto f = block_fixture(8);
  TuneConfig t;
  t.steps = 30;
  t.batch_size = 8;
  t.mode = TuneMode::kRounding;
  t.lr0 = 5e-2;
  auto r = tune_block(f.model.blocks[0], f.inputs, 2, {2, 8}, t);
  ASSERT_GT(r.best.step, 0);
  bool moved = false;
  for (const auto& p : r.best.params) {
    EXPECT_TRUE((p.alpha.array() == 1.0f).all());
    EXPECT_TRUE((p.beta.array() == 1.0f).all());
    moved = moved || (p.v.array() != 0.0f).any();
  }
  EXPECT_TRUE(moved);
  t.mode = TuneMode::kClip;
  r = tune_block(f.model.blocks[0], f.inputs, 2, {2, 8}, t);
  ASSERT_GT(r.best.step, 0);
  for (const auto& p : r.best.params) EXPECT_TRUE((p.v.array() == 0.0f).all());
}

TEST(TuneBlock, OnGridWeightsHaveZeroLoss) {
  // zero weights sit on the grid of every config
  const auto f = block_fixture(4);
  const BlockWeights<float>& b = f.model.blocks[0];
  std::vector<Tensor<float>> zeros;
  for (const auto* w : b.linears()) zeros.push_back(Tensor<float>::zeros(w->shape()));
  TuneConfig t;
  t.steps = 5;
  t.batch_size = 4;
  const auto r = tune_block(b.with_linears(zeros), f.inputs, 2, {4, -1}, t);
  EXPECT_EQ(r.history[0], 0.0);
  EXPECT_EQ(r.best.step, 0);
  EXPECT_EQ(r.best.loss, 0.0);
}

TEST(TuneBlock, NanLossNamesTheStep) {
  auto f = block_fixture(4);
  Buffer<float> bad = f.inputs.array();
  bad(0) = std::numeric_limits<float>::quiet_NaN();
  TuneConfig t;
  t.steps = 3;
  t.batch_size = 4;
  try {
    tune_block(f.model.blocks[0], Tensor<float>(f.inputs.shape(), bad), 2, {2, 8}, t);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(TuneBlock, FullBatchNeverWorseThanRtnAcrossConfigs) {
  const auto f = block_fixture(8);
  for (const QuantConfig q : {QuantConfig{2, 8}, QuantConfig{3, -1}, QuantConfig{4, 4}}) {
    for (const auto opt : {OptimizerKind::kSignSgd, OptimizerKind::kAdam}) {
      TuneConfig t;
      t.steps = 25;
      t.batch_size = 8;
      t.optimizer = opt;
      const auto r = tune_block(f.model.blocks[0], f.inputs, 2, q, t);
      EXPECT_LE(r.tuned_loss, r.rtn_loss) << q.label();
      EXPECT_EQ(r.bound_violations, 0u);
    }
  }
}

TEST(TuneModel, DeterministicPackedOutput) {
  const Model m = model_init(fixture_config(2));
  const CalibSet c = synth_tokens(2, 8, 8, 64);
  TuneConfig t;
  t.steps = 10;
  t.batch_size = 4;
  const auto a = tune_model(m, c, {2, 8}, t, Method::kSignRound);
  const auto b = tune_model(m, c, {2, 8}, t, Method::kSignRound);
  EXPECT_EQ(a.packed, b.packed);
  EXPECT_EQ(a.packed.size(), 12u);
  EXPECT_EQ(a.packed.count("blocks.1.w_down"), 1u);
  EXPECT_TRUE((a.model.lm_head.array() == m.lm_head.array()).all());
  EXPECT_TRUE((a.model.tok_emb.array() == m.tok_emb.array()).all());
}

TEST(TuneModel, OneLayerEqualsSingleBlockTune) {
  const Model m = model_init(fixture_config(1));
  const CalibSet c = synth_tokens(2, 8, 8, 64);
  TuneConfig t;
  t.steps = 15;
  t.batch_size = 4;
  t.seed = 6;
  const auto q = tune_model(m, c, {2, 8}, t, Method::kSignRound);
  const auto r = tune_block(m.blocks[0], capture_block_inputs(m, c, 0, false).inputs, 2, {2, 8}, t);
  ASSERT_EQ(q.reports.size(), 1u);
  EXPECT_EQ(q.reports[0].best_loss, r.best.loss);
  EXPECT_EQ(q.reports[0].best_step, r.best.step);
  const auto direct = quantize(m.blocks[0].w_up, {2, 8}, r.best.params[4]);
  EXPECT_TRUE((q.model.blocks[0].w_up.array() == direct.dequantized.array()).all());
}

TEST(TuneModel, RtnMethodRunsNoTuning) {
  const Model m = model_init(fixture_config(2));
  const CalibSet c = synth_tokens(2, 8, 8, 64);
  const auto q = tune_model(m, c, {4, -1}, TuneConfig{}, Method::kRtn);
  for (const auto& r : q.reports) {
    EXPECT_EQ(r.tuned_loss, r.rtn_loss);
    EXPECT_EQ(r.best_loss, r.rtn_loss);
  }
  EXPECT_TRUE((q.model.blocks[1].wq.array() == rtn(m.blocks[1].wq, {4, -1}).dequantized.array()).all());
}

TEST(TuneModel, InputPropagationFlag) {
  const Model m = model_init(fixture_config(2));
  const CalibSet c = synth_tokens(2, 8, 8, 64);
  TuneConfig t;
  t.steps = 5;
  t.batch_size = 8;
  t.quantized_input = false;
  const auto fp = tune_model(m, c, {2, 8}, t, Method::kSignRound, {true});
  ASSERT_EQ(fp.block_inputs.size(), 2u);
  EXPECT_TRUE((fp.block_inputs[1].array() == capture_block_inputs(m, c, 1, false).inputs.array()).all());
  t.quantized_input = true;
  const auto qi = tune_model(m, c, {2, 8}, t, Method::kSignRound, {true});
  EXPECT_TRUE((qi.block_inputs[0].array() == fp.block_inputs[0].array()).all());
  EXPECT_FALSE((qi.block_inputs[1].array() == fp.block_inputs[1].array()).all());
  const std::vector<BlockWeights<float>> prior{qi.model.blocks[0]};
  EXPECT_TRUE((qi.block_inputs[1].array() == capture_block_inputs(m, c, 1, true, prior).inputs.array()).all());
}

TEST(BlockReport, JsonFields) {
  const auto j = BlockReport{}.to_json();
  for (const char* k : {"block", "rtn_loss", "best_loss", "best_step", "steps", "mode", "optimizer", "lr0"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
}
