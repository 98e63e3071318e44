#include <cmath>
#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "roundfit/model_io.hpp"
#include "roundfit/ops.hpp"
#include "roundfit/tuner.hpp"

using namespace roundfit;

namespace {

ModelConfig small_config(Index layers = 2) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 16;
  c.max_seq_len = 8;
  c.seed = 7;
  return c;
}

std::vector<TokenSequence> two_by_four() { return {{1, 2, 3, 4}, {5, 6, 7, 31}}; }

std::vector<std::uint8_t> manifest_file(const nlohmann::json& manifest, std::size_t blob_bytes) {
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kTensorFileMagic, kTensorFileMagic + 5);
  std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.resize(out.size() + blob_bytes, 0);
  return out;
}

}  // namespace

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  auto c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = small_config();
  c.vocab_size = 1;
  EXPECT_THROW(c.validate(), ArgumentError);
  EXPECT_THROW(model_init(c), ArgumentError);
}

TEST(ModelInit, DeterministicAndSeedSensitive) {
  const Model a = model_init(small_config());
  const Model b = model_init(small_config());
  EXPECT_EQ(encode_tensor_file(model_to_file(a)), encode_tensor_file(model_to_file(b)));
  auto c8 = small_config();
  c8.seed = 8;
  const Model c = model_init(c8);
  EXPECT_FALSE((a.blocks[0].wq.array() == c.blocks[0].wq.array()).all());
}

TEST(ModelInit, Shapes) {
  const Model m = model_init(small_config());
  EXPECT_EQ(m.config.head_dim(), 4);
  ASSERT_EQ(m.blocks.size(), 2u);
  const auto& b = m.blocks[0];
  for (const auto* w : {&b.wq, &b.wk, &b.wv, &b.wo}) EXPECT_EQ(w->shape(), (Shape{8, 8}));
  EXPECT_EQ(b.w_up.shape(), (Shape{16, 8}));
  EXPECT_EQ(b.w_down.shape(), (Shape{8, 16}));
  EXPECT_EQ(b.ln1_gamma.shape(), (Shape{8}));
  EXPECT_TRUE((b.ln1_gamma.array() == 1.0f).all());
  EXPECT_TRUE((b.ln2_beta.array() == 0.0f).all());
  EXPECT_EQ(m.tok_emb.shape(), (Shape{32, 8}));
  EXPECT_EQ(m.pos_emb.shape(), (Shape{8, 8}));
  EXPECT_EQ(m.lm_head.shape(), (Shape{32, 8}));
}

TEST(ModelInit, QuantizableSetIsBlockLinearsOnly) {
  const Model m = model_init(small_config());
  const auto names = m.quantizable_names();
  EXPECT_EQ(names.size(), 12u);
  for (const auto& n : names) {
    EXPECT_EQ(n.rfind("blocks.", 0), 0u) << n;
    EXPECT_EQ(n.find("ln"), std::string::npos) << n;
  }
}

TEST(Forward, ShapeAndDeterminism) {
  const Model m = model_init(small_config());
  const auto batch = two_by_four();
  const Tensor<float> a = forward(m, std::span<const TokenSequence>(batch));
  EXPECT_EQ(a.shape(), (Shape{2, 4, 32}));
  const Tensor<float> b = forward(m, std::span<const TokenSequence>(batch));
  EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(Forward, BadTokensAreDataErrors) {
  const Model m = model_init(small_config());
  std::vector<TokenSequence> bad{{1, 32}};
  EXPECT_THROW(forward(m, std::span<const TokenSequence>(bad)), DataError);
  std::vector<TokenSequence> neg{{-1, 0}};
  EXPECT_THROW(forward(m, std::span<const TokenSequence>(neg)), DataError);
  std::vector<TokenSequence> ragged{{1, 2}, {1}};
  EXPECT_THROW(forward(m, std::span<const TokenSequence>(ragged)), DataError);
  std::vector<TokenSequence> too_long{TokenSequence(9, 1)};
  EXPECT_THROW(forward(m, std::span<const TokenSequence>(too_long)), DataError);
}

TEST(Forward, ZeroLayerIsHeadOfNormedEmbedding) {
  const Model m = model_init(small_config(0));
  const auto batch = two_by_four();
  const std::span<const TokenSequence> span(batch);
  const Tensor<float> logits = forward(m, span);
  const Tensor<float> want = linear(layer_norm(embed(m, span), m.lnf_gamma, m.lnf_beta, kLayerNormEps), m.lm_head);
  EXPECT_TRUE((logits.array() == want.array()).all());
}

TEST(Attention, CausalSoftmaxRowsSumToOne) {
  const Tensor<double> mask = causal_mask<double>(5);
  const Tensor<double> p = softmax_lastdim(mask);
  const auto mm = p.matrix();
  for (Index r = 0; r < 5; ++r) {
    EXPECT_NEAR(mm.row(r).sum(), 1.0, 1e-6);
    for (Index c = r + 1; c < 5; ++c) EXPECT_EQ(mm(r, c), 0.0);
  }
}

TEST(BlockForward, PreservesShape) {
  const Model m = model_init(small_config());
  const auto batch = two_by_four();
  const Tensor<float> x = embed(m, std::span<const TokenSequence>(batch));
  EXPECT_EQ(block_forward(m.blocks[0], x, 2).shape(), (Shape{2, 4, 8}));
  EXPECT_THROW(block_forward(m.blocks[0], Tensor<float>::zeros({2, 4, 6}), 2), DimensionError);
}

TEST(BlockForward, ZeroBlockIsResidualPassthrough) {
  const Model m = model_init(small_config());
  BlockWeights<float> z = m.blocks[0];
  z.ln1_gamma = Tensor<float>::zeros({8});
  z.ln2_gamma = Tensor<float>::zeros({8});
  for (auto* w : z.linears()) *w = Tensor<float>::zeros(w->shape());
  const auto batch = two_by_four();
  const Tensor<float> x = embed(m, std::span<const TokenSequence>(batch));
  EXPECT_TRUE((block_forward(z, x, 2).array() == x.array()).all());
}

TEST(BlockForward, ReplacingABlockLeavesEarlierActivations) {
  const Model m = model_init(small_config());
  const auto q = rtn(m.blocks[1].wq, {2, -1});
  Model edited = m;
  edited.blocks[1].wq = q.dequantized;
  const auto batch = two_by_four();
  const std::span<const TokenSequence> span(batch);
  EXPECT_TRUE((forward_hidden(m, span, 1).array() == forward_hidden(edited, span, 1).array()).all());
  EXPECT_FALSE((forward_hidden(m, span, 2).array() == forward_hidden(edited, span, 2).array()).all());
}

TEST(Perplexity, UniformCertainAndHandExample) {
  const std::vector<Token> t{3, 9, 0};
  EXPECT_NEAR(perplexity_from_logits(Tensor<double>::zeros({3, 16}), t), 16.0, 1e-6);

  Buffer<double> sure = Buffer<double>::Zero(3 * 16);
  for (int i = 0; i < 3; ++i) sure(i * 16 + t[static_cast<std::size_t>(i)]) = 1000.0;
  EXPECT_DOUBLE_EQ(perplexity_from_logits(Tensor<double>({3, 16}, sure), t), 1.0);

  const Tensor<double> two =
      Tensor<double>::from({2, 2}, {std::log(0.5), std::log(0.5), std::log(0.25), std::log(0.75)});
  EXPECT_NEAR(perplexity_from_logits(two, std::vector<Token>{0, 0}), std::exp((std::log(2) + std::log(4)) / 2),
              1e-12);
  EXPECT_NEAR(perplexity_from_logits(two, std::vector<Token>{0, 0}), 2.8284271247, 1e-9);
}

TEST(Perplexity, ShortSequenceIsDataError) {
  const Model m = model_init(small_config());
  EXPECT_THROW(perplexity(m, std::vector<Token>{1}), DataError);
  EXPECT_THROW(perplexity_from_logits(Tensor<double>::zeros({0, 4}), std::vector<Token>{}), DataError);
}

TEST(Perplexity, WindowsCoverEveryToken) {
  // 15 tokens with window 8 is two windows overlapping by one token: 7 + 7 predictions.
  const Model m = model_init(small_config());
  TokenSequence tokens(15);
  for (int i = 0; i < 15; ++i) tokens[static_cast<std::size_t>(i)] = (i * 7) % 32;
  const double ppl = perplexity(m, tokens);
  EXPECT_GT(ppl, 1.0);
  EXPECT_TRUE(std::isfinite(ppl));
}

TEST(TensorFile, RoundTripIsBitExact) {
  const Model m = model_init(small_config());
  const auto bytes = encode_tensor_file(model_to_file(m));
  const TensorFile back = decode_tensor_file(bytes);
  EXPECT_EQ(encode_tensor_file(back), bytes);
  const Model m2 = model_from_file(back);
  EXPECT_EQ(m2.config, m.config);
  const auto a = m.named_tensors(), b = m2.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(std::memcmp(a[i].second.data(), b[i].second.data(), sizeof(float) * a[i].second.numel()), 0);
  }
}

TEST(TensorFile, MixedDtypesAndPackedEntries) {
  TensorFile f;
  f.meta = {{"note", "mixed"}};
  f.tensors.emplace_back("a", Tensor<double>::from({2}, {0.1, -3e300}));
  f.tensors.emplace_back("b", Tensor<float>::from({1, 3}, {1.5f, -0.0f, 7.0f}));
  const auto q = rtn(Tensor<float>::from({2, 4}, {0.1f, 0.2f, -0.3f, 0.4f, 1, 2, 3, 4}), {3, 2});
  f.tensors.emplace_back("c", pack(q, "c"));
  const auto bytes = encode_tensor_file(f);
  const TensorFile g = decode_tensor_file(bytes);
  EXPECT_EQ(g.meta, f.meta);
  EXPECT_EQ(std::get<PackedTensor>(*g.find("c")), std::get<PackedTensor>(*f.find("c")));
  EXPECT_EQ(std::get<Tensor<double>>(*g.find("a"))[1], -3e300);
  EXPECT_EQ(encode_tensor_file(g), bytes);
  EXPECT_EQ(g.find("missing"), nullptr);
}

TEST(TensorFile, TruncationIsFormatError) {
  const auto bytes = encode_tensor_file(model_to_file(model_init(small_config())));
  for (std::size_t cut : {std::size_t(3), std::size_t(12), bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_tensor_file(part), FormatError) << cut;
  }
}

TEST(TensorFile, OverlapGapAndBadMagicAreFormatErrors) {
  nlohmann::json man = {{"format_version", 1}, {"meta", nlohmann::json::object()}};
  man["tensors"]["x"] = {{"dtype", "f32"}, {"shape", {2}}, {"offset", 0}, {"length", 8}};
  man["tensors"]["y"] = {{"dtype", "f32"}, {"shape", {2}}, {"offset", 4}, {"length", 8}};
  try {
    decode_tensor_file(manifest_file(man, 12));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("overlaps"), std::string::npos) << e.what();
  }
  man["tensors"]["y"]["offset"] = 12;
  EXPECT_THROW(decode_tensor_file(manifest_file(man, 20)), FormatError);
  auto bad = manifest_file(man, 16);
  bad[0] = 'X';
  EXPECT_THROW(decode_tensor_file(bad), FormatError);
}

TEST(TensorFile, UnknownManifestFieldsAreIgnored) {
  nlohmann::json man = {{"format_version", 1}, {"meta", {{"k", 1}}}, {"extra", "ignored"}};
  man["tensors"]["x"] = {{"dtype", "f32"}, {"shape", {2}}, {"offset", 0}, {"length", 8}, {"comment", "hi"}};
  const TensorFile f = decode_tensor_file(manifest_file(man, 8));
  ASSERT_EQ(f.tensors.size(), 1u);
  EXPECT_EQ(std::get<Tensor<float>>(f.tensors[0].second).shape(), (Shape{2}));
}

TEST(TensorFile, SaveAndLoadOnDisk) {
  const auto path = std::filesystem::temp_directory_path() / "roundfit_test_model.rftf";
  const Model m = model_init(small_config());
  save_model(path, m);
  EXPECT_EQ(read_file_bytes(path), encode_tensor_file(model_to_file(m)));
  EXPECT_EQ(load_model(path).config, m.config);
  std::filesystem::remove(path);
  EXPECT_THROW(load_tensors(path), FormatError);
}

TEST(ModelIo, QuantizedModelLoadsDequantized) {
  const Model m = model_init(small_config(1));
  std::map<std::string, PackedTensor> packed;
  Model q = m;
  const auto names = BlockWeights<float>::kLinearNames;
  auto linears = q.blocks[0].linears();
  for (std::size_t i = 0; i < 6; ++i) {
    const auto r = rtn(*linears[i], {4, 8});
    *linears[i] = r.dequantized;
    const std::string name = std::string("blocks.0.") + names[i];
    packed.emplace(name, pack(r, name));
  }
  const TensorFile f = quantized_model_to_file(q, packed);
  EXPECT_EQ(f.meta["kind"], "quantized_model");
  const Model back = model_from_file(decode_tensor_file(encode_tensor_file(f)));
  EXPECT_TRUE((back.blocks[0].w_up.array() == q.blocks[0].w_up.array()).all());
  EXPECT_TRUE((back.lm_head.array() == m.lm_head.array()).all());
}
