#include "roundfit/model.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "roundfit/ops.hpp"

namespace roundfit {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ArgumentError("vocab_size must be >= 2");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw ArgumentError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                        std::to_string(n_heads) + ")");
  }
  if (n_layers < 0) throw ArgumentError("n_layers must be >= 0");
  if (d_ff < 1) throw ArgumentError("d_ff must be >= 1");
  if (max_seq_len < 1) throw ArgumentError("max_seq_len must be >= 1");
}

template <typename T>
BlockWeights<T> BlockWeights<T>::with_linears(std::span<const Tensor<T>> replacement) const {
  if (replacement.size() != kLinearNames.size()) throw ArgumentError("with_linears expects 6 tensors");
  BlockWeights out = *this;
  auto slots = out.linears();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (replacement[i].shape() != slots[i]->shape()) {
      throw DimensionError(std::string("replacement for ") + kLinearNames[i] + " has shape " +
                           shape_str(replacement[i].shape()) + ", expected " + shape_str(slots[i]->shape()));
    }
    *slots[i] = replacement[i];
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelWeights<T>::named_tensors() const {
  std::vector<std::pair<std::string, Tensor<T>>> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const auto& b = blocks[i];
    out.emplace_back(p + "ln1.gamma", b.ln1_gamma);
    out.emplace_back(p + "ln1.beta", b.ln1_beta);
    const auto lin = b.linears();
    for (std::size_t k = 0; k < lin.size(); ++k) out.emplace_back(p + BlockWeights<T>::kLinearNames[k], *lin[k]);
    out.emplace_back(p + "ln2.gamma", b.ln2_gamma);
    out.emplace_back(p + "ln2.beta", b.ln2_beta);
  }
  out.emplace_back("ln_f.gamma", lnf_gamma);
  out.emplace_back("ln_f.beta", lnf_beta);
  out.emplace_back("lm_head", lm_head);
  return out;
}

template <typename T>
std::vector<std::string> ModelWeights<T>::quantizable_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (const char* n : BlockWeights<T>::kLinearNames) out.push_back("blocks." + std::to_string(i) + "." + n);
  }
  return out;
}

template <typename T>
ModelWeights<T> ModelWeights<T>::from_named(const ModelConfig& config,
                                            const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  config.validate();
  std::map<std::string, Tensor<T>> byname(tensors.begin(), tensors.end());
  const auto take = [&byname](const std::string& name, const Shape& shape) {
    auto it = byname.find(name);
    if (it == byname.end()) throw FormatError("model tensor '" + name + "' is missing");
    if (it->second.shape() != shape) {
      throw FormatError("model tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(shape));
    }
    return it->second;
  };
  const Index d = config.d_model;
  ModelWeights m;
  m.config = config;
  m.tok_emb = take("tok_emb", {config.vocab_size, d});
  m.pos_emb = take("pos_emb", {config.max_seq_len, d});
  for (Index i = 0; i < config.n_layers; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    BlockWeights<T> b;
    b.ln1_gamma = take(p + "ln1.gamma", {d});
    b.ln1_beta = take(p + "ln1.beta", {d});
    b.wq = take(p + "wq", {d, d});
    b.wk = take(p + "wk", {d, d});
    b.wv = take(p + "wv", {d, d});
    b.wo = take(p + "wo", {d, d});
    b.ln2_gamma = take(p + "ln2.gamma", {d});
    b.ln2_beta = take(p + "ln2.beta", {d});
    b.w_up = take(p + "w_up", {config.d_ff, d});
    b.w_down = take(p + "w_down", {d, config.d_ff});
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gamma = take("ln_f.gamma", {d});
  m.lnf_beta = take("ln_f.beta", {d});
  m.lm_head = take("lm_head", {config.vocab_size, d});
  return m;
}

Model model_init(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  const auto randn = [&](Shape shape) {
    Buffer<float> b(shape_numel(shape));
    for (Index i = 0; i < b.size(); ++i) b(i) = normal(rng);
    return Tensor<float>(std::move(shape), std::move(b));
  };
  const Index d = config.d_model;
  Model m;
  m.config = config;
  m.tok_emb = randn({config.vocab_size, d});
  m.pos_emb = randn({config.max_seq_len, d});
  for (Index i = 0; i < config.n_layers; ++i) {
    BlockWeights<float> b;
    b.ln1_gamma = Tensor<float>::full({d}, 1.0f);
    b.ln1_beta = Tensor<float>::zeros({d});
    b.wq = randn({d, d});
    b.wk = randn({d, d});
    b.wv = randn({d, d});
    b.wo = randn({d, d});
    b.ln2_gamma = Tensor<float>::full({d}, 1.0f);
    b.ln2_beta = Tensor<float>::zeros({d});
    b.w_up = randn({config.d_ff, d});
    b.w_down = randn({d, config.d_ff});
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gamma = Tensor<float>::full({d}, 1.0f);
  m.lnf_beta = Tensor<float>::zeros({d});
  m.lm_head = randn({config.vocab_size, d});
  return m;
}

template <typename T>
Tensor<T> embed(const ModelWeights<T>& model, std::span<const TokenSequence> batch) {
  const auto& cfg = model.config;
  if (batch.empty()) throw DataError("empty token batch");
  const auto seq = static_cast<Index>(batch.front().size());
  if (seq < 1 || seq > cfg.max_seq_len) {
    throw DataError("sequence length " + std::to_string(seq) + " outside [1, " + std::to_string(cfg.max_seq_len) +
                    "]");
  }
  const Index d = cfg.d_model;
  std::vector<Index> ids;
  ids.reserve(batch.size() * static_cast<std::size_t>(seq));
  for (const TokenSequence& row : batch) {
    if (static_cast<Index>(row.size()) != seq) throw DataError("token batch has ragged sequence lengths");
    for (const Token id : row) {
      if (id < 0 || id >= cfg.vocab_size) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
      }
      ids.push_back(id);
    }
  }
  std::vector<Index> positions(static_cast<std::size_t>(seq));
  std::iota(positions.begin(), positions.end(), Index{0});
  return add(embedding(model.tok_emb, ids, {static_cast<Index>(batch.size()), seq, d}),
             embedding(model.pos_emb, positions, {seq, d}));
}

template <typename T>
Tensor<T> causal_mask(Index seq) {
  Buffer<T> m(seq * seq);
  for (Index i = 0; i < seq; ++i) {
    for (Index j = 0; j < seq; ++j) m(i * seq + j) = j <= i ? T(0) : -std::numeric_limits<T>::infinity();
  }
  return Tensor<T>({seq, seq}, std::move(m));
}

template <typename T>
Tensor<T> block_forward(const BlockWeights<T>& block, const Tensor<T>& x, Index n_heads) {
  if (x.rank() != 3 || x.dim(2) != block.wq.dim(1)) {
    throw DimensionError("block input " + shape_str(x.shape()) + " does not match d_model " +
                         std::to_string(block.wq.dim(1)));
  }
  const Index batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
  if (n_heads < 1 || d % n_heads != 0) throw ArgumentError("d_model is not divisible by n_heads");
  const Index hd = d / n_heads;
  const T eps = static_cast<T>(kLayerNormEps);

  const Tensor<T> h = layer_norm(x, block.ln1_gamma, block.ln1_beta, eps);
  const auto heads = [&](const Tensor<T>& w) { return swap_axes12(reshape(linear(h, w), {batch, seq, n_heads, hd})); };
  const Tensor<T> q = heads(block.wq);
  const Tensor<T> k = heads(block.wk);
  const Tensor<T> v = heads(block.wv);
  const Tensor<T> scores = add(scale(bmm(q, k, true), T(1) / std::sqrt(static_cast<T>(hd))), causal_mask<T>(seq));
  const Tensor<T> attn = reshape(swap_axes12(bmm(softmax_lastdim(scores), v)), {batch, seq, d});
  const Tensor<T> x1 = add(x, linear(attn, block.wo));

  const Tensor<T> h2 = layer_norm(x1, block.ln2_gamma, block.ln2_beta, eps);
  return add(x1, linear(gelu(linear(h2, block.w_up)), block.w_down));
}

template <typename T>
Tensor<T> forward_hidden(const ModelWeights<T>& model, std::span<const TokenSequence> batch, Index block_idx) {
  if (block_idx < 0 || block_idx > static_cast<Index>(model.blocks.size())) {
    throw ArgumentError("block index " + std::to_string(block_idx) + " out of range");
  }
  Tensor<T> h = embed(model, batch);
  for (Index i = 0; i < block_idx; ++i) h = block_forward(model.blocks[static_cast<std::size_t>(i)], h, model.config.n_heads);
  return h;
}

template <typename T>
Tensor<T> forward(const ModelWeights<T>& model, std::span<const TokenSequence> batch) {
  const Tensor<T> h = forward_hidden(model, batch, static_cast<Index>(model.blocks.size()));
  return linear(layer_norm(h, model.lnf_gamma, model.lnf_beta, static_cast<T>(kLayerNormEps)), model.lm_head);
}

namespace {

struct NllSum {
  double total = 0.0;
  Index count = 0;
  bool underflow = false;

  template <typename T>
  void add(const Tensor<T>& logits, std::span<const Token> targets) {
    const auto m = logits.matrix();
    if (m.rows() != static_cast<Index>(targets.size())) {
      throw DimensionError("logits have " + std::to_string(m.rows()) + " rows for " +
                           std::to_string(targets.size()) + " targets");
    }
    for (Index i = 0; i < m.rows(); ++i) {
      const Token y = targets[static_cast<std::size_t>(i)];
      if (y < 0 || y >= m.cols()) throw DataError("target id " + std::to_string(y) + " outside vocabulary");
      const Eigen::ArrayXd row = m.row(i).transpose().template cast<double>().array();
      const double mx = row.maxCoeff();
      const double lse = mx + std::log((row - mx).exp().sum());
      const double p = std::exp(row(y) - lse);
      if (p == 0.0) underflow = true;
      total += lse - row(y);
      ++count;
    }
  }

  double perplexity() const {
    if (underflow) return std::numeric_limits<double>::infinity();
    return std::exp(total / static_cast<double>(count));
  }
};

}  // namespace

template <typename T>
double perplexity_from_logits(const Tensor<T>& logits, std::span<const Token> targets) {
  if (targets.empty()) throw DataError("perplexity needs at least one prediction");
  NllSum acc;
  acc.add(logits, targets);
  return acc.perplexity();
}

double perplexity(const Model& model, std::span<const Token> tokens) {
  if (tokens.size() < 2) throw DataError("perplexity needs a sequence of length >= 2");
  const auto window = static_cast<std::size_t>(model.config.max_seq_len);
  if (window < 2) throw ArgumentError("perplexity needs max_seq_len >= 2");
  NllSum acc;
  for (std::size_t start = 0; start + 1 < tokens.size(); start += window - 1) {
    const std::size_t len = std::min(window, tokens.size() - start);
    const TokenSequence seq(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                            tokens.begin() + static_cast<std::ptrdiff_t>(start + len));
    const Tensor<float> logits = forward(model, std::span<const TokenSequence>(&seq, 1));
    const Index vocab = model.config.vocab_size;
    Buffer<float> head = logits.array().head((static_cast<Index>(len) - 1) * vocab);
    acc.add(Tensor<float>({static_cast<Index>(len) - 1, vocab}, std::move(head)),
            std::span<const Token>(seq).subspan(1));
  }
  return acc.perplexity();
}

#define ROUNDFIT_INSTANTIATE_MODEL(T)                                                                    \
  template struct BlockWeights<T>;                                                                       \
  template struct ModelWeights<T>;                                                                       \
  template Tensor<T> embed(const ModelWeights<T>&, std::span<const TokenSequence>);                     \
  template Tensor<T> causal_mask<T>(Index);                                                              \
  template Tensor<T> block_forward(const BlockWeights<T>&, const Tensor<T>&, Index);                     \
  template Tensor<T> forward_hidden(const ModelWeights<T>&, std::span<const TokenSequence>, Index);      \
  template Tensor<T> forward(const ModelWeights<T>&, std::span<const TokenSequence>);                   \
  template double perplexity_from_logits(const Tensor<T>&, std::span<const Token>);

ROUNDFIT_INSTANTIATE_MODEL(float)
ROUNDFIT_INSTANTIATE_MODEL(double)

}  // namespace roundfit
