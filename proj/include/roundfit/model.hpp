#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "roundfit/tensor.hpp"

namespace roundfit {

using Token = std::int32_t;
using TokenSequence = std::vector<Token>;

/// Shape of the built-in decoder-only transformer.
struct ModelConfig {
  Index vocab_size = 256;
  Index d_model = 64;
  Index n_heads = 4;
  Index n_layers = 2;
  Index d_ff = 256;
  Index max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
  Index head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

inline constexpr float kLayerNormEps = 1e-5f;

/// One pre-norm transformer block. Only the six linear weights are quantizable.
template <typename T>
struct BlockWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, wk, wv, wo;  // [d_model, d_model]
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w_up;    // [d_ff, d_model]
  Tensor<T> w_down;  // [d_model, d_ff]

  static constexpr std::array<const char*, 6> kLinearNames = {"wq", "wk", "wv", "wo", "w_up", "w_down"};

  std::array<const Tensor<T>*, 6> linears() const { return {&wq, &wk, &wv, &wo, &w_up, &w_down}; }
  std::array<Tensor<T>*, 6> linears() { return {&wq, &wk, &wv, &wo, &w_up, &w_down}; }

  /// Copy with the linear weights replaced, in kLinearNames order.
  BlockWeights with_linears(std::span<const Tensor<T>> replacement) const;

  template <typename U>
  BlockWeights<U> cast() const {
    return {ln1_gamma.template cast<U>(), ln1_beta.template cast<U>(), wq.template cast<U>(),
            wk.template cast<U>(),        wv.template cast<U>(),       wo.template cast<U>(),
            ln2_gamma.template cast<U>(), ln2_beta.template cast<U>(), w_up.template cast<U>(),
            w_down.template cast<U>()};
  }
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab, d_model]
  Tensor<T> pos_emb;  // [max_seq_len, d_model]
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> lnf_gamma, lnf_beta;
  Tensor<T> lm_head;  // [vocab, d_model], untied and never quantized

  /// Every tensor under its file name, e.g. "blocks.0.wq".
  std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
  /// Names of the quantizable tensors: block linears only.
  std::vector<std::string> quantizable_names() const;
  static ModelWeights from_named(const ModelConfig& config,
                                 const std::vector<std::pair<std::string, Tensor<T>>>& tensors);
};

using Model = ModelWeights<float>;

/// Seeded init: N(0, 0.02) for embeddings and linears, ones / zeros for layer norms.
Model model_init(const ModelConfig& config);

/// Token + learned position embeddings for a batch of equal-length sequences: [batch, seq, d_model].
template <typename T>
Tensor<T> embed(const ModelWeights<T>& model, std::span<const TokenSequence> batch);

/// Additive causal mask [seq, seq]: 0 on and below the diagonal, -inf above.
template <typename T>
Tensor<T> causal_mask(Index seq);

/// LN -> causal multi-head attention -> residual; LN -> GELU MLP -> residual.
template <typename T>
Tensor<T> block_forward(const BlockWeights<T>& block, const Tensor<T>& x, Index n_heads);

/// Hidden states entering block `block_idx` (block_idx == n_layers gives the final stream).
template <typename T>
Tensor<T> forward_hidden(const ModelWeights<T>& model, std::span<const TokenSequence> batch, Index block_idx);

/// Logits [batch, seq, vocab].
template <typename T>
Tensor<T> forward(const ModelWeights<T>& model, std::span<const TokenSequence> batch);

/// exp(mean NLL) where logits row i scores targets[i]; +inf if a target probability underflows to 0.
template <typename T>
double perplexity_from_logits(const Tensor<T>& logits, std::span<const Token> targets);

/// Next-token perplexity over a token stream, evaluated in windows of max_seq_len
/// that overlap by one token so every token after the first is predicted once.
double perplexity(const Model& model, std::span<const Token> tokens);

}  // namespace roundfit
