#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "roundfit/model.hpp"

namespace roundfit {

/// Calibration sequences, all exactly `seqlen` tokens long.
struct CalibSet {
  std::vector<TokenSequence> sequences;
  Index seqlen = 0;
  std::string source;

  Index nsamples() const { return static_cast<Index>(sequences.size()); }
};

/// Reads newline-delimited decimal token ids. Blank lines are skipped.
TokenSequence read_token_file(const std::filesystem::path& path, Index vocab);
TokenSequence parse_token_text(std::string_view text, Index vocab);

/// Greedily chunks a token stream into `nsamples` sequences of `seqlen`.
CalibSet chunk_tokens(std::span<const Token> stream, Index seqlen, Index nsamples, std::string source);
CalibSet load_tokens(const std::filesystem::path& path, Index seqlen, Index nsamples, Index vocab);

/// Seeded first-order Markov token source with a sparse random bigram table.
class MarkovSource {
 public:
  static constexpr Index kSuccessors = 8;

  MarkovSource(std::uint64_t seed, Index vocab);

  Index vocab() const { return vocab_; }
  /// Transition probabilities out of `state`.
  std::span<const double> row(Token state) const;
  /// `n` tokens from stream `stream`; different streams are independent draws.
  TokenSequence sample(Index n, std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  Index vocab_;
  std::vector<double> probs_;  // [vocab, vocab]
  std::vector<double> cdf_;
};

CalibSet synth_tokens(std::uint64_t seed, Index seqlen, Index nsamples, Index vocab);
/// Held-out tokens from the same bigram table as synth_tokens(seed, ...) but a disjoint stream.
TokenSequence synth_heldout(std::uint64_t seed, Index n, Index vocab);

/// Hidden states entering one block for every calibration sample, in CalibSet order.
struct BlockInputCache {
  Tensor<float> inputs;  // [nsamples, seqlen, d_model]
  Index block = 0;
  bool quantized_prior = false;

  Index size() const { return inputs.rank() == 0 ? 0 : inputs.dim(0); }
};

/// Runs the embedding and blocks [0, block_idx). With quantized_prior the
/// earlier blocks come from `prior_quantized_blocks` instead of the model.
BlockInputCache capture_block_inputs(const Model& model, const CalibSet& calib, Index block_idx, bool quantized_prior,
                                     std::span<const BlockWeights<float>> prior_quantized_blocks = {});

/// Rows `indices` of a tensor along its first axis.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& data, std::span<const Index> indices);

/// Sample indices for one tuning step: a seeded draw without replacement,
/// a pure function of (seed, step). batch_size == n returns 0..n-1.
std::vector<Index> draw_indices(Index n, Index batch_size, std::int64_t step, std::uint64_t seed);

struct Batch {
  Tensor<float> x;
  std::vector<Index> indices;
};

Batch draw_batch(const BlockInputCache& cache, Index batch_size, std::int64_t step, std::uint64_t seed);

/// splitmix64 finalizer, used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace roundfit
