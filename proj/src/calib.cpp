#include "roundfit/calib.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace roundfit {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Index uniform_index(std::mt19937_64& rng, Index n) {
  return static_cast<Index>(uniform01(rng) * static_cast<double>(n)) % n;
}

}  // namespace

TokenSequence parse_token_text(std::string_view text, Index vocab) {
  TokenSequence out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.remove_suffix(1);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    if (line.empty()) continue;
    long long id = 0;
    const auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), id);
    if (ec != std::errc() || ptr != line.data() + line.size()) {
      throw ParseError("line " + std::to_string(line_no) + ": '" + std::string(line) + "' is not an integer token id");
    }
    if (id < 0 || id >= vocab) {
      throw DataError("line " + std::to_string(line_no) + ": token id " + std::to_string(id) +
                      " outside vocabulary of " + std::to_string(vocab));
    }
    out.push_back(static_cast<Token>(id));
  }
  return out;
}

TokenSequence read_token_file(const std::filesystem::path& path, Index vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open token file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_token_text(ss.str(), vocab);
}

CalibSet chunk_tokens(std::span<const Token> stream, Index seqlen, Index nsamples, std::string source) {
  if (seqlen < 1 || nsamples < 1) throw ArgumentError("seqlen and nsamples must be positive");
  if (static_cast<Index>(stream.size()) < seqlen * nsamples) {
    throw DataError("insufficient calibration data: " + std::to_string(stream.size()) + " tokens for " +
                    std::to_string(nsamples) + " x " + std::to_string(seqlen));
  }
  CalibSet set;
  set.seqlen = seqlen;
  set.source = std::move(source);
  for (Index i = 0; i < nsamples; ++i) {
    const auto first = stream.begin() + static_cast<std::ptrdiff_t>(i * seqlen);
    set.sequences.emplace_back(first, first + static_cast<std::ptrdiff_t>(seqlen));
  }
  return set;
}

CalibSet load_tokens(const std::filesystem::path& path, Index seqlen, Index nsamples, Index vocab) {
  const TokenSequence stream = read_token_file(path, vocab);
  return chunk_tokens(stream, seqlen, nsamples, "file:" + path.string());
}

MarkovSource::MarkovSource(std::uint64_t seed, Index vocab) : seed_(seed), vocab_(vocab) {
  if (vocab < 2) throw ArgumentError("MarkovSource needs vocab >= 2");
  const auto v = static_cast<std::size_t>(vocab);
  probs_.assign(v * v, 0.0);
  cdf_.assign(v * v, 0.0);
  std::mt19937_64 rng(mix_seed(seed, 0));
  std::vector<Index> perm(v);
  const Index k = std::min(kSuccessors, vocab);
  for (std::size_t s = 0; s < v; ++s) {
    std::iota(perm.begin(), perm.end(), Index{0});
    double total = 0.0;
    for (Index j = 0; j < k; ++j) {
      const Index pick = j + uniform_index(rng, vocab - j);
      std::swap(perm[static_cast<std::size_t>(j)], perm[static_cast<std::size_t>(pick)]);
      const double u = uniform01(rng);
      const double w = 0.05 + u * u;
      probs_[s * v + static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])] = w;
      total += w;
    }
    double acc = 0.0;
    for (std::size_t t = 0; t < v; ++t) {
      probs_[s * v + t] /= total;
      acc += probs_[s * v + t];
      cdf_[s * v + t] = acc;
    }
    cdf_[s * v + v - 1] = 1.0;
  }
}

std::span<const double> MarkovSource::row(Token state) const {
  const auto v = static_cast<std::size_t>(vocab_);
  return std::span<const double>(probs_).subspan(static_cast<std::size_t>(state) * v, v);
}

TokenSequence MarkovSource::sample(Index n, std::uint64_t stream) const {
  std::mt19937_64 rng(mix_seed(seed_, stream + 1));
  const auto v = static_cast<std::size_t>(vocab_);
  TokenSequence out;
  out.reserve(static_cast<std::size_t>(n));
  auto state = static_cast<Token>(uniform_index(rng, vocab_));
  for (Index i = 0; i < n; ++i) {
    out.push_back(state);
    const double u = uniform01(rng);
    const auto first = cdf_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(state) * v);
    const auto it = std::upper_bound(first, first + static_cast<std::ptrdiff_t>(v), u);
    state = static_cast<Token>(std::min<std::ptrdiff_t>(it - first, static_cast<std::ptrdiff_t>(v) - 1));
  }
  return out;
}

CalibSet synth_tokens(std::uint64_t seed, Index seqlen, Index nsamples, Index vocab) {
  const MarkovSource source(seed, vocab);
  const TokenSequence stream = source.sample(seqlen * nsamples, 0);
  return chunk_tokens(stream, seqlen, nsamples, "synth:" + std::to_string(seed));
}

TokenSequence synth_heldout(std::uint64_t seed, Index n, Index vocab) {
  return MarkovSource(seed, vocab).sample(n, 1);
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& data, std::span<const Index> indices) {
  if (data.rank() < 1) throw DimensionError("gather_rows on a scalar");
  const Index n = data.dim(0);
  const Index row = n == 0 ? 0 : data.numel() / n;
  Buffer<T> out(static_cast<Index>(indices.size()) * row);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index r = indices[i];
    if (r < 0 || r >= n) throw ArgumentError("row index " + std::to_string(r) + " out of range");
    out.segment(static_cast<Index>(i) * row, row) = data.array().segment(r * row, row);
  }
  Shape shape = data.shape();
  shape[0] = static_cast<Index>(indices.size());
  return Tensor<T>(std::move(shape), std::move(out));
}

template Tensor<float> gather_rows(const Tensor<float>&, std::span<const Index>);
template Tensor<double> gather_rows(const Tensor<double>&, std::span<const Index>);

BlockInputCache capture_block_inputs(const Model& model, const CalibSet& calib, Index block_idx, bool quantized_prior,
                                     std::span<const BlockWeights<float>> prior_quantized_blocks) {
  if (block_idx < 0 || block_idx >= model.config.n_layers) {
    throw ArgumentError("block index " + std::to_string(block_idx) + " out of range");
  }
  if (quantized_prior && static_cast<Index>(prior_quantized_blocks.size()) < block_idx) {
    throw StateError("quantized inputs for block " + std::to_string(block_idx) + " need " + std::to_string(block_idx) +
                     " quantized prior blocks, have " + std::to_string(prior_quantized_blocks.size()));
  }
  if (calib.sequences.empty()) throw DataError("empty calibration set");
  constexpr std::size_t kChunk = 16;
  const Index d = model.config.d_model;
  Buffer<float> all(calib.nsamples() * calib.seqlen * d);
  Index filled = 0;
  for (std::size_t start = 0; start < calib.sequences.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, calib.sequences.size() - start);
    Tensor<float> h = embed(model, std::span<const TokenSequence>(calib.sequences).subspan(start, len));
    for (Index b = 0; b < block_idx; ++b) {
      const auto& w = quantized_prior ? prior_quantized_blocks[static_cast<std::size_t>(b)]
                                      : model.blocks[static_cast<std::size_t>(b)];
      h = block_forward(w, h, model.config.n_heads);
    }
    all.segment(filled, h.numel()) = h.array();
    filled += h.numel();
  }
  return {Tensor<float>({calib.nsamples(), calib.seqlen, d}, std::move(all)), block_idx, quantized_prior};
}

std::vector<Index> draw_indices(Index n, Index batch_size, std::int64_t step, std::uint64_t seed) {
  if (batch_size < 1 || batch_size > n) {
    throw ArgumentError("batch size " + std::to_string(batch_size) + " must be in [1, " + std::to_string(n) + "]");
  }
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (batch_size == n) return idx;
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(step)));
  for (Index i = 0; i < batch_size; ++i) {
    const Index j = i + uniform_index(rng, n - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(batch_size));
  return idx;
}

Batch draw_batch(const BlockInputCache& cache, Index batch_size, std::int64_t step, std::uint64_t seed) {
  Batch b;
  b.indices = draw_indices(cache.size(), batch_size, step, seed);
  b.x = gather_rows(cache.inputs, b.indices);
  return b;
}

}  // namespace roundfit
