#include "roundfit/train.hpp"

#include <limits>

#include "roundfit/ops.hpp"
#include "roundfit/tuner.hpp"

namespace roundfit {

namespace {

constexpr std::uint64_t kTrainingStream = 2;

}  // namespace

CalibSet training_corpus(std::uint64_t seed, Index seqlen, Index nsamples, Index vocab) {
  const TokenSequence stream = MarkovSource(seed, vocab).sample(seqlen * nsamples, kTrainingStream);
  return chunk_tokens(stream, seqlen, nsamples, "train:" + std::to_string(seed));
}

TrainResult train(const Model& model, const CalibSet& data, const TrainConfig& cfg) {
  if (cfg.steps < 0 || !(cfg.lr > 0.0) || cfg.batch_size < 1) throw ArgumentError("invalid training config");
  if (data.seqlen < 2 || data.seqlen - 1 > model.config.max_seq_len) {
    throw DataError("training sequences must hold 2 to max_seq_len + 1 tokens");
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto named = model.named_tensors();
  std::vector<AdamState<float>> states;
  for (const auto& [name, t] : named) states.push_back(AdamState<float>::zeros(t.numel()));

  TrainResult result;
  const Index batch = std::min(cfg.batch_size, data.nsamples());
  for (Index step = 0; step < cfg.steps; ++step) {
    const std::vector<Index> idx = draw_indices(data.nsamples(), batch, step, mix_seed(cfg.seed, 0x7EA));
    std::vector<TokenSequence> inputs;
    std::vector<Index> targets;
    for (const Index i : idx) {
      const TokenSequence& s = data.sequences[static_cast<std::size_t>(i)];
      inputs.emplace_back(s.begin(), s.end() - 1);
      targets.insert(targets.end(), s.begin() + 1, s.end());
    }
    Tape<float> tape;
    std::vector<std::pair<std::string, Tensor<float>>> leaves;
    for (const auto& [name, t] : named) leaves.emplace_back(name, tape.leaf(t));
    const Model tracked = Model::from_named(model.config, leaves);
    const Tensor<float> loss = cross_entropy(forward(tracked, inputs), targets);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite training loss at step " + std::to_string(step));
    result.history.push_back(loss.item());
    tape.backward(loss);
    for (std::size_t k = 0; k < named.size(); ++k) {
      Buffer<float> p = named[k].second.array();
      adam_step(p, tape.grad(leaves[k].second).array(), states[k], cfg.lr, Bounds{-kInf, kInf});
      named[k].second = Tensor<float>(named[k].second.shape(), std::move(p));
    }
  }
  result.model = Model::from_named(model.config, named);
  return result;
}

Model pretrained_model(const ModelConfig& config, const TrainConfig& cfg) {
  const Model init = model_init(config);
  if (cfg.steps == 0) return init;
  const CalibSet data = training_corpus(cfg.seed, config.max_seq_len + 1, cfg.nsamples, config.vocab_size);
  return train(init, data, cfg).model;
}

}  // namespace roundfit
