#pragma once

#include <cstdint>
#include <vector>

#include "roundfit/calib.hpp"
#include "roundfit/model.hpp"

namespace roundfit {

/// Short next-token training run used to give the toy model non-trivial predictions.
struct TrainConfig {
  Index steps = 0;
  double lr = 1e-2;
  Index batch_size = 8;
  Index nsamples = 256;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  std::vector<double> history;  // per-step mean cross-entropy
};

/// Sequences of max_seq_len + 1 tokens from the seeded Markov source, on a stream
/// disjoint from both the calibration and the held-out streams.
CalibSet training_corpus(std::uint64_t seed, Index seqlen, Index nsamples, Index vocab);

/// Adam on every weight; each sequence predicts tokens [1, n) from tokens [0, n - 1).
TrainResult train(const Model& model, const CalibSet& data, const TrainConfig& cfg);

/// model_init followed by `cfg.steps` training steps on training_corpus(cfg.seed, ...).
Model pretrained_model(const ModelConfig& config, const TrainConfig& cfg);

}  // namespace roundfit
