#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tokensel/model.hpp"
#include "tokensel/training.hpp"

namespace tokensel {

// Token-token self-attention with a skip connection and row-wise LayerNorm,
// followed by the one-layer <cls> head on the normalized rows.
struct TwoLayerState {
  ModelState base;
  Vector ln_gain;  // d, starts at 1
  Vector ln_bias;  // d, starts at 0
  double ln_eps = 1e-5;

  Eigen::Index dim() const { return base.dim(); }
  void validate() const;
  static TwoLayerState from_base(ModelState base, double ln_eps = 1e-5);
};

struct TwoLayerForward {
  Matrix rows;  // T x d normalized rows E', in input position order
  AttentionBreakdown head;
};

// Positions are processed in token-id order internally, so permuting the input
// permutes `rows` and leaves the output bit-for-bit unchanged.
TwoLayerForward two_layer_forward(const TwoLayerState& state, std::span<const TokenId> tokens,
                                  int label);

double two_layer_loss(const TwoLayerState& state, const LabeledDataset& data);

struct TwoLayerGradients {
  Matrix embeddings;
  Vector cls;
  Vector readout;
  Vector ln_gain;
  Vector ln_bias;
  double loss = 0.0;
};

// Reverse-mode gradients of the mean logistic loss over the given examples
// (all of them when `batch` is empty).
TwoLayerGradients two_layer_grads(const TwoLayerState& state, const LabeledDataset& data,
                                  std::span<const std::size_t> batch = {});

// Central differences over every parameter block, for checking two_layer_grads.
TwoLayerGradients two_layer_finite_diff(const TwoLayerState& state, const LabeledDataset& data,
                                        double step);

// Largest per-block |a - b|_inf / max(|a|_inf, |b|_inf).
double max_relative_error(const TwoLayerGradients& a, const TwoLayerGradients& b);

struct TwoLayerTrainResult {
  TwoLayerState state;
  std::vector<double> losses;  // full-data loss, entry 0 before training
};

// Same batching, schedule and update rule as train_full; the LayerNorm affine
// parameters train unless train_layernorm is false.
TwoLayerTrainResult train_two_layer(const TwoLayerState& state, const LabeledDataset& data,
                                    const OptimizerConfig& cfg, std::uint64_t seed,
                                    bool train_layernorm = true);

}  // namespace tokensel
