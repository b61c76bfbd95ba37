#pragma once

#include <span>

#include "tokensel/types.hpp"

namespace tokensel {

// Everything the forward pass computes for one sequence.
struct AttentionBreakdown {
  Vector scores;   // a_i = <cls, E_{x_i}>
  Vector weights;  // softmax of scores
  Vector gammas;   // y * <E_{x_i}, readout>
  double output = 0.0;          // f(X)
  double sigmoid_factor = 0.0;  // 1 / (1 + exp(y f))
};

struct GradientTable {
  Matrix embeddings;  // one row per token id
  Vector cls;
};

// Numerically stable softmax (max subtraction).
Vector softmax(const Eigen::Ref<const Vector>& scores);

// log(1 + exp(-margin)) without overflow for large |margin|.
double logistic_loss(double margin);

// 1 / (1 + exp(margin)) without overflow.
double logistic_weight(double margin);

AttentionBreakdown attention_forward(const ModelState& state, std::span<const TokenId> tokens,
                                     int label);

double dataset_loss(const ModelState& state, const LabeledDataset& data);

// Closed-form gradients of the empirical logistic loss with respect to every
// embedding row and the <cls> embedding. The pairwise q_i q_j cross terms are
// accumulated literally, in dataset order then position order.
GradientTable grad_all(const ModelState& state, const LabeledDataset& data);

// Same gradients through the factored identity sum_{j != i} q_j (E_i - E_j) = E_i - sum_j q_j E_j.
// O(T d) per sequence; used by the training loops.
GradientTable grad_all_factored(const ModelState& state, const LabeledDataset& data);

// Central finite differences over every entry of the embedding table and cls.
GradientTable finite_diff_grad(const ModelState& state, const LabeledDataset& data, double step);

// -<direction, grad_cls L> evaluated through the pairwise score-difference formula
// E[g * sum_{i<j} (b_i - b_j) q_i q_j (gamma_i - gamma_j)], b_i = <direction, E_{x_i}>.
double directional_grad(const ModelState& state, const LabeledDataset& data,
                        const Eigen::Ref<const Vector>& direction);

// Max of |a-b| / max(|a|_inf, |b|_inf) over both gradient blocks.
double max_relative_error(const GradientTable& a, const GradientTable& b);

struct BoundCheck {
  bool applicable = false;
  bool holds = true;
  double measured = 0.0;  // the extreme q value the bound is checked against
  double bound = 0.0;
};

struct QBoundReport {
  std::size_t length = 0;
  double top_weight = 0.0;       // q of an argmax position
  BoundCheck top_lower;          // 1/T <= q_top
  BoundCheck top_upper;          // q_top <= 1
  BoundCheck unselected_upper;   // q_j <= 1/(1+e^tau) when every margin >= tau
  BoundCheck unselected_lower;   // q_j >= 1/(T e^tau) when every margin <= tau
  double min_margin = 0.0;       // over selected/unselected pairs (inf if none)
  double max_margin = 0.0;

  bool all_hold() const {
    return top_lower.holds && top_upper.holds && unselected_upper.holds && unselected_lower.holds;
  }
};

// Softmax weight bounds for the top-scoring token and the unselected tokens of one sequence.
QBoundReport verify_q_bounds(const ModelState& state, std::span<const TokenId> tokens, double tau);

}  // namespace tokensel
