#include "tokensel/model.hpp"

#include <cmath>
#include <limits>

namespace tokensel {

namespace {

void check_tokens(const ModelState& state, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  for (TokenId t : tokens)
    if (t < 0 || t >= state.vocab_size())
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(state.vocab_size()));
}

void check_pair(const ModelState& state, const LabeledDataset& data) {
  data.validate();
  state.validate();
  if (static_cast<std::size_t>(state.vocab_size()) < data.vocab.size)
    throw InputError("model has fewer embedding rows than the dataset vocabulary");
}

bool within(double measured, double bound, bool upper) {
  const double slack = 1e-12 * std::max(1.0, std::abs(bound));
  return upper ? measured <= bound + slack : measured >= bound - slack;
}

}  // namespace

Vector softmax(const Eigen::Ref<const Vector>& scores) {
  const double top = scores.maxCoeff();
  Vector w = (scores.array() - top).exp().matrix();
  return w / w.sum();
}

double logistic_loss(double margin) {
  if (margin > 0) return std::log1p(std::exp(-margin));
  return -margin + std::log1p(std::exp(margin));
}

double logistic_weight(double margin) {
  if (margin > 0) {
    const double e = std::exp(-margin);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(margin));
}

AttentionBreakdown attention_forward(const ModelState& state, std::span<const TokenId> tokens,
                                     int label) {
  check_tokens(state, tokens);
  if (label != 1 && label != -1) throw InputError("label must be +1 or -1");
  const auto T = static_cast<Eigen::Index>(tokens.size());
  AttentionBreakdown out;
  out.scores.resize(T);
  Vector values(T);
  for (Eigen::Index i = 0; i < T; ++i) {
    const auto row = state.embeddings.row(tokens[i]);
    out.scores[i] = row.dot(state.cls);
    values[i] = row.dot(state.readout);
  }
  out.weights = softmax(out.scores);
  out.gammas = label * values;
  out.output = out.weights.dot(values);
  out.sigmoid_factor = logistic_weight(label * out.output);
  return out;
}

double dataset_loss(const ModelState& state, const LabeledDataset& data) {
  check_pair(state, data);
  double total = 0.0;
  for (const auto& ex : data.examples) {
    const auto fwd = attention_forward(state, ex.tokens, ex.label);
    total += logistic_loss(ex.label * fwd.output);
  }
  return total / static_cast<double>(data.size());
}

GradientTable grad_all(const ModelState& state, const LabeledDataset& data) {
  check_pair(state, data);
  const auto d = state.dim();
  GradientTable grad{Matrix::Zero(state.vocab_size(), d), Vector::Zero(d)};
  const double inv_n = 1.0 / static_cast<double>(data.size());

  for (const auto& ex : data.examples) {
    const auto fwd = attention_forward(state, ex.tokens, ex.label);
    const auto T = static_cast<Eigen::Index>(ex.tokens.size());
    const double scale = -ex.label * fwd.sigmoid_factor * inv_n;
    const Vector& q = fwd.weights;
    for (Eigen::Index i = 0; i < T; ++i) {
      const TokenId xi = ex.tokens[i];
      const double value_i = state.embeddings.row(xi).dot(state.readout);
      for (Eigen::Index j = 0; j < T; ++j) {
        if (j == i) continue;
        const TokenId xj = ex.tokens[j];
        const double w = q[i] * q[j] * value_i;
        // (1{x_i = s} - 1{x_j = s}) q_i q_j E_{x_i}^T v p
        grad.embeddings.row(xi) += scale * w * state.cls.transpose();
        grad.embeddings.row(xj) -= scale * w * state.cls.transpose();
        // q_i q_j (E_{x_i} - E_{x_j}) E_{x_i}^T v
        grad.cls += scale * w * (state.embeddings.row(xi) - state.embeddings.row(xj)).transpose();
      }
      grad.embeddings.row(xi) += scale * q[i] * state.readout.transpose();
    }
  }
  return grad;
}

GradientTable grad_all_factored(const ModelState& state, const LabeledDataset& data) {
  check_pair(state, data);
  const auto d = state.dim();
  GradientTable grad{Matrix::Zero(state.vocab_size(), d), Vector::Zero(d)};
  const double inv_n = 1.0 / static_cast<double>(data.size());
  Vector mean_key(d);

  for (const auto& ex : data.examples) {
    const auto fwd = attention_forward(state, ex.tokens, ex.label);
    const auto T = static_cast<Eigen::Index>(ex.tokens.size());
    const double scale = -ex.label * fwd.sigmoid_factor * inv_n;
    const Vector& q = fwd.weights;
    mean_key.setZero();
    for (Eigen::Index i = 0; i < T; ++i)
      mean_key += q[i] * state.embeddings.row(ex.tokens[i]).transpose();
    for (Eigen::Index i = 0; i < T; ++i) {
      const TokenId xi = ex.tokens[i];
      const double value_i = ex.label * fwd.gammas[i];
      const double coef = q[i] * (value_i - fwd.output);
      grad.embeddings.row(xi) +=
          scale * (coef * state.cls + q[i] * state.readout).transpose();
      grad.cls += scale * coef * (state.embeddings.row(xi).transpose() - mean_key);
    }
  }
  return grad;
}

GradientTable finite_diff_grad(const ModelState& state, const LabeledDataset& data, double step) {
  if (!(step > 0)) throw InputError("finite-difference step must be positive");
  check_pair(state, data);
  ModelState probe = state;
  const auto d = state.dim();
  GradientTable grad{Matrix::Zero(state.vocab_size(), d), Vector::Zero(d)};

  auto central = [&](double& coord) {
    const double saved = coord;
    coord = saved + step;
    const double up = dataset_loss(probe, data);
    coord = saved - step;
    const double down = dataset_loss(probe, data);
    coord = saved;
    return (up - down) / (2.0 * step);
  };

  for (Eigen::Index s = 0; s < state.vocab_size(); ++s)
    for (Eigen::Index k = 0; k < d; ++k) grad.embeddings(s, k) = central(probe.embeddings(s, k));
  for (Eigen::Index k = 0; k < d; ++k) grad.cls[k] = central(probe.cls[k]);
  return grad;
}

double directional_grad(const ModelState& state, const LabeledDataset& data,
                        const Eigen::Ref<const Vector>& direction) {
  check_pair(state, data);
  if (direction.size() != state.dim()) throw InputError("direction has wrong dimension");
  if (!direction.allFinite()) throw InputError("direction has non-finite entries");
  double total = 0.0;
  for (const auto& ex : data.examples) {
    const auto fwd = attention_forward(state, ex.tokens, ex.label);
    const auto T = static_cast<Eigen::Index>(ex.tokens.size());
    Vector proj(T);
    for (Eigen::Index i = 0; i < T; ++i) proj[i] = state.embeddings.row(ex.tokens[i]).dot(direction);
    double inner = 0.0;
    for (Eigen::Index i = 0; i < T; ++i)
      for (Eigen::Index j = i + 1; j < T; ++j)
        inner += (proj[i] - proj[j]) * fwd.weights[i] * fwd.weights[j] *
                 (fwd.gammas[i] - fwd.gammas[j]);
    total += fwd.sigmoid_factor * inner;
  }
  return total / static_cast<double>(data.size());
}

double max_relative_error(const GradientTable& a, const GradientTable& b) {
  auto block = [](const auto& x, const auto& y) {
    const double scale = std::max(x.cwiseAbs().maxCoeff(), y.cwiseAbs().maxCoeff());
    const double diff = (x - y).cwiseAbs().maxCoeff();
    if (scale == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return diff / scale;
  };
  return std::max(block(a.embeddings, b.embeddings), block(a.cls, b.cls));
}

QBoundReport verify_q_bounds(const ModelState& state, std::span<const TokenId> tokens, double tau) {
  if (!(tau > 0)) throw InputError("tau must be positive");
  const auto fwd = attention_forward(state, tokens, 1);
  const auto T = static_cast<Eigen::Index>(tokens.size());
  QBoundReport rep;
  rep.length = tokens.size();

  Eigen::Index top = 0;
  const double best = fwd.scores.maxCoeff(&top);
  rep.top_weight = fwd.weights[top];
  rep.top_lower = {true, within(rep.top_weight, 1.0 / T, false), rep.top_weight, 1.0 / T};
  rep.top_upper = {true, within(rep.top_weight, 1.0, true), rep.top_weight, 1.0};

  rep.min_margin = std::numeric_limits<double>::infinity();
  rep.max_margin = -std::numeric_limits<double>::infinity();
  double max_q = 0.0, min_q = 1.0;
  bool any_unselected = false;
  for (Eigen::Index j = 0; j < T; ++j) {
    if (fwd.scores[j] == best) continue;
    any_unselected = true;
    const double margin = best - fwd.scores[j];
    rep.min_margin = std::min(rep.min_margin, margin);
    rep.max_margin = std::max(rep.max_margin, margin);
    max_q = std::max(max_q, fwd.weights[j]);
    min_q = std::min(min_q, fwd.weights[j]);
  }
  if (any_unselected && rep.min_margin >= tau) {
    const double bound = 1.0 / (1.0 + std::exp(tau));
    rep.unselected_upper = {true, within(max_q, bound, true), max_q, bound};
  }
  if (any_unselected && rep.max_margin <= tau) {
    const double bound = 1.0 / (static_cast<double>(T) * std::exp(tau));
    rep.unselected_lower = {true, within(min_q, bound, false), min_q, bound};
  }
  return rep;
}

}  // namespace tokensel
