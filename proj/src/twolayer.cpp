#include "tokensel/twolayer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tokensel/rng.hpp"

namespace tokensel {

void TwoLayerState::validate() const {
  base.validate();
  if (ln_gain.size() != dim() || ln_bias.size() != dim())
    throw InputError("LayerNorm parameters must match the embedding dimension");
  if (!ln_gain.allFinite() || !ln_bias.allFinite())
    throw InputError("LayerNorm parameters must be finite");
  if (!(ln_eps > 0)) throw InputError("ln_eps must be positive");
}

TwoLayerState TwoLayerState::from_base(ModelState base, double ln_eps) {
  TwoLayerState st;
  const auto d = base.dim();
  st.base = std::move(base);
  st.ln_gain = Vector::Ones(d);
  st.ln_bias = Vector::Zero(d);
  st.ln_eps = ln_eps;
  return st;
}

namespace {

// Intermediates of one sequence, stored in canonical (token-id sorted) order.
struct Tape {
  std::vector<Eigen::Index> order;  // canonical slot -> input position
  Matrix x;                         // T x d input rows
  Matrix attn;                      // T x T row-softmax of x x^T
  Matrix normed;                    // centred / sigma
  Vector inv_sigma;
  Matrix z;  // gain * normed + bias
  AttentionBreakdown head;
};

Tape forward_tape(const TwoLayerState& st, std::span<const TokenId> tokens, int label) {
  const auto& base = st.base;
  if (tokens.empty()) throw InputError("sequence must not be empty");
  if (label != 1 && label != -1) throw InputError("label must be +1 or -1");
  for (TokenId t : tokens)
    if (t < 0 || t >= base.vocab_size())
      throw InputError("token id " + std::to_string(t) + " outside the vocabulary");

  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto d = st.dim();
  Tape tp;
  tp.order.resize(static_cast<std::size_t>(T));
  std::iota(tp.order.begin(), tp.order.end(), Eigen::Index{0});
  std::stable_sort(tp.order.begin(), tp.order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return tokens[a] < tokens[b]; });

  tp.x.resize(T, d);
  for (Eigen::Index i = 0; i < T; ++i) tp.x.row(i) = base.embeddings.row(tokens[tp.order[i]]);
  tp.attn.resize(T, T);
  for (Eigen::Index i = 0; i < T; ++i) {
    Vector s(T);
    for (Eigen::Index j = 0; j < T; ++j) s[j] = tp.x.row(i).dot(tp.x.row(j));
    tp.attn.row(i) = softmax(s).transpose();
  }
  const Matrix h = tp.attn * tp.x + tp.x;

  tp.normed.resize(T, d);
  tp.inv_sigma.resize(T);
  tp.z.resize(T, d);
  for (Eigen::Index i = 0; i < T; ++i) {
    const double mean = h.row(i).mean();
    const auto centred = (h.row(i).array() - mean).matrix();
    const double var = centred.squaredNorm() / static_cast<double>(d);
    tp.inv_sigma[i] = 1.0 / std::sqrt(var + st.ln_eps);
    tp.normed.row(i) = centred * tp.inv_sigma[i];
    tp.z.row(i) = tp.normed.row(i).cwiseProduct(st.ln_gain.transpose()) + st.ln_bias.transpose();
  }

  auto& hd = tp.head;
  hd.scores = tp.z * base.cls;
  hd.weights = softmax(hd.scores);
  const Vector values = tp.z * base.readout;
  hd.gammas = label * values;
  hd.output = hd.weights.dot(values);
  hd.sigmoid_factor = logistic_weight(label * hd.output);
  return tp;
}

// Reorders per-position head quantities from canonical back to input order.
AttentionBreakdown to_input_order(const Tape& tp) {
  AttentionBreakdown out = tp.head;
  for (std::size_t i = 0; i < tp.order.size(); ++i) {
    out.scores[tp.order[i]] = tp.head.scores[i];
    out.weights[tp.order[i]] = tp.head.weights[i];
    out.gammas[tp.order[i]] = tp.head.gammas[i];
  }
  return out;
}

void check_data(const TwoLayerState& st, const LabeledDataset& data) {
  st.validate();
  data.validate();
  if (static_cast<Eigen::Index>(data.vocab.size) > st.base.vocab_size())
    throw InputError("dataset vocabulary is larger than the embedding table");
}

}  // namespace

TwoLayerForward two_layer_forward(const TwoLayerState& state, std::span<const TokenId> tokens,
                                  int label) {
  state.validate();
  const Tape tp = forward_tape(state, tokens, label);
  TwoLayerForward out;
  out.rows.resize(tp.z.rows(), tp.z.cols());
  for (std::size_t i = 0; i < tp.order.size(); ++i) out.rows.row(tp.order[i]) = tp.z.row(i);
  out.head = to_input_order(tp);
  return out;
}

double two_layer_loss(const TwoLayerState& state, const LabeledDataset& data) {
  check_data(state, data);
  double total = 0.0;
  for (const auto& ex : data.examples)
    total += logistic_loss(ex.label * forward_tape(state, ex.tokens, ex.label).head.output);
  return total / static_cast<double>(data.size());
}

TwoLayerGradients two_layer_grads(const TwoLayerState& state, const LabeledDataset& data,
                                  std::span<const std::size_t> batch) {
  check_data(state, data);
  const auto d = state.dim();
  const auto& base = state.base;
  TwoLayerGradients g{Matrix::Zero(base.vocab_size(), d), Vector::Zero(d), Vector::Zero(d),
                      Vector::Zero(d), Vector::Zero(d), 0.0};
  std::vector<std::size_t> all;
  if (batch.empty()) {
    all.resize(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    batch = all;
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (std::size_t k : batch) {
    const auto& ex = data.examples.at(k);
    const Tape tp = forward_tape(state, ex.tokens, ex.label);
    const auto T = tp.x.rows();
    const auto& hd = tp.head;
    const int y = ex.label;
    g.loss += logistic_loss(y * hd.output) * inv_n;
    const double dl_df = -y * hd.sigmoid_factor * inv_n;

    // Head: f = sum_i q_i <z_i, v>, q = softmax(z p).
    Matrix dz(T, d);
    Vector mean_z = Vector::Zero(d);
    for (Eigen::Index i = 0; i < T; ++i) mean_z += hd.weights[i] * tp.z.row(i).transpose();
    for (Eigen::Index i = 0; i < T; ++i) {
      const double q = hd.weights[i];
      const double coef = q * (y * hd.gammas[i] - hd.output);
      dz.row(i) = dl_df * (coef * base.cls + q * base.readout).transpose();
      g.cls += dl_df * coef * tp.z.row(i).transpose();
    }
    g.readout += dl_df * mean_z;

    // LayerNorm.
    Matrix dh(T, d);
    for (Eigen::Index i = 0; i < T; ++i) {
      g.ln_gain += dz.row(i).cwiseProduct(tp.normed.row(i)).transpose();
      g.ln_bias += dz.row(i).transpose();
      const Eigen::RowVectorXd dn = dz.row(i).cwiseProduct(state.ln_gain.transpose());
      const double m1 = dn.mean();
      const double m2 = dn.dot(tp.normed.row(i)) / static_cast<double>(d);
      dh.row(i) = tp.inv_sigma[i] * (dn.array() - m1 - m2 * tp.normed.row(i).array()).matrix();
    }

    // h = A x + x with A = rowsoftmax(x x^T).
    const Matrix da = dh * tp.x.transpose();
    Matrix ds(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      const double inner = tp.attn.row(i).dot(da.row(i));
      ds.row(i) = tp.attn.row(i).cwiseProduct((da.row(i).array() - inner).matrix());
    }
    const Matrix dx = dh + tp.attn.transpose() * dh + (ds + ds.transpose()) * tp.x;
    for (Eigen::Index i = 0; i < T; ++i) g.embeddings.row(ex.tokens[tp.order[i]]) += dx.row(i);
  }
  return g;
}

TwoLayerGradients two_layer_finite_diff(const TwoLayerState& state, const LabeledDataset& data,
                                        double step) {
  if (!(step > 0)) throw InputError("finite-difference step must be positive");
  check_data(state, data);
  TwoLayerState probe = state;
  const auto d = state.dim();
  TwoLayerGradients g{Matrix::Zero(state.base.vocab_size(), d), Vector::Zero(d), Vector::Zero(d),
                      Vector::Zero(d), Vector::Zero(d), two_layer_loss(state, data)};
  auto central = [&](double& coord) {
    const double saved = coord;
    coord = saved + step;
    const double up = two_layer_loss(probe, data);
    coord = saved - step;
    const double down = two_layer_loss(probe, data);
    coord = saved;
    return (up - down) / (2.0 * step);
  };
  for (Eigen::Index s = 0; s < g.embeddings.rows(); ++s)
    for (Eigen::Index k = 0; k < d; ++k) g.embeddings(s, k) = central(probe.base.embeddings(s, k));
  for (Eigen::Index k = 0; k < d; ++k) {
    g.cls[k] = central(probe.base.cls[k]);
    g.readout[k] = central(probe.base.readout[k]);
    g.ln_gain[k] = central(probe.ln_gain[k]);
    g.ln_bias[k] = central(probe.ln_bias[k]);
  }
  return g;
}

double max_relative_error(const TwoLayerGradients& a, const TwoLayerGradients& b) {
  auto block = [](const auto& x, const auto& y) {
    const double scale = std::max(x.cwiseAbs().maxCoeff(), y.cwiseAbs().maxCoeff());
    const double diff = (x - y).cwiseAbs().maxCoeff();
    if (scale == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return diff / scale;
  };
  return std::max({block(a.embeddings, b.embeddings), block(a.cls, b.cls),
                   block(a.readout, b.readout), block(a.ln_gain, b.ln_gain),
                   block(a.ln_bias, b.ln_bias)});
}

TwoLayerTrainResult train_two_layer(const TwoLayerState& state, const LabeledDataset& data,
                                    const OptimizerConfig& cfg, std::uint64_t seed,
                                    bool train_layernorm) {
  cfg.validate();
  check_data(state, data);
  TwoLayerTrainResult res;
  res.state = state;
  auto& st = res.state;
  const auto d = static_cast<std::size_t>(st.dim());
  Optimizer opt(cfg, {static_cast<std::size_t>(st.base.embeddings.size()), d, d, d, d});
  res.losses.push_back(two_layer_loss(st, data));

  const Rng base(seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = base.stream(epoch);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const auto g = two_layer_grads(
          st, data, std::span<const std::size_t>(order.data() + start, stop - start));
      opt.begin_step();
      if (cfg.train_embeddings) opt.update(0, st.base.embeddings.data(), g.embeddings.data(), lr);
      if (cfg.train_cls) opt.update(1, st.base.cls.data(), g.cls.data(), lr);
      if (cfg.train_readout) opt.update(2, st.base.readout.data(), g.readout.data(), lr);
      if (train_layernorm) {
        opt.update(3, st.ln_gain.data(), g.ln_gain.data(), lr);
        opt.update(4, st.ln_bias.data(), g.ln_bias.data(), lr);
      }
    }
    res.losses.push_back(two_layer_loss(st, data));
  }
  return res;
}

}  // namespace tokensel
