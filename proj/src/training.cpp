#include "tokensel/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "tokensel/datagen.hpp"
#include "tokensel/maxmargin.hpp"
#include "tokensel/rng.hpp"

namespace tokensel {

ModelState init_params(std::size_t vocab_size, const InitConfig& cfg) {
  if (cfg.dim < 1) throw ConfigError("embedding dimension must be at least 1");
  if (vocab_size < 1) throw ConfigError("vocabulary must not be empty");
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  Rng rng = Rng(cfg.seed).stream(0);
  ModelState state;
  state.embeddings.resize(static_cast<Eigen::Index>(vocab_size), d);
  for (Eigen::Index s = 0; s < state.embeddings.rows(); ++s)
    for (Eigen::Index k = 0; k < d; ++k) state.embeddings(s, k) = scale * rng.normal();
  state.cls.resize(d);
  for (Eigen::Index k = 0; k < d; ++k) state.cls[k] = scale * rng.normal();
  state.readout = Vector::Unit(d, 0);
  return state;
}

double one_step_required_dim(std::size_t vocab_size, double delta) {
  const double s = static_cast<double>(vocab_size);
  const double root = 2.0 * std::log(s * s / delta);
  return std::max(256.0, root * root);
}

InitReport check_init_concentration(const ModelState& state, double delta) {
  if (!(delta > 0 && delta < 1)) throw InputError("delta must lie in (0, 1)");
  state.validate();
  const auto S = static_cast<std::size_t>(state.vocab_size());
  const double d = static_cast<double>(state.dim());
  InitReport rep;
  rep.overlap_bound =
      std::sqrt(2.0 * std::log(static_cast<double>(S) * static_cast<double>(S) / delta)) /
      std::sqrt(d);

  const Matrix gram = state.embeddings * state.embeddings.transpose();
  for (Eigen::Index s = 0; s < gram.rows(); ++s)
    for (Eigen::Index t = s + 1; t < gram.cols(); ++t)
      rep.max_pair_overlap = std::max(rep.max_pair_overlap, std::abs(gram(s, t)));
  rep.max_readout_overlap = (state.embeddings * state.readout).cwiseAbs().maxCoeff();
  rep.max_cls_overlap = (state.embeddings * state.cls).cwiseAbs().maxCoeff();
  rep.cls_readout_overlap = std::abs(state.cls.dot(state.readout));
  const Vector row_norms = state.embeddings.rowwise().norm();
  rep.max_norm = std::max(row_norms.maxCoeff(), state.cls.norm());
  rep.min_row_norm = row_norms.minCoeff();

  rep.overlaps_ok = std::max({rep.max_pair_overlap, rep.max_readout_overlap, rep.max_cls_overlap,
                              rep.cls_readout_overlap}) <= rep.overlap_bound;
  rep.norms_ok = rep.max_norm <= 2.0 && rep.min_row_norm >= 0.5;
  rep.required_dim = one_step_required_dim(S, delta);
  rep.precondition_met = d >= rep.required_dim;
  return rep;
}

// ---------------------------------------------------------------------------
// Stage one

double StageOneResult::max_row_residual() const {
  return residuals.rows() ? residuals.rowwise().norm().maxCoeff() : 0.0;
}

double StageOneResult::max_residual() const {
  return std::max(max_row_residual(), cls_residual.norm());
}

double StageOneResult::error_bound() const {
  return 11.0 * eta0 * std::pow(static_cast<double>(before.dim()), -0.25);
}

StageOneResult stage_one_step(const ModelState& state, const LabeledDataset& data, double eta0) {
  if (!(eta0 > 0)) throw InputError("eta0 must be positive");
  const auto grad = grad_all(state, data);
  StageOneResult res;
  res.eta0 = eta0;
  res.before = state;
  res.after = state;
  res.after.embeddings -= eta0 * grad.embeddings;
  res.after.cls -= eta0 * grad.cls;

  const auto stats = compute_stats(data);
  res.alpha.assign(static_cast<std::size_t>(state.vocab_size()), 0.0);
  for (std::size_t s = 0; s < stats.tokens.size(); ++s) res.alpha[s] = stats.tokens[s].alpha;

  const Matrix delta = res.after.embeddings - res.before.embeddings;
  res.alignment = delta * state.readout;
  res.residuals = delta;
  for (Eigen::Index s = 0; s < delta.rows(); ++s)
    res.residuals.row(s) -= 0.5 * eta0 * res.alpha[s] * state.readout.transpose();
  res.cls_residual = res.after.cls - res.before.cls;
  return res;
}

BoundednessReport check_boundedness(const StageOneResult& result) {
  BoundednessReport rep;
  rep.max_row_norm = result.after.embeddings.rowwise().norm().maxCoeff();
  rep.row_bound = 2.0 * (1.0 + 2.0 * result.eta0);
  rep.cls_norm = result.after.cls.norm();
  rep.cls_bound = 2.0 + result.error_bound();
  return rep;
}

LossBound stage1_loss_bound(const StageOneResult& result, const LabeledDataset& data) {
  LossBound out;
  out.actual = dataset_loss(result.after, data);
  const double eta0 = result.eta0;
  double total = 0.0;
  for (const auto& ex : data.examples) {
    double mean_alpha = 0.0;
    for (TokenId t : ex.tokens) mean_alpha += result.alpha[t];
    mean_alpha /= static_cast<double>(ex.tokens.size());
    const double margin = 0.5 * eta0 * ex.label * mean_alpha - 1.0 / (22.0 * eta0);
    total += logistic_loss(margin);
  }
  out.bound = total / static_cast<double>(data.size());
  return out;
}

// ---------------------------------------------------------------------------
// Gradient flow on cls

void FlowConfig::validate() const {
  if (!(step_size > 0)) throw ConfigError("flow step size must be positive");
  if (record_every == 0) throw ConfigError("record_every must be positive");
  if (window < 2) throw ConfigError("direction window must be at least 2");
  if (!(direction_tol >= 0)) throw ConfigError("direction tolerance must be non-negative");
  if (!(min_step > 0)) throw ConfigError("min_step must be positive");
  if (!(min_norm_growth >= 0)) throw ConfigError("min_norm_growth must be non-negative");
}

namespace {

// The flow only moves cls inside the span of the observed embedding rows:
// grad_cls L = K^T c with K the observed rows and c one coefficient per token.
// Scores u = K p are advanced as u <- u - eta K K^T c and cls is rebuilt as
// p = p_0 + K^T w at record time, so each step costs O(|O|^2 + nT).
class ClsFlow {
 public:
  ClsFlow(const ModelState& state, const LabeledDataset& data) : data_(data) {
    data.validate();
    std::vector<int> local(static_cast<std::size_t>(state.vocab_size()), -1);
    for (const auto& ex : data.examples)
      for (TokenId t : ex.tokens)
        if (local[t] < 0) {
          local[t] = static_cast<int>(observed_.size());
          observed_.push_back(t);
        }
    const auto m = static_cast<Eigen::Index>(observed_.size());
    keys_.resize(m, state.dim());
    for (Eigen::Index r = 0; r < m; ++r) keys_.row(r) = state.embeddings.row(observed_[r]);
    use_gram_ = m <= state.dim();
    if (use_gram_) gram_ = keys_ * keys_.transpose();
    values_ = keys_ * state.readout;
    for (const auto& ex : data.examples) {
      std::vector<int> idx;
      idx.reserve(ex.tokens.size());
      for (TokenId t : ex.tokens) idx.push_back(local[t]);
      positions_.push_back(std::move(idx));
    }
    vocab_size_ = state.vocab_size();
  }

  Eigen::Index size() const { return static_cast<Eigen::Index>(observed_.size()); }
  const Matrix& keys() const { return keys_; }

  Vector apply_gram(const Vector& c) const {
    if (use_gram_) return gram_ * c;
    return keys_ * (keys_.transpose() * c);
  }

  // Loss and, when coef != nullptr, the per-token gradient coefficients.
  double evaluate(const Vector& scores, Vector* coef) const {
    if (coef) coef->setZero(size());
    const double inv_n = 1.0 / static_cast<double>(data_.size());
    double loss = 0.0;
    Vector a, q;
    for (std::size_t k = 0; k < positions_.size(); ++k) {
      const auto& idx = positions_[k];
      const int y = data_.examples[k].label;
      const auto T = static_cast<Eigen::Index>(idx.size());
      a.resize(T);
      for (Eigen::Index i = 0; i < T; ++i) a[i] = scores[idx[i]];
      q = softmax(a);
      double f = 0.0;
      for (Eigen::Index i = 0; i < T; ++i) f += q[i] * values_[idx[i]];
      loss += logistic_loss(y * f);
      if (coef) {
        const double scale = -y * logistic_weight(y * f) * inv_n;
        for (Eigen::Index i = 0; i < T; ++i)
          (*coef)[idx[i]] += scale * q[i] * (values_[idx[i]] - f);
      }
    }
    return loss * inv_n;
  }

  Vector full_scores(const Vector& local_scores) const {
    Vector out = Vector::Zero(vocab_size_);
    for (Eigen::Index r = 0; r < size(); ++r) out[observed_[r]] = local_scores[r];
    return out;
  }

 private:
  const LabeledDataset& data_;
  std::vector<TokenId> observed_;
  std::vector<std::vector<int>> positions_;
  Matrix keys_;
  Matrix gram_;
  Vector values_;
  bool use_gram_ = false;
  Eigen::Index vocab_size_ = 0;
};

}  // namespace

Trajectory run_gradient_flow(const ModelState& state, const LabeledDataset& data,
                             const FlowConfig& cfg) {
  cfg.validate();
  state.validate();
  const ClsFlow flow(state, data);
  const Vector p0 = state.cls;
  const Vector base_scores = flow.keys() * p0;
  Vector weights = Vector::Zero(flow.size());
  Vector scores = base_scores;

  Trajectory traj;
  traj.final_state = state;
  double norm0 = p0.norm();

  auto record = [&](std::size_t step, double loss) {
    Snapshot snap;
    snap.step = step;
    const Vector p = p0 + flow.keys().transpose() * weights;
    snap.norm = p.norm();
    snap.direction = snap.norm > 0 ? Vector(p / snap.norm) : Vector::Zero(p.size());
    snap.loss = loss;
    snap.profile_hash =
        selection_from_scores(flow.full_scores(scores), data, cfg.tie_tol).fingerprint();
    traj.snapshots.push_back(std::move(snap));
    traj.final_state.cls = p;
  };

  Vector coef(flow.size());
  double loss = flow.evaluate(scores, &coef);
  record(0, loss);
  std::size_t step = 0;
  while (step < cfg.max_steps) {
    if (coef.cwiseAbs().maxCoeff() == 0.0) {
      traj.stop_reason = "stationary";
      return traj;
    }
    const Vector drift = flow.apply_gram(coef);
    double eta = cfg.step_size;
    Vector trial;
    double trial_loss = 0.0;
    for (;;) {
      trial = scores - eta * drift;
      trial_loss = flow.evaluate(trial, nullptr);
      if (trial_loss <= loss) break;
      eta *= 0.5;
      if (eta < cfg.min_step) {
        traj.stop_reason = "stall";
        throw FlowStall("gradient flow stalled: backtracking step fell below " +
                            std::to_string(cfg.min_step) + " at step " + std::to_string(step),
                        std::move(traj));
      }
    }
    weights -= eta * coef;
    scores = std::move(trial);
    ++step;
    if (step % cfg.record_every == 0 || step == cfg.max_steps) {
      // Resynchronize scores with the accumulated weights to shed rounding drift.
      scores = base_scores + flow.apply_gram(weights);
      loss = flow.evaluate(scores, &coef);
      record(step, loss);
      const auto& last = traj.snapshots.back();
      if (traj.snapshots.size() >= cfg.window && last.norm >= cfg.min_norm_growth * norm0 &&
          detect_direction_limit(traj, cfg.direction_tol, cfg.window)) {
        traj.stop_reason = "direction_stable";
        return traj;
      }
    } else {
      loss = flow.evaluate(scores, &coef);
    }
  }
  traj.stop_reason = "max_steps";
  return traj;
}

std::optional<Vector> detect_direction_limit(const Trajectory& traj, double tol,
                                             std::size_t window) {
  const auto& snaps = traj.snapshots;
  window = std::max<std::size_t>(window, 2);
  if (snaps.size() < window) return std::nullopt;
  const std::size_t first = snaps.size() - window;
  for (std::size_t i = first; i < snaps.size(); ++i) {
    if (snaps[i].direction.squaredNorm() == 0.0) return std::nullopt;
    for (std::size_t j = i + 1; j < snaps.size(); ++j)
      if (1.0 - snaps[i].direction.dot(snaps[j].direction) > tol) return std::nullopt;
  }
  return snaps.back().direction;
}

void write_trajectory_jsonl(const Trajectory& traj, std::ostream& out) {
  char hash[17];
  for (const auto& s : traj.snapshots) {
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(s.profile_hash));
    nlohmann::json rec = {
        {"step", s.step}, {"norm_p", s.norm}, {"loss", s.loss}, {"direction_hash", hash}};
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Full training

void OptimizerConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("eps must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(gamma > 0)) throw ConfigError("lr decay factor must be positive");
}

double OptimizerConfig::lr_at(std::size_t epoch) const {
  double out = lr;
  for (auto m : milestones)
    if (epoch >= m) out *= gamma;
  return out;
}

OptimizerConfig OptimizerConfig::paper_synthetic() {
  OptimizerConfig cfg;
  cfg.epochs = 196;
  cfg.lr = 1e-4;
  cfg.weight_decay = 1e-4;
  return cfg;
}

OptimizerConfig OptimizerConfig::paper_real() {
  OptimizerConfig cfg;
  cfg.epochs = 500;
  cfg.lr = 1e-2;
  cfg.weight_decay = 1e-8;
  return cfg;
}

Optimizer::Optimizer(const OptimizerConfig& cfg, std::vector<std::size_t> block_sizes) : cfg_(cfg) {
  cfg_.validate();
  for (auto n : block_sizes) {
    m_.push_back(Vector::Zero(static_cast<Eigen::Index>(n)));
    v_.push_back(Vector::Zero(static_cast<Eigen::Index>(n)));
  }
}

void Optimizer::update(std::size_t block, double* param, const double* grad, double lr) {
  const auto n = m_.at(block).size();
  Eigen::Map<Vector> x(param, n);
  Eigen::Map<const Vector> g(grad, n);
  x *= 1.0 - lr * cfg_.weight_decay;
  if (cfg_.kind == OptimizerKind::gradient_descent) {
    x -= lr * g;
    return;
  }
  Vector& m = m_[block];
  Vector& v = v_[block];
  m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
  v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
  const double t = static_cast<double>(std::max<std::size_t>(t_, 1));
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
}

FullGradient batch_gradient(const ModelState& state, const LabeledDataset& data,
                            std::span<const std::size_t> batch) {
  const auto d = state.dim();
  FullGradient grad{Matrix::Zero(state.vocab_size(), d), Vector::Zero(d), Vector::Zero(d), 0.0};
  if (batch.empty()) return grad;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Vector mean_key(d);
  for (std::size_t k : batch) {
    const auto& ex = data.examples.at(k);
    const auto fwd = attention_forward(state, ex.tokens, ex.label);
    const auto T = static_cast<Eigen::Index>(ex.tokens.size());
    grad.loss += logistic_loss(ex.label * fwd.output) * inv_b;
    const double scale = -ex.label * fwd.sigmoid_factor * inv_b;
    mean_key.setZero();
    for (Eigen::Index i = 0; i < T; ++i)
      mean_key += fwd.weights[i] * state.embeddings.row(ex.tokens[i]).transpose();
    for (Eigen::Index i = 0; i < T; ++i) {
      const TokenId xi = ex.tokens[i];
      const double q = fwd.weights[i];
      const double coef = q * (ex.label * fwd.gammas[i] - fwd.output);
      grad.embeddings.row(xi) += scale * (coef * state.cls + q * state.readout).transpose();
      grad.cls += scale * coef * (state.embeddings.row(xi).transpose() - mean_key);
    }
    grad.readout += scale * mean_key;
  }
  return grad;
}

EpochRecord epoch_record(const ModelState& state, const LabeledDataset& data, std::size_t epoch,
                         double lr) {
  EpochRecord rec;
  rec.epoch = epoch;
  rec.lr = lr;
  rec.loss = dataset_loss(state, data);
  rec.dot_readout = state.embeddings * state.readout;
  rec.dot_cls = state.embeddings * state.cls;
  return rec;
}

TrainResult train_full(const ModelState& state, const LabeledDataset& data,
                       const OptimizerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  state.validate();
  TrainResult res;
  res.state = state;
  ModelState& st = res.state;
  Optimizer opt(cfg, {static_cast<std::size_t>(st.embeddings.size()),
                      static_cast<std::size_t>(st.cls.size()),
                      static_cast<std::size_t>(st.readout.size())});
  res.epochs.push_back(epoch_record(st, data, 0, cfg.lr_at(0)));

  const Rng base(seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = base.stream(epoch);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const auto grad =
          batch_gradient(st, data, std::span<const std::size_t>(order.data() + start, stop - start));
      opt.begin_step();
      if (cfg.train_embeddings) opt.update(0, st.embeddings.data(), grad.embeddings.data(), lr);
      if (cfg.train_cls) opt.update(1, st.cls.data(), grad.cls.data(), lr);
      if (cfg.train_readout) opt.update(2, st.readout.data(), grad.readout.data(), lr);
    }
    res.epochs.push_back(epoch_record(st, data, epoch + 1, lr));
  }
  return res;
}

}  // namespace tokensel
