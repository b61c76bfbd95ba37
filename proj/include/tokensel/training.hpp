#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokensel/model.hpp"

namespace tokensel {

struct InitConfig {
  std::size_t dim = 256;
  std::uint64_t seed = 0;
  double delta = 0.05;
};

// Embedding rows and cls drawn i.i.d. N(0, I/d); readout fixed to the first basis vector.
ModelState init_params(std::size_t vocab_size, const InitConfig& cfg);

// Concentration event that the one-step analysis conditions on.
struct InitReport {
  double overlap_bound = 0.0;  // sqrt(2 log(|S|^2 / delta)) / sqrt(d)
  double max_pair_overlap = 0.0;
  double max_readout_overlap = 0.0;
  double max_cls_overlap = 0.0;
  double cls_readout_overlap = 0.0;
  double max_norm = 0.0;      // over rows and cls, must be <= 2
  double min_row_norm = 0.0;  // must be >= 1/2
  bool overlaps_ok = false;
  bool norms_ok = false;
  // d >= max{256, (2 log(|S|^2/delta))^2}; flagged, never treated as a failure.
  double required_dim = 0.0;
  bool precondition_met = false;

  bool pass() const { return overlaps_ok && norms_ok; }
};

InitReport check_init_concentration(const ModelState& state, double delta);

// Dimension needed by the one-step error bound: max{256, (2 log(|S|^2/delta))^2}.
double one_step_required_dim(std::size_t vocab_size, double delta);

struct StageOneResult {
  ModelState before;
  ModelState after;
  double eta0 = 0.0;
  std::vector<double> alpha;  // signed frequencies of the dataset
  Vector alignment;           // <E_s^1 - E_s^0, readout>
  Matrix residuals;           // E_s^1 - E_s^0 - (eta0/2) alpha_s readout
  Vector cls_residual;        // p^1 - p^0

  double max_residual() const;   // max(max_s |err_s|, |err_p|)
  double max_row_residual() const;
  double error_bound() const;    // 11 eta0 d^{-1/4}
};

// One full-batch gradient step on every embedding row and cls; readout untouched.
StageOneResult stage_one_step(const ModelState& state, const LabeledDataset& data, double eta0);

struct BoundednessReport {
  double max_row_norm = 0.0;
  double row_bound = 0.0;  // 2 (1 + 2 eta0)
  double cls_norm = 0.0;
  double cls_bound = 0.0;  // 2 + 11 eta0 d^{-1/4}
  bool pass() const { return max_row_norm <= row_bound && cls_norm <= cls_bound; }
};

BoundednessReport check_boundedness(const StageOneResult& result);

struct LossBound {
  double actual = 0.0;
  double bound = 0.0;
};

// Loss after stage one against E[log(1 + exp(-(1/T) sum_i (eta0/2) y alpha_{x_i} + 1/(22 eta0)))].
LossBound stage1_loss_bound(const StageOneResult& result, const LabeledDataset& data);

struct FlowConfig {
  double step_size = 1.0;
  std::size_t max_steps = 1'000'000;
  std::size_t record_every = 1000;
  // Stop once |p| >= min_norm_growth * |p_0| and the last `window` recorded
  // directions are pairwise within cosine distance direction_tol.
  double min_norm_growth = 10.0;
  double direction_tol = 1e-7;
  std::size_t window = 10;
  double min_step = 1e-12;   // backtracking below this is a numerical stall
  double tie_tol = 1e-9;     // for the selection fingerprint of each snapshot

  void validate() const;
};

struct Snapshot {
  std::size_t step = 0;
  double norm = 0.0;
  Vector direction;
  double loss = 0.0;
  std::uint64_t profile_hash = 0;
};

struct Trajectory {
  std::vector<Snapshot> snapshots;
  ModelState final_state;
  std::string stop_reason;
};

struct FlowStall : NumericalError {
  FlowStall(const std::string& what, Trajectory partial)
      : NumericalError(what), partial(std::move(partial)) {}
  Trajectory partial;
};

// Forward-Euler gradient flow on cls with the embeddings frozen. Each step starts
// from step_size and halves it until the loss does not increase.
Trajectory run_gradient_flow(const ModelState& state, const LabeledDataset& data,
                             const FlowConfig& cfg);

// Last recorded direction if the final `window` directions are pairwise within
// cosine distance tol; nullopt otherwise.
std::optional<Vector> detect_direction_limit(const Trajectory& traj, double tol,
                                             std::size_t window = 10);

// One JSON object per line: {"step", "norm_p", "loss", "direction_hash"}.
void write_trajectory_jsonl(const Trajectory& traj, std::ostream& out);

// ---------------------------------------------------------------------------
// Full training

enum class OptimizerKind { gradient_descent, adamw };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 128;
  std::size_t epochs = 196;
  std::vector<std::size_t> milestones{100, 200};
  double gamma = 0.1;
  bool train_embeddings = true;
  bool train_cls = true;
  bool train_readout = true;

  void validate() const;
  double lr_at(std::size_t epoch) const;

  static OptimizerConfig paper_synthetic();  // 196 epochs, lr 1e-4, wd 1e-4
  static OptimizerConfig paper_real();       // 500 epochs, lr 1e-2, wd 1e-8
};

// Decoupled weight decay Adam over a fixed set of parameter blocks, with the
// update rule of torch.optim.AdamW. Plain gradient descent when kind says so.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, std::vector<std::size_t> block_sizes);
  void begin_step() { ++t_; }
  void update(std::size_t block, double* param, const double* grad, double lr);

 private:
  OptimizerConfig cfg_;
  std::vector<Vector> m_, v_;
  std::size_t t_ = 0;
};

struct FullGradient {
  Matrix embeddings;
  Vector cls;
  Vector readout;
  double loss = 0.0;  // mean loss over the batch
};

// Batch gradient over (embeddings, cls, readout) via the factored identities.
FullGradient batch_gradient(const ModelState& state, const LabeledDataset& data,
                            std::span<const std::size_t> batch);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  Vector dot_readout;  // <E_s, readout> per token
  Vector dot_cls;      // <E_s, cls> per token
};

struct TrainResult {
  ModelState state;
  std::vector<EpochRecord> epochs;  // epoch 0 is the initial state
};

TrainResult train_full(const ModelState& state, const LabeledDataset& data,
                       const OptimizerConfig& cfg, std::uint64_t seed);

EpochRecord epoch_record(const ModelState& state, const LabeledDataset& data, std::size_t epoch,
                         double lr);

}  // namespace tokensel
