#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tokensel/datagen.hpp"
#include "tokensel/model.hpp"
#include "tokensel/training.hpp"

namespace tokensel {

// Distinct tokens of one sequence split by score rank under a query direction.
struct SequenceSelection {
  std::vector<TokenId> selected;   // tied for the top score
  std::vector<TokenId> secondary;  // tied for the best score below the top
  std::vector<TokenId> remainder;

  std::vector<TokenId> unselected() const;
  bool operator==(const SequenceSelection&) const = default;
};

struct SelectionProfile {
  std::vector<SequenceSelection> sequences;
  // min over sequences of (lowest selected score - highest unselected score);
  // +inf when no sequence has an unselected token.
  double margin_gap = 0.0;

  bool selects_everything() const;
  std::uint64_t fingerprint() const;
  // Two profiles are equivalent when every sequence selects the same tokens.
  bool same_selection(const SelectionProfile& other) const;
};

// Scores are within tie_tol * (1 + |best|) of the best to count as tied.
SelectionProfile selection_from_scores(const Eigen::Ref<const Vector>& token_scores,
                                       const LabeledDataset& data, double tie_tol);
SelectionProfile selection_profile(const ModelState& state, const Eigen::Ref<const Vector>& query,
                                   const LabeledDataset& data, double tie_tol = 1e-9);

struct ConstraintOrigin {
  TokenId selected = 0;
  TokenId other = 0;
  std::vector<std::size_t> sequences;
};

// min |p|^2  s.t.  <p, row> >= 1 for each inequality row, <p, tie> = 0 for each tie row.
struct MarginProblem {
  Matrix rows;  // E_s - E_s' for selected s, unselected s'
  std::vector<ConstraintOrigin> origins;
  Matrix ties;  // E_s - E_s' for tokens tied inside one selected set
  std::vector<ConstraintOrigin> tie_origins;
  bool all_select = false;  // no inequality rows at all

  Eigen::Index dim() const { return rows.cols(); }
  std::size_t num_rows() const { return static_cast<std::size_t>(rows.rows()); }
};

// Rows are keyed on (s, s') and merged across sequences. Tied selected tokens
// contribute equality rows unless include_ties is false.
MarginProblem build_margin_problem(const ModelState& state, const SelectionProfile& profile,
                                   bool include_ties = true);

struct KktResiduals {
  double stationarity = 0.0;      // |p - sum_i lambda_i row_i - sum_j mu_j tie_j|
  double primal_violation = 0.0;  // max_i max(0, 1 - <p, row_i>)
  double complementarity = 0.0;   // max_i lambda_i |<p, row_i> - 1|
  double equality_violation = 0.0;
  double max() const;
};

struct MarginSolution {
  Vector p_hat;
  Vector p_star;  // p_hat / |p_hat|
  Vector duals;
  Vector tie_duals;
  std::vector<bool> active;
  KktResiduals kkt;
  std::size_t sweeps = 0;

  double norm() const { return p_hat.norm(); }
  double margin() const { return 1.0 / p_hat.norm(); }  // of the unit direction
};

struct SolveOptions {
  double tol = 1e-10;
  std::size_t max_sweeps = 2'000'000;
  // Declare infeasible once the duals certify that no feasible point has a norm below this.
  double infeasible_norm = 1e7;
  double active_tol = 1e-8;
  std::optional<Vector> initial_duals;
};

struct InfeasibleError : NumericalError {
  using NumericalError::NumericalError;
};

struct ConvergenceError : NumericalError {
  ConvergenceError(const std::string& what, KktResiduals residuals)
      : NumericalError(what), residuals(residuals) {}
  KktResiduals residuals;
};

// Projected dual coordinate ascent (p = sum lambda_i row_i, each coordinate step
// preconditioned by 1/|row_i|^2), finished by an exact solve on the active set.
MarginSolution solve_max_margin(const MarginProblem& problem, const SolveOptions& options = {});

// p0 divided by the margin gap it realizes on `profile`.
Vector feasibility_witness(const Eigen::Ref<const Vector>& p0, const ModelState& state,
                           const SelectionProfile& profile, const LabeledDataset& data);

struct ZeroDriftReport {
  bool applicable = false;
  std::string reason;
  Vector direction;  // equal score on every observed token
  std::size_t points = 0;
  double max_abs_drift = 0.0;
  bool pass = false;
};

// Builds a direction that scores every observed token equally and checks that
// its directional derivative vanishes at `points` random queries.
ZeroDriftReport zero_drift_check(const ModelState& state, const LabeledDataset& data, double tol,
                                 std::size_t points = 50, std::uint64_t seed = 0);

struct TheoremSelectionReport {
  bool pass = false;
  std::vector<TokenId> missing;  // completely relevant tokens never selected
};

TheoremSelectionReport verify_theorem_selection(const SelectionProfile& profile,
                                                const TokenStats& stats);

struct LimitCheckOptions {
  double tie_tol = 1e-9;
  double cosine_threshold = 0.99;
  double direction_tol = 1e-4;
  std::size_t window = 10;
  SolveOptions solver;
};

struct LimitReport {
  bool converged = false;
  bool pass = false;
  double cosine = 0.0;
  std::string status;
  Vector limit_direction;
  SelectionProfile profile;
  std::optional<MarginProblem> problem;
  std::optional<MarginSolution> solution;
};

LimitReport verify_limit_is_maxmargin(const Trajectory& traj, const ModelState& state,
                                      const LabeledDataset& data,
                                      const LimitCheckOptions& options = {});

struct ComparedProfile {
  SelectionProfile profile;
  double norm = 0.0;
};

struct SelectionComparison {
  SelectionProfile pure_profile;  // only completely relevant tokens selected
  double pure_norm = 0.0;
  std::vector<ComparedProfile> alternatives;  // feasible, all completely relevant tokens covered
  std::size_t enumerated = 0;
  std::size_t infeasible = 0;
  double best_alternative_norm = 0.0;  // +inf without alternatives
  double mu = 0.0;                     // 1 - pure_norm / best_alternative_norm
  bool pure_strictly_smallest = false;
  double norm_bound = 0.0;  // 4n
  bool within_norm_bound = false;
};

struct EnumerationOverflow : InputError {
  using InputError::InputError;
};

// Every sequence selects exactly its completely positive and negative tokens.
SelectionProfile pure_relevant_profile(const LabeledDataset& data);

// Brute force over per-sequence selected sets; every realizable alternative
// that still covers all completely relevant tokens is solved and compared.
SelectionComparison compare_selections(const ModelState& state, const LabeledDataset& data,
                                       std::size_t enum_limit = 10'000,
                                       const SolveOptions& solver = {});

struct LocalOptimality {
  bool applicable = false;
  double mu = 0.0;
  bool pass = false;
};

// min over sequences and runner-up tokens j of sum_{i selected} (gamma_i - gamma_j).
LocalOptimality local_optimality_check(const ModelState& state, const LabeledDataset& data,
                                       const Eigen::Ref<const Vector>& query,
                                       double tie_tol = 1e-9);

// constraint_id,seq_id,s,s_prime,dual,active
void write_solution_csv(const MarginProblem& problem, const MarginSolution& solution,
                        const Vocabulary& vocab, std::ostream& out);
std::string solution_summary_json(const MarginSolution& solution,
                                  std::optional<double> cosine_to_trajectory = std::nullopt);

}  // namespace tokensel
