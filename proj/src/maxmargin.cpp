#include "tokensel/maxmargin.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <set>

#include <json.hpp>

#include "tokensel/io.hpp"
#include "tokensel/rng.hpp"

namespace tokensel {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<TokenId> distinct_tokens(const Example& ex) {
  std::vector<TokenId> out(ex.tokens.begin(), ex.tokens.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t x) {
  for (int b = 0; b < 8; ++b) {
    h ^= (x >> (8 * b)) & 0xffu;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Smallest selected score minus largest unselected score, per sequence.
double sequence_gap(const SequenceSelection& sel, const Vector& scores) {
  const auto unsel = sel.unselected();
  if (unsel.empty()) return kInf;
  double lo = kInf, hi = -kInf;
  for (TokenId s : sel.selected) lo = std::min(lo, scores[s]);
  for (TokenId s : unsel) hi = std::max(hi, scores[s]);
  return lo - hi;
}

}  // namespace

std::vector<TokenId> SequenceSelection::unselected() const {
  std::vector<TokenId> out = secondary;
  out.insert(out.end(), remainder.begin(), remainder.end());
  std::sort(out.begin(), out.end());
  return out;
}

bool SelectionProfile::selects_everything() const {
  return std::all_of(sequences.begin(), sequences.end(), [](const SequenceSelection& s) {
    return s.secondary.empty() && s.remainder.empty();
  });
}

std::uint64_t SelectionProfile::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t k = 0; k < sequences.size(); ++k) {
    h = fnv1a(h, ~static_cast<std::uint64_t>(k));
    for (TokenId s : sequences[k].selected) h = fnv1a(h, static_cast<std::uint64_t>(s));
  }
  return h;
}

bool SelectionProfile::same_selection(const SelectionProfile& other) const {
  if (sequences.size() != other.sequences.size()) return false;
  for (std::size_t k = 0; k < sequences.size(); ++k)
    if (sequences[k].selected != other.sequences[k].selected) return false;
  return true;
}

SelectionProfile selection_from_scores(const Eigen::Ref<const Vector>& token_scores,
                                       const LabeledDataset& data, double tie_tol) {
  if (!(tie_tol >= 0)) throw InputError("tie_tol must be non-negative");
  const Vector scores = token_scores;
  SelectionProfile profile;
  profile.margin_gap = kInf;
  for (const auto& ex : data.examples) {
    std::vector<TokenId> rest = distinct_tokens(ex);
    SequenceSelection sel;
    auto take_top = [&](std::vector<TokenId>& into) {
      if (rest.empty()) return;
      double best = -kInf;
      for (TokenId s : rest) best = std::max(best, scores[s]);
      const double cut = best - tie_tol * (1.0 + std::abs(best));
      std::vector<TokenId> keep;
      for (TokenId s : rest) (scores[s] >= cut ? into : keep).push_back(s);
      rest = std::move(keep);
    };
    take_top(sel.selected);
    take_top(sel.secondary);
    sel.remainder = std::move(rest);
    profile.margin_gap = std::min(profile.margin_gap, sequence_gap(sel, scores));
    profile.sequences.push_back(std::move(sel));
  }
  return profile;
}

SelectionProfile selection_profile(const ModelState& state, const Eigen::Ref<const Vector>& query,
                                   const LabeledDataset& data, double tie_tol) {
  if (query.size() != state.dim()) throw InputError("query dimension does not match the state");
  data.validate();
  const Vector scores = state.embeddings * query;
  return selection_from_scores(scores, data, tie_tol);
}

MarginProblem build_margin_problem(const ModelState& state, const SelectionProfile& profile,
                                   bool include_ties) {
  std::map<std::pair<TokenId, TokenId>, std::size_t> row_of, tie_of;
  MarginProblem prob;
  auto add = [](std::map<std::pair<TokenId, TokenId>, std::size_t>& index,
                std::vector<ConstraintOrigin>& origins, TokenId a, TokenId b, std::size_t seq) {
    auto [it, fresh] = index.try_emplace({a, b}, origins.size());
    if (fresh) origins.push_back({a, b, {}});
    auto& seqs = origins[it->second].sequences;
    if (seqs.empty() || seqs.back() != seq) seqs.push_back(seq);
  };
  for (std::size_t k = 0; k < profile.sequences.size(); ++k) {
    const auto& sel = profile.sequences[k];
    for (TokenId s : sel.selected) {
      if (s < 0 || s >= state.vocab_size()) throw InputError("profile token outside the state");
      for (TokenId t : sel.unselected()) add(row_of, prob.origins, s, t, k);
    }
    if (include_ties)
      for (std::size_t j = 1; j < sel.selected.size(); ++j)
        add(tie_of, prob.tie_origins, sel.selected[0], sel.selected[j], k);
  }
  const auto d = state.dim();
  prob.rows.resize(static_cast<Eigen::Index>(prob.origins.size()), d);
  for (std::size_t r = 0; r < prob.origins.size(); ++r)
    prob.rows.row(r) = state.embeddings.row(prob.origins[r].selected) -
                       state.embeddings.row(prob.origins[r].other);
  prob.ties.resize(static_cast<Eigen::Index>(prob.tie_origins.size()), d);
  for (std::size_t r = 0; r < prob.tie_origins.size(); ++r)
    prob.ties.row(r) = state.embeddings.row(prob.tie_origins[r].selected) -
                       state.embeddings.row(prob.tie_origins[r].other);
  prob.all_select = prob.origins.empty();
  return prob;
}

double KktResiduals::max() const {
  return std::max({stationarity, primal_violation, complementarity, equality_violation});
}

namespace {

using LongVector = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
using LongMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

// Residuals are accumulated in extended precision: with large duals the
// complementarity products amplify the rounding of a plain double dot product.
KktResiduals kkt_residuals(const MarginProblem& prob, const Vector& p, const Vector& lambda,
                           const Vector& mu) {
  KktResiduals r;
  const LongVector pl = p.cast<long double>();
  LongVector combo = prob.rows.transpose().cast<long double>() * lambda.cast<long double>();
  if (prob.ties.rows()) combo += prob.ties.transpose().cast<long double>() * mu.cast<long double>();
  r.stationarity = static_cast<double>((pl - combo).norm());
  const Vector slack = (prob.rows.cast<long double>() * pl -
                        LongVector::Ones(prob.rows.rows())).cast<double>();
  for (Eigen::Index i = 0; i < slack.size(); ++i) {
    r.primal_violation = std::max(r.primal_violation, -slack[i]);
    r.complementarity = std::max(r.complementarity, lambda[i] * std::abs(slack[i]));
  }
  if (prob.ties.rows()) r.equality_violation = (prob.ties * p).cwiseAbs().maxCoeff();
  return r;
}

struct Polished {
  Vector p, lambda, mu;
};

// Least-norm point with the rows in `support` tight and all ties satisfied.
// Returns nothing unless the point is primal feasible with non-negative duals.
std::optional<Polished> polish(const MarginProblem& prob, const std::vector<Eigen::Index>& support,
                               double tol) {
  const auto ns = static_cast<Eigen::Index>(support.size());
  const auto nt = prob.ties.rows();
  if (ns == 0) return std::nullopt;
  Matrix m(ns + nt, prob.dim());
  Vector rhs = Vector::Zero(ns + nt);
  for (Eigen::Index i = 0; i < ns; ++i) {
    m.row(i) = prob.rows.row(support[i]);
    rhs[i] = 1.0;
  }
  if (nt) m.bottomRows(nt) = prob.ties;
  const Eigen::MatrixXd md = m;
  const auto cod = md.completeOrthogonalDecomposition();
  const auto cod_t = md.transpose().completeOrthogonalDecomposition();
  // One round of refinement with residuals in extended precision.
  const LongMatrix ml = md.cast<long double>();
  Vector p = cod.solve(rhs);
  p += cod.solve((rhs.cast<long double>() - ml * p.cast<long double>()).cast<double>());
  const double scale = std::max(1.0, p.norm());
  if ((md * p - rhs).cwiseAbs().maxCoeff() > tol * scale) return std::nullopt;
  Vector z = cod_t.solve(p);
  z += cod_t.solve((p.cast<long double>() - ml.transpose() * z.cast<long double>()).cast<double>());
  Polished out{p, Vector::Zero(prob.rows.rows()), z.tail(nt)};
  for (Eigen::Index i = 0; i < ns; ++i) {
    if (z[i] < -tol * scale) return std::nullopt;
    out.lambda[support[i]] = std::max(0.0, z[i]);
  }
  if ((prob.rows * p).minCoeff() < 1.0 - tol * scale) return std::nullopt;
  return out;
}

// Lawson-Hanson non-negative least squares: min |E u - f| over u >= 0.
Vector nnls(const Eigen::MatrixXd& e, const Vector& f) {
  const auto n = e.cols();
  Vector x = Vector::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, e.norm()) *
                     static_cast<double>(std::max(e.rows(), n));
  std::vector<bool> blocked(static_cast<std::size_t>(n), false);
  for (Eigen::Index outer = 0; outer < 3 * n + 10; ++outer) {
    const Vector w = e.transpose() * (f - e * x);
    Eigen::Index pick = -1;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[j] && !blocked[j] && w[j] > tol && (pick < 0 || w[j] > w[pick])) pick = j;
    if (pick < 0) break;
    passive[pick] = true;
    for (Eigen::Index inner = 0; inner < 3 * n + 10; ++inner) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j]) idx.push_back(j);
      Eigen::MatrixXd sub(e.rows(), static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) sub.col(k) = e.col(idx[k]);
      const Vector zs = sub.completeOrthogonalDecomposition().solve(f);
      Vector z = Vector::Zero(n);
      bool positive = true;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        z[idx[k]] = zs[k];
        positive = positive && zs[k] > tol;
      }
      if (positive) {
        x = z;
        break;
      }
      if (inner == 0 && z[pick] <= tol) {
        // The new column cannot enter; leave it out for this round.
        passive[pick] = false;
        blocked[pick] = true;
        break;
      }
      double alpha = 1.0;
      for (Eigen::Index j : idx)
        if (z[j] <= tol) alpha = std::min(alpha, x[j] / (x[j] - z[j]));
      x += alpha * (z - x);
      for (Eigen::Index j : idx)
        if (x[j] <= tol) {
          passive[j] = false;
          x[j] = 0.0;
        }
    }
    if (!blocked[pick]) std::fill(blocked.begin(), blocked.end(), false);
  }
  return x;
}

// Least-distance form of the problem restricted to the null space of the tie
// rows: min |z| s.t. G z >= 1 with G = rows * N. The NNLS residual r of
// [G^T; 1^T] u = e_last is zero exactly when the constraints are incompatible,
// and otherwise |r|^2 = 1 / (1 + |p_hat|^2).
double feasibility_residual(const MarginProblem& prob) {
  // Everything happens inside the span of the rows and ties; work in an
  // orthonormal basis of that span so the cost does not grow with d.
  const auto m = prob.rows.rows();
  const auto nt = prob.ties.rows();
  Eigen::MatrixXd stacked(prob.dim(), m + nt);
  stacked.leftCols(m) = prob.rows.transpose();
  if (nt) stacked.rightCols(nt) = prob.ties.transpose();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> span_qr(stacked);
  const auto r = span_qr.rank();
  if (r == 0) return 0.0;
  const Eigen::MatrixXd span = span_qr.householderQ() * Eigen::MatrixXd::Identity(prob.dim(), r);
  const Eigen::MatrixXd rows = Eigen::MatrixXd(prob.rows) * span;
  Eigen::MatrixXd basis;
  if (nt == 0) {
    basis = Eigen::MatrixXd::Identity(r, r);
  } else {
    const Eigen::MatrixXd bt = (Eigen::MatrixXd(prob.ties) * span).transpose();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(bt);
    const auto rank = qr.rank();
    if (rank == r) return 0.0;
    const Eigen::MatrixXd q = qr.householderQ();
    basis = q.rightCols(r - rank);
  }
  const Eigen::MatrixXd g = rows * basis;
  Eigen::MatrixXd e(g.cols() + 1, g.rows());
  e.topRows(g.cols()) = g.transpose();
  e.bottomRows(1).setOnes();
  Vector f = Vector::Zero(e.rows());
  f[e.rows() - 1] = 1.0;
  const Vector u = nnls(e, f);
  return (e * u - f).norm();
}

}  // namespace

MarginSolution solve_max_margin(const MarginProblem& prob, const SolveOptions& opt) {
  if (prob.rows.rows() == 0)
    throw InputError("margin problem has no constraints (the profile selects every token)");
  if (!prob.rows.allFinite() || !prob.ties.allFinite())
    throw InputError("margin problem has non-finite rows");
  const auto m = prob.rows.rows();
  const auto nt = prob.ties.rows();
  const Vector row_sq = prob.rows.rowwise().squaredNorm();
  const Vector tie_sq = prob.ties.rowwise().squaredNorm();
  for (Eigen::Index i = 0; i < m; ++i)
    if (row_sq[i] == 0.0)
      throw InfeasibleError("constraint " + std::to_string(i) + " compares a token with itself");

  const double residual = feasibility_residual(prob);
  if (residual * opt.infeasible_norm < 1.0)
    throw InfeasibleError("margin constraints are infeasible (Farkas residual " +
                          format_double(residual) + ")");

  Vector lambda = Vector::Zero(m);
  Vector mu = Vector::Zero(nt);
  if (opt.initial_duals) {
    if (opt.initial_duals->size() != m) throw InputError("initial duals have the wrong size");
    lambda = opt.initial_duals->cwiseMax(0.0);
  }
  Vector p = prob.rows.transpose() * lambda;

  auto finish = [&](MarginSolution sol) {
    sol.p_star = sol.p_hat / sol.p_hat.norm();
    sol.active.resize(static_cast<std::size_t>(m));
    const Vector values = prob.rows * sol.p_hat;
    for (Eigen::Index i = 0; i < m; ++i)
      sol.active[i] = values[i] <= 1.0 + opt.active_tol * std::max(1.0, sol.p_hat.norm());
    return sol;
  };

  std::size_t sweep = 0;
  std::size_t next_polish = 1;
  for (; sweep < opt.max_sweeps; ++sweep) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double step = (1.0 - prob.rows.row(i).dot(p)) / row_sq[i];
      const double updated = std::max(0.0, lambda[i] + step);
      const double delta = updated - lambda[i];
      if (delta != 0.0) {
        p += delta * prob.rows.row(i).transpose();
        lambda[i] = updated;
      }
    }
    for (Eigen::Index j = 0; j < nt; ++j) {
      if (tie_sq[j] == 0.0) continue;
      const double delta = -prob.ties.row(j).dot(p) / tie_sq[j];
      p += delta * prob.ties.row(j).transpose();
      mu[j] += delta;
    }

    const double scale = std::max(1.0, p.norm());
    const auto res = kkt_residuals(prob, p, lambda, mu);
    if (res.max() <= opt.tol * scale)
      return finish({p, {}, lambda, mu, {}, res, sweep + 1});

    // Any feasible q has |q| >= sum(lambda) / |p|, since <q, p> >= sum(lambda).
    const double pn = p.norm();
    const double certified = pn > 0 ? lambda.sum() / pn : (lambda.sum() > 0 ? kInf : 0.0);
    if (certified > opt.infeasible_norm)
      throw InfeasibleError("margin constraints are infeasible: every feasible point would need norm > " +
                            format_double(opt.infeasible_norm));

    if (sweep + 1 == next_polish) {
      next_polish = next_polish < 64 ? next_polish + 1 : next_polish + next_polish / 4;
      std::vector<Eigen::Index> support;
      for (Eigen::Index i = 0; i < m; ++i)
        if (lambda[i] > 0) support.push_back(i);
      if (auto pol = polish(prob, support, opt.tol)) {
        const auto pres = kkt_residuals(prob, pol->p, pol->lambda, pol->mu);
        if (pres.max() <= opt.tol * std::max(1.0, pol->p.norm()))
          return finish({pol->p, {}, pol->lambda, pol->mu, {}, pres, sweep + 1});
      }
    }
  }
  throw ConvergenceError("max-margin solver hit the sweep cap", kkt_residuals(prob, p, lambda, mu));
}

Vector feasibility_witness(const Eigen::Ref<const Vector>& p0, const ModelState& state,
                           const SelectionProfile& profile, const LabeledDataset& data) {
  if (profile.sequences.size() != data.size())
    throw InputError("profile and dataset disagree on the number of sequences");
  const Vector scores = state.embeddings * p0;
  double tau = kInf;
  for (const auto& sel : profile.sequences) tau = std::min(tau, sequence_gap(sel, scores));
  if (!(tau > 0)) throw InputError("query does not realize the profile (margin gap <= 0)");
  if (std::isinf(tau)) throw InputError("profile selects every token; no margin to normalize");
  return p0 / tau;
}

ZeroDriftReport zero_drift_check(const ModelState& state, const LabeledDataset& data, double tol,
                                 std::size_t points, std::uint64_t seed) {
  data.validate();
  state.validate();
  ZeroDriftReport rep;
  std::vector<TokenId> observed;
  for (const auto& ex : data.examples)
    for (TokenId t : ex.tokens) observed.push_back(t);
  std::sort(observed.begin(), observed.end());
  observed.erase(std::unique(observed.begin(), observed.end()), observed.end());
  const auto n_obs = static_cast<Eigen::Index>(observed.size());
  if (state.dim() < n_obs) {
    rep.reason = "embedding dimension " + std::to_string(state.dim()) + " is below the " +
                 std::to_string(n_obs) + " observed tokens";
    return rep;
  }
  Eigen::MatrixXd keys(n_obs, state.dim());
  for (Eigen::Index r = 0; r < n_obs; ++r) keys.row(r) = state.embeddings.row(observed[r]);
  const Vector ones = Vector::Ones(n_obs);
  Vector dir = keys.completeOrthogonalDecomposition().solve(ones);
  if ((keys * dir - ones).cwiseAbs().maxCoeff() > 1e-8 || dir.norm() == 0.0) {
    rep.reason = "observed embeddings are linearly dependent";
    return rep;
  }
  rep.applicable = true;
  rep.direction = dir / dir.norm();
  rep.points = points;

  Rng rng = Rng(seed).stream(0);
  ModelState probe = state;
  const double scale = 3.0 / std::sqrt(static_cast<double>(state.dim()));
  for (std::size_t k = 0; k < points; ++k) {
    for (Eigen::Index i = 0; i < probe.cls.size(); ++i) probe.cls[i] = scale * rng.normal();
    rep.max_abs_drift =
        std::max(rep.max_abs_drift, std::abs(directional_grad(probe, data, rep.direction)));
  }
  rep.pass = rep.max_abs_drift <= tol;
  return rep;
}

TheoremSelectionReport verify_theorem_selection(const SelectionProfile& profile,
                                                const TokenStats& stats) {
  std::set<TokenId> chosen;
  for (const auto& sel : profile.sequences) chosen.insert(sel.selected.begin(), sel.selected.end());
  TheoremSelectionReport rep;
  for (TokenId s : stats.completely_relevant())
    if (!chosen.count(s)) rep.missing.push_back(s);
  rep.pass = rep.missing.empty();
  return rep;
}

LimitReport verify_limit_is_maxmargin(const Trajectory& traj, const ModelState& state,
                                      const LabeledDataset& data, const LimitCheckOptions& opt) {
  LimitReport rep;
  auto dir = detect_direction_limit(traj, opt.direction_tol, opt.window);
  if (!dir) {
    rep.status = "no_direction_limit";
    return rep;
  }
  rep.converged = true;
  rep.limit_direction = *dir;
  rep.profile = selection_profile(state, *dir, data, opt.tie_tol);
  if (rep.profile.selects_everything()) {
    rep.status = "all_select";
    return rep;
  }
  rep.problem = build_margin_problem(state, rep.profile);
  try {
    rep.solution = solve_max_margin(*rep.problem, opt.solver);
  } catch (const InfeasibleError&) {
    rep.status = "infeasible";
    return rep;
  } catch (const ConvergenceError&) {
    rep.status = "solver_not_converged";
    return rep;
  }
  rep.cosine = rep.solution->p_star.dot(*dir) / dir->norm();
  rep.pass = rep.cosine >= opt.cosine_threshold;
  rep.status = rep.pass ? "max_margin" : "below_threshold";
  return rep;
}

SelectionProfile pure_relevant_profile(const LabeledDataset& data) {
  data.validate();
  const auto stats = compute_stats(data);
  std::vector<bool> relevant(data.vocab.size, false);
  for (TokenId s : stats.completely_relevant()) relevant[s] = true;
  SelectionProfile prof;
  for (std::size_t k = 0; k < data.size(); ++k) {
    SequenceSelection sel;
    for (TokenId s : distinct_tokens(data.examples[k]))
      (relevant[s] ? sel.selected : sel.remainder).push_back(s);
    if (sel.selected.empty())
      throw InputError("sequence " + std::to_string(k) +
                       " has no completely positive or negative token");
    prof.sequences.push_back(std::move(sel));
  }
  prof.margin_gap = kInf;
  return prof;
}

SelectionComparison compare_selections(const ModelState& state, const LabeledDataset& data,
                                       std::size_t enum_limit, const SolveOptions& solver) {
  data.validate();
  const auto stats = compute_stats(data);
  const auto targets = stats.completely_relevant();
  std::vector<bool> relevant(static_cast<std::size_t>(state.vocab_size()), false);
  for (TokenId s : targets) relevant[s] = true;

  std::vector<std::vector<TokenId>> distinct;
  for (const auto& ex : data.examples) distinct.push_back(distinct_tokens(ex));

  auto make_profile = [&](const std::vector<std::vector<TokenId>>& chosen) {
    SelectionProfile prof;
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      SequenceSelection sel;
      sel.selected = chosen[k];
      for (TokenId s : distinct[k])
        if (!std::binary_search(chosen[k].begin(), chosen[k].end(), s))
          sel.remainder.push_back(s);
      prof.sequences.push_back(std::move(sel));
    }
    prof.margin_gap = kInf;
    return prof;
  };

  SelectionComparison cmp;
  cmp.pure_profile = pure_relevant_profile(data);
  std::vector<std::vector<TokenId>> pure;
  for (const auto& sel : cmp.pure_profile.sequences) pure.push_back(sel.selected);
  const auto pure_problem = build_margin_problem(state, cmp.pure_profile);
  if (pure_problem.all_select) throw InputError("pure-relevant profile selects every token");
  cmp.pure_norm = solve_max_margin(pure_problem, solver).norm();

  double total = 1.0;
  for (const auto& d : distinct) {
    if (d.size() >= 63) throw EnumerationOverflow("sequence too long to enumerate");
    total *= static_cast<double>((std::uint64_t{1} << d.size()) - 1);
  }
  if (total > static_cast<double>(enum_limit))
    throw EnumerationOverflow("enumeration needs " + format_double(total) +
                              " profiles, above the limit of " + std::to_string(enum_limit) +
                              "; use a smaller instance");

  std::vector<std::uint64_t> mask(distinct.size(), 1);
  std::vector<std::vector<TokenId>> chosen(distinct.size());
  cmp.best_alternative_norm = kInf;
  for (;;) {
    ++cmp.enumerated;
    std::set<TokenId> covered;
    for (std::size_t k = 0; k < distinct.size(); ++k) {
      chosen[k].clear();
      for (std::size_t b = 0; b < distinct[k].size(); ++b)
        if (mask[k] >> b & 1u) {
          chosen[k].push_back(distinct[k][b]);
          covered.insert(distinct[k][b]);
        }
    }
    const bool covers = std::all_of(targets.begin(), targets.end(),
                                    [&](TokenId s) { return covered.count(s) > 0; });
    if (covers && chosen != pure) {
      auto prof = make_profile(chosen);
      const auto problem = build_margin_problem(state, prof);
      if (!problem.all_select) {
        try {
          const double norm = solve_max_margin(problem, solver).norm();
          cmp.best_alternative_norm = std::min(cmp.best_alternative_norm, norm);
          cmp.alternatives.push_back({std::move(prof), norm});
        } catch (const InfeasibleError&) {
          ++cmp.infeasible;
        }
      }
    }
    std::size_t k = 0;
    for (; k < mask.size(); ++k) {
      if (++mask[k] < (std::uint64_t{1} << distinct[k].size())) break;
      mask[k] = 1;
    }
    if (k == mask.size()) break;
  }
  cmp.mu = 1.0 - cmp.pure_norm / cmp.best_alternative_norm;
  // Equal norms reached by different profiles differ only by rounding; they are not strict.
  cmp.pure_strictly_smallest = cmp.pure_norm < cmp.best_alternative_norm * (1.0 - 1e-9);
  cmp.norm_bound = 4.0 * static_cast<double>(data.size());
  cmp.within_norm_bound = cmp.pure_norm <= cmp.norm_bound;
  return cmp;
}

LocalOptimality local_optimality_check(const ModelState& state, const LabeledDataset& data,
                                       const Eigen::Ref<const Vector>& query, double tie_tol) {
  const auto profile = selection_profile(state, query, data, tie_tol);
  const Vector values = state.embeddings * state.readout;
  LocalOptimality out;
  out.mu = kInf;
  for (std::size_t k = 0; k < profile.sequences.size(); ++k) {
    const auto& sel = profile.sequences[k];
    const int y = data.examples[k].label;
    for (TokenId j : sel.secondary) {
      out.applicable = true;
      double sum = 0.0;
      for (TokenId i : sel.selected) sum += y * (values[i] - values[j]);
      out.mu = std::min(out.mu, sum);
    }
  }
  if (!out.applicable) out.mu = 0.0;
  out.pass = out.applicable && out.mu > 0.0;
  return out;
}

void write_solution_csv(const MarginProblem& problem, const MarginSolution& solution,
                        const Vocabulary& vocab, std::ostream& out) {
  out << "constraint_id,seq_id,s,s_prime,dual,active\n";
  for (std::size_t r = 0; r < problem.origins.size(); ++r) {
    const auto& o = problem.origins[r];
    for (std::size_t seq : o.sequences)
      out << r << ',' << seq << ',' << csv_field(vocab.name(o.selected)) << ','
          << csv_field(vocab.name(o.other)) << ',' << format_double(solution.duals[r]) << ','
          << (solution.active[r] ? 1 : 0) << '\n';
  }
}

std::string solution_summary_json(const MarginSolution& solution,
                                  std::optional<double> cosine_to_trajectory) {
  const auto active = std::count(solution.active.begin(), solution.active.end(), true);
  nlohmann::json j = {
      {"norm", solution.norm()},
      {"margin", solution.margin()},
      {"num_constraints", solution.duals.size()},
      {"num_active", active},
      {"sweeps", solution.sweeps},
      {"kkt",
       {{"stationarity", solution.kkt.stationarity},
        {"primal_violation", solution.kkt.primal_violation},
        {"complementarity", solution.kkt.complementarity},
        {"equality_violation", solution.kkt.equality_violation}}},
      {"cosine_to_trajectory", nullptr}};
  if (cosine_to_trajectory) j["cosine_to_trajectory"] = *cosine_to_trajectory;
  return j.dump();
}

}  // namespace tokensel
