// One PASS/FAIL line per acceptance criterion. Tolerances are pinned here and
// nowhere else; the process exits nonzero if any criterion fails.

#include <boost/math/distributions/chi_squared.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "support.hpp"
#include "tokensel/datagen.hpp"
#include "tokensel/maxmargin.hpp"
#include "tokensel/model.hpp"
#include "tokensel/training.hpp"
#include "tokensel/twolayer.hpp"

using namespace tokensel;
using namespace testsupport;

namespace {

constexpr double kGradTol = 1e-6;        // 1
constexpr double kFdStep = 1e-5;
constexpr double kDirGradTol = 1e-10;    // 2
constexpr double kPearsonMin = 0.99;     // 3
constexpr int kErrorBoundMinPass = 95;
constexpr double kQpTol = 1e-8;          // 6
constexpr double kZeroDriftTol = 1e-10;  // 7
constexpr double kSigmas = 3.0;          // 9
constexpr double kChiSquareMinP = 1e-3;
constexpr double kSpearmanV = 0.95;      // 10
constexpr double kSpearmanP = 0.8;
constexpr double kTwoLayerTol = 1e-5;    // 11
constexpr double kLnMeanTol = 1e-12;
constexpr double kLnVarTol = 1e-8;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 ------------------------------------------------------------------------
Outcome gradient_oracle() {
  Rng rng(101);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t vocab = 2 + rng.below(11), dim = 1 + rng.below(16);
    auto st = random_state(rng, vocab, dim);
    st.readout /= st.readout.norm();
    const auto data = random_dataset(rng, 1 + rng.below(6), 8, vocab);
    worst = std::max(worst, max_relative_error(grad_all(st, data), finite_diff_grad(st, data, kFdStep)));
  }
  return {worst <= kGradTol, fmt("100 instances, max relative error %.3g (tol %.0e)", worst, kGradTol)};
}

// 2 ------------------------------------------------------------------------
Outcome directional_identity() {
  Rng rng(202);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t vocab = 2 + rng.below(11), dim = 1 + rng.below(16);
    const auto st = random_state(rng, vocab, dim);
    const auto data = random_dataset(rng, 1 + rng.below(6), 8, vocab);
    Vector phat = gaussian(rng, static_cast<Eigen::Index>(dim), 1.0);
    phat /= phat.norm();
    const double ref = -phat.dot(grad_all(st, data).cls);
    const double got = directional_grad(st, data, phat);
    worst = std::max(worst, std::abs(got - ref) / (1.0 + std::abs(ref)));
  }
  return {worst <= kDirGradTol, fmt("100 pairs, max |diff|/(1+|value|) %.3g (tol %.0e)", worst, kDirGradTol)};
}

// Single-relevant-token instance with |S| = 16 used by criteria 3 and 4.
LabeledDataset sixteen_token_data(std::uint64_t seed) {
  AssumptionOneConfig cfg;
  cfg.num_relevant_pos = 2;
  cfg.num_relevant_neg = 2;
  cfg.num_irrelevant = 12;
  cfg.n = 8;
  cfg.length = 4;
  return sample_assumption_one(cfg, seed);
}

// 3 ------------------------------------------------------------------------
Outcome error_bound() {
  constexpr double eta0 = 1.0, delta = 0.05;
  constexpr std::size_t dim = 4096;
  int within = 0;
  double min_corr = 1.0, worst = 0.0;
  const double required = one_step_required_dim(16, delta);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto data = sixteen_token_data(seed);
    const auto one = stage_one_step(init_params(16, {dim, seed, delta}), data, eta0);
    within += one.max_residual() <= one.error_bound();
    worst = std::max(worst, one.max_residual());
    std::vector<double> c(one.alignment.data(), one.alignment.data() + one.alignment.size());
    min_corr = std::min(min_corr, pearson(c, one.alpha));
  }
  const bool ok = dim >= required && within >= kErrorBoundMinPass && min_corr >= kPearsonMin;
  return {ok, fmt("d=%zu (needs %.0f): %d/100 within 1.375 (worst %.3f), min Pearson %.4f (min %.2f)",
                  dim, required, within, worst, min_corr, kPearsonMin)};
}

// 4 ------------------------------------------------------------------------
Outcome error_scaling() {
  std::vector<double> medians;
  for (std::size_t dim : {256u, 1024u, 4096u, 16384u}) {
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto data = sixteen_token_data(seed);
      errs.push_back(stage_one_step(init_params(16, {dim, seed, 0.05}), data, 1.0).max_row_residual());
    }
    medians.push_back(median(errs));
  }
  bool ok = true;
  for (std::size_t i = 1; i < medians.size(); ++i) ok = ok && medians[i] < medians[i - 1];
  return {ok, fmt("medians %.4f > %.4f > %.4f > %.4f", medians[0], medians[1], medians[2], medians[3])};
}

// 5 ------------------------------------------------------------------------
Outcome flow_selection() {
  AssumptionOneConfig cfg;
  cfg.num_relevant_pos = 1;
  cfg.num_relevant_neg = 1;
  cfg.num_irrelevant = 8;
  cfg.n = 6;
  cfg.length = 4;
  FlowConfig flow;  // step 1, <= 1e6 steps, growth 10x
  LimitCheckOptions lim;
  lim.direction_tol = 1e-4;
  lim.cosine_threshold = 0.99;
  int a = 0, b = 0, c = 0, d = 0;
  double min_cos = 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto data = sample_assumption_one(cfg, seed);
    const auto one = stage_one_step(init_params(cfg.vocab_size(), {512, seed, 0.05}), data, 4.0);
    const auto traj = run_gradient_flow(one.after, data, flow);
    a += traj.snapshots.back().norm >= 10.0 * traj.snapshots.front().norm;
    const auto rep = verify_limit_is_maxmargin(traj, traj.final_state, data, lim);
    b += rep.converged;
    if (rep.converged)
      c += verify_theorem_selection(rep.profile, compute_stats(data)).pass;
    d += rep.pass;
    min_cos = std::min(min_cos, rep.cosine);
  }
  return {a == 10 && b == 10 && c == 10 && d == 10,
          fmt("10 seeds: (a) growth %d/10 (b) limit %d/10 (c) selection %d/10 (d) cosine>=0.99 %d/10, "
              "min cosine %.4f", a, b, c, d, min_cos)};
}

// 6 ------------------------------------------------------------------------
Outcome qp_solver() {
  Rng rng(606);
  int feasible = 0, agree = 0, infeasible_ok = 0, active_ok = 0, restart_ok = 0;
  double worst_gap = 0.0, worst_kkt = 0.0;
  for (int k = 0; k < 200; ++k) {
    const auto m = static_cast<Eigen::Index>(1 + rng.below(6));
    const auto d = static_cast<Eigen::Index>(1 + rng.below(4));
    MarginProblem prob;
    prob.rows.resize(m, d);
    for (Eigen::Index i = 0; i < m; ++i) prob.rows.row(i) = gaussian(rng, d, 1.0).transpose();
    prob.ties.resize(0, d);
    const auto oracle = brute_force_qp(prob.rows, prob.ties);
    if (!oracle) {
      try {
        solve_max_margin(prob);
      } catch (const InfeasibleError&) {
        ++infeasible_ok;
      }
      continue;
    }
    ++feasible;
    const auto sol = solve_max_margin(prob);
    const double gap = (sol.p_hat - *oracle).norm();
    worst_gap = std::max(worst_gap, gap);
    worst_kkt = std::max(worst_kkt, sol.kkt.max());
    agree += gap <= kQpTol && sol.kkt.max() <= kQpTol;
    active_ok += std::count(sol.active.begin(), sol.active.end(), true) >= 1;
    bool same = true;
    for (int r = 0; r < 20; ++r) {
      SolveOptions opt;
      Vector init(m);
      for (Eigen::Index i = 0; i < m; ++i) init[i] = 3.0 * rng.uniform();
      opt.initial_duals = init;
      same = same && (solve_max_margin(prob, opt).p_hat - sol.p_hat).norm() <= kQpTol;
    }
    restart_ok += same;
  }
  const int infeasible = 200 - feasible;
  const bool ok = agree == feasible && active_ok == feasible && restart_ok == feasible &&
                  infeasible_ok == infeasible;
  return {ok, fmt("%d feasible: oracle match %d (max gap %.2g), KKT max %.2g, active>=1 %d, "
                  "restarts agree %d; %d infeasible flagged %d/%d",
                  feasible, agree, worst_gap, worst_kkt, active_ok, restart_ok, infeasible,
                  infeasible_ok, infeasible)};
}

// 7 ------------------------------------------------------------------------
Outcome zero_drift() {
  Rng rng(707);
  double worst = 0.0;
  int applicable = 0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t vocab = 2 + rng.below(7), dim = vocab + rng.below(8);
    const auto st = random_state(rng, vocab, dim);
    const auto data = random_dataset(rng, 1 + rng.below(6), 6, vocab);
    const auto rep = zero_drift_check(st, data, kZeroDriftTol, 50, static_cast<std::uint64_t>(k));
    if (!rep.applicable) continue;
    ++applicable;
    worst = std::max(worst, rep.max_abs_drift);
  }
  return {applicable == 20 && worst <= kZeroDriftTol,
          fmt("%d/20 instances with d >= |S|, 50 points each, max |drift| %.3g (tol %.0e)",
              applicable, worst, kZeroDriftTol)};
}

// 8 ------------------------------------------------------------------------
Outcome pure_profile() {
  struct Toy {
    std::size_t pos, neg, irr, n, len;
  };
  int strict = 0, bounded = 0, total = 0;
  std::string worst;
  double worst_ratio = 0.0;
  for (const Toy& t : {Toy{1, 1, 1, 4, 2}, Toy{1, 1, 2, 4, 3}, Toy{2, 2, 2, 4, 2},
                       Toy{1, 1, 3, 6, 2}, Toy{3, 3, 3, 6, 2}}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      AssumptionOneConfig cfg{t.pos, t.neg, t.irr, t.n, t.len};
      const auto data = sample_assumption_one(cfg, seed);
      const auto vocab = cfg.vocab_size();
      ModelState st;  // each token its own basis vector
      st.embeddings = Matrix::Identity(static_cast<Eigen::Index>(vocab), static_cast<Eigen::Index>(vocab));
      st.cls = Vector::Zero(static_cast<Eigen::Index>(vocab));
      st.readout = Vector::Unit(static_cast<Eigen::Index>(vocab), 0);
      const auto cmp = compare_selections(st, data);
      ++total;
      strict += cmp.pure_strictly_smallest;
      bounded += cmp.within_norm_bound;
      const double ratio = cmp.pure_norm / cmp.best_alternative_norm;
      if (ratio > worst_ratio) {
        worst_ratio = ratio;
        worst = fmt("%zu/%zu/%zu n=%zu T=%zu seed %llu: pure %.4f vs best alternative %.4f", t.pos,
                    t.neg, t.irr, t.n, t.len, static_cast<unsigned long long>(seed), cmp.pure_norm,
                    cmp.best_alternative_norm);
      }
    }
  }
  return {strict == total && bounded == total,
          fmt("pure strictly smallest %d/%d, |p_hat| <= 4n %d/%d; worst %s", strict, total,
              bounded, total, worst.c_str())};
}

// 9 ------------------------------------------------------------------------
Outcome sampler_fidelity() {
  const auto cfg = KLevelConfig::paper_defaults();
  const std::size_t n = 4000;  // 4000 x 256 = 1.02e6 tokens
  const auto data = sample_klevel(cfg, n, 909);
  const auto vocab = cfg.vocab_size();

  // Posterior per token class (level, sign). Tokens of one sequence share its
  // label, so the standard error is the ratio-estimator one with sequences as clusters.
  std::map<std::pair<int, int>, std::vector<std::pair<double, double>>> per_class;  // (a_i, b_i)
  std::vector<std::vector<double>> counts(2, std::vector<double>(vocab, 0.0));
  for (const auto& ex : data.examples) {
    std::map<std::pair<int, int>, double> here;
    for (TokenId t : ex.tokens) {
      const auto c = cfg.class_of(t);
      here[{c.level, c.sign}] += 1.0;
      counts[ex.label > 0 ? 0 : 1][t] += 1.0;
    }
    for (const auto& [key, b] : here) per_class[key].push_back({ex.label > 0 ? b : 0.0, b});
  }
  const double prior = cfg.label_prior;
  double worst_z = 0.0;
  for (const auto& [key, cells] : per_class) {
    double sa = 0, sb = 0;
    for (auto [a, b] : cells) sa += a, sb += b;
    const double p_hat = sa / sb;
    double var = 0;
    for (auto [a, b] : cells) var += (a - p_hat * b) * (a - p_hat * b);
    const double se = std::sqrt(var) / sb;
    // Independent evaluation of the posterior from the generative law.
    double expected = 0.5;
    if (key.first > 0) {
      const double dk = cfg.deltas[static_cast<std::size_t>(key.first - 1)];
      const double like_pos = key.second > 0 ? 1 - dk : dk;
      expected = prior * like_pos / (prior * like_pos + (1 - prior) * (1 - like_pos));
    }
    worst_z = std::max(worst_z, std::abs(p_hat - expected) / se);
  }

  // Chi-square on per-label token counts against p(s|y); cells with expected
  // count below 5 are pooled within their token class.
  double chi2 = 0.0;
  std::size_t cells = 0;
  for (int li = 0; li < 2; ++li) {
    const int label = li == 0 ? 1 : -1;
    const auto probs = cfg.token_probabilities(label);
    const double total = std::accumulate(counts[li].begin(), counts[li].end(), 0.0);
    std::map<std::pair<int, int>, std::pair<double, double>> pooled;
    for (std::size_t s = 0; s < vocab; ++s) {
      const double e = total * probs[s];
      if (e >= 5.0) {
        chi2 += (counts[li][s] - e) * (counts[li][s] - e) / e;
        ++cells;
      } else {
        const auto c = cfg.class_of(static_cast<TokenId>(s));
        pooled[{c.level, c.sign}].first += counts[li][s];
        pooled[{c.level, c.sign}].second += e;
      }
    }
    for (const auto& [key, oe] : pooled) {
      chi2 += (oe.first - oe.second) * (oe.first - oe.second) / oe.second;
      ++cells;
    }
  }
  const double dof = static_cast<double>(cells - 2);
  const double p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(dof), chi2));
  return {worst_z <= kSigmas && p_value > kChiSquareMinP,
          fmt("%zu tokens: worst class posterior |z| %.2f (max %.0f), chi-square %.1f on %.0f dof, "
              "p=%.3g (min %.0e)", data.total_tokens(), worst_z, kSigmas, chi2, dof, p_value,
              kChiSquareMinP)};
}

// 10 -----------------------------------------------------------------------
Outcome dot_product_trend() {
  // Desk scaling of the default K-level setup: same K, level probabilities and
  // irrelevant mass; 8 tokens per level and sign, 128 irrelevant tokens.
  KLevelConfig cfg = KLevelConfig::paper_defaults();
  cfg.sizes_pos.assign(8, 8);
  cfg.sizes_neg.assign(8, 8);
  cfg.size_irrelevant = 128;
  cfg.length = 64;
  const auto data = sample_klevel(cfg, 2000, 1010);
  const auto stats = compute_stats(data);
  const auto st = init_params(cfg.vocab_size(), {256, 1010, 0.05});
  const auto res = train_full(st, data, OptimizerConfig::paper_synthetic(), 1010);
  const Vector dot_v = res.state.embeddings * res.state.readout;
  const Vector dot_p = res.state.embeddings * res.state.cls;
  std::vector<double> v, p, pd, apd;
  for (std::size_t s = 0; s < cfg.vocab_size(); ++s) {
    const auto& t = stats.tokens[s];
    if (cfg.class_of(static_cast<TokenId>(s)).level == 0 || t.count_pos + t.count_neg == 0) continue;
    v.push_back(dot_v[static_cast<Eigen::Index>(s)]);
    p.push_back(dot_p[static_cast<Eigen::Index>(s)]);
    pd.push_back(t.posterior_diff);
    apd.push_back(std::abs(t.posterior_diff));
  }
  const double rv = spearman(v, pd), rp = spearman(p, apd);
  return {rv >= kSpearmanV && rp >= kSpearmanP,
          fmt("%zu relevant tokens, loss %.3f -> %.3f: Spearman(<E,v>, pdiff) %.4f (min %.2f), "
              "Spearman(<E,p>, |pdiff|) %.4f (min %.1f)", v.size(), res.epochs.front().loss,
              res.epochs.back().loss, rv, kSpearmanV, rp, kSpearmanP)};
}

// 11 -----------------------------------------------------------------------
Outcome two_layer() {
  Rng rng(1111);
  double worst_fd = 0.0, worst_mean = 0.0, worst_var = 0.0;
  bool perm_exact = true;
  for (int k = 0; k < 50; ++k) {
    const std::size_t vocab = 2 + rng.below(7), dim = 2 + rng.below(7);
    auto base = random_state(rng, vocab, dim);
    const auto data = random_dataset(rng, 1 + rng.below(4), 6, vocab);
    auto st = TwoLayerState::from_base(base);
    for (Eigen::Index i = 0; i < st.ln_gain.size(); ++i) {
      st.ln_gain[i] = 1.0 + 0.3 * rng.normal();
      st.ln_bias[i] = 0.3 * rng.normal();
    }
    worst_fd = std::max(worst_fd, max_relative_error(two_layer_grads(st, data),
                                                     two_layer_finite_diff(st, data, 1e-5)));

    // Unit gain, zero bias: normalized rows against an independent recomputation.
    const auto plain = TwoLayerState::from_base(base);
    for (const auto& ex : data.examples) {
      const auto fw = two_layer_forward(plain, ex.tokens, ex.label);
      const auto T = static_cast<Eigen::Index>(ex.tokens.size());
      Matrix x(T, base.dim());
      for (Eigen::Index i = 0; i < T; ++i) x.row(i) = base.embeddings.row(ex.tokens[i]);
      for (Eigen::Index i = 0; i < T; ++i) {
        Vector s = x * x.row(i).transpose();
        s = (s.array() - s.maxCoeff()).exp();
        const Vector h = x.transpose() * (s / s.sum()) + x.row(i).transpose();
        const double var_h = (h.array() - h.mean()).square().mean();
        const Vector row = fw.rows.row(i).transpose();
        const double var = (row.array() - row.mean()).square().mean();
        worst_mean = std::max(worst_mean, std::abs(row.mean()));
        worst_var = std::max(worst_var, std::abs(var - var_h / (var_h + plain.ln_eps)));
      }
      std::vector<TokenId> shuffled = ex.tokens;
      rng.shuffle(shuffled.begin(), shuffled.end());
      perm_exact = perm_exact &&
                   two_layer_forward(st, shuffled, ex.label).head.output ==
                       two_layer_forward(st, ex.tokens, ex.label).head.output;
    }
  }
  return {worst_fd <= kTwoLayerTol && worst_mean <= kLnMeanTol && worst_var <= kLnVarTol && perm_exact,
          fmt("50 instances: FD relative error %.3g (tol %.0e), LN |mean| %.2g (tol %.0e), "
              "variance gap %.2g (tol %.0e), permutation invariance %s",
              worst_fd, kTwoLayerTol, worst_mean, kLnMeanTol, worst_var, kLnVarTol,
              perm_exact ? "exact" : "broken")};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double max_seconds;  // 0 when the criterion states no runtime bound
  };
  const std::vector<Criterion> criteria = {
      {"gradient oracle agreement", gradient_oracle, 10},
      {"directional-gradient identity", directional_identity, 0},
      {"one-step error bound", error_bound, 60},
      {"error-scaling trend", error_scaling, 0},
      {"gradient-flow selection at desk scale", flow_selection, 600},
      {"max-margin QP solver", qp_solver, 0},
      {"zero drift of the all-select direction", zero_drift, 0},
      {"pure-relevant profile has the smallest norm", pure_profile, 0},
      {"K-level sampler fidelity", sampler_fidelity, 0},
      {"trained dot products track posterior difference", dot_product_trend, 1800},
      {"two-layer gradient check", two_layer, 0},
  };
  // Optional argument: run a single criterion by number.
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<int>(i + 1) != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (criteria[i].max_seconds > 0 && secs > criteria[i].max_seconds) {
      out.pass = false;
      out.detail += fmt(" (over the %.0fs budget)", criteria[i].max_seconds);
    }
    std::printf("%s %2zu %s: %s [%.1fs]\n", out.pass ? "PASS" : "FAIL", i + 1, criteria[i].name,
                out.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !out.pass;
  }
  return failed == 0 ? 0 : 1;
}
