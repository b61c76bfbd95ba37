// tokensel: generate data, export token statistics, train, and run the
// verification battery. Exit codes: 0 ok, 1 verification failure,
// 2 usage/config, 3 I/O, 4 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include "tokensel/config.hpp"
#include "tokensel/datagen.hpp"
#include "tokensel/export.hpp"
#include "tokensel/io.hpp"
#include "tokensel/maxmargin.hpp"
#include "tokensel/model.hpp"
#include "tokensel/training.hpp"
#include "tokensel/twolayer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tokensel;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kIo = 3, kNumerical = 4 };

// Every section of a config file is parsed by every command, so a typo fails
// the same way no matter which command reads the file.
struct Settings {
  InitConfig init;
  double eta0 = 4.0;
  std::optional<KLevelConfig> klevel;
  AssumptionOneConfig a1;
  FlowConfig flow;
  OptimizerConfig opt;
  LimitCheckOptions limit;
  std::size_t enum_limit = 10'000;
  double zero_drift_tol = 1e-10;
  double q_tau = 1.0;
};

struct Presets {
  bool klevel_paper = false;
  bool paper_synthetic = false;
  bool paper_real = false;
};

Settings load_settings(const std::string& config_path, const Presets& presets) {
  KeyValueConfig kv;
  if (!config_path.empty()) {
    try {
      kv = KeyValueConfig::load(config_path);
    } catch (const ParseError& e) {
      throw ConfigError(config_path + ": " + e.what());
    }
  }
  Settings s;
  if (presets.paper_synthetic) s.opt = OptimizerConfig::paper_synthetic();
  if (presets.paper_real) s.opt = OptimizerConfig::paper_real();
  if (presets.paper_synthetic || presets.paper_real) s.init.dim = 2048;

  s.init = init_config_from(kv, s.init);
  s.eta0 = kv.get_double("stage1.eta0", s.eta0);
  if (!(s.eta0 > 0)) throw ConfigError("stage1.eta0 must be positive");
  if (presets.klevel_paper || kv.has("klevel.sizes") || kv.has("klevel.sizes_pos"))
    s.klevel = klevel_config_from(
        kv, presets.klevel_paper ? KLevelConfig::paper_defaults() : KLevelConfig{});
  else
    klevel_config_from(kv, KLevelConfig::paper_defaults());  // still validates stray keys
  s.a1 = assumption_one_from(kv, s.a1);
  s.flow = flow_config_from(kv, s.flow);
  s.opt = optimizer_config_from(kv, s.opt);
  s.limit.tie_tol = kv.get_double("verify.tie_tol", s.limit.tie_tol);
  s.limit.cosine_threshold = kv.get_double("verify.cosine_threshold", s.limit.cosine_threshold);
  s.limit.direction_tol = kv.get_double("verify.direction_tol", s.limit.direction_tol);
  s.limit.window = kv.get_uint("verify.window", s.limit.window);
  s.enum_limit = kv.get_uint("verify.enum_limit", s.enum_limit);
  s.zero_drift_tol = kv.get_double("verify.zero_drift_tol", s.zero_drift_tol);
  s.q_tau = kv.get_double("verify.q_tau", s.q_tau);
  kv.reject_unused();
  return s;
}

void print_summary(const LabeledDataset& data, std::ostream& out) {
  std::size_t pos = 0;
  for (const auto& ex : data.examples) pos += ex.label == 1;
  out << "n=" << data.size() << " (+1: " << pos << ", -1: " << data.size() - pos << ")"
      << " T=[" << data.min_length() << ", " << data.max_length() << "]"
      << " |S|=" << data.vocab.size << '\n';
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string model = "klevel";
  bool paper_defaults = false;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n, length, rel_pos, rel_neg, irrelevant;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  const Settings s = load_settings(a.config, {.klevel_paper = a.paper_defaults});
  LabeledDataset data;
  if (a.model == "klevel") {
    if (!s.klevel)
      throw ConfigError("K-level sizes missing: pass --paper-defaults or set klevel.sizes");
    KLevelConfig cfg = *s.klevel;
    if (a.length) cfg.length = *a.length;
    cfg.validate();
    data = sample_klevel(cfg, a.n.value_or(2000), *a.seed);
  } else {
    AssumptionOneConfig cfg = s.a1;
    if (a.n) cfg.n = *a.n;
    if (a.length) cfg.length = *a.length;
    if (a.rel_pos) cfg.num_relevant_pos = *a.rel_pos;
    if (a.rel_neg) cfg.num_relevant_neg = *a.rel_neg;
    if (a.irrelevant) cfg.num_irrelevant = *a.irrelevant;
    cfg.validate();
    data = sample_assumption_one(cfg, *a.seed);
  }
  write_corpus(data, fs::path(a.out));
  print_summary(data, std::cout);
  return kOk;
}

// ---------------------------------------------------------------------------
// stats

int cmd_stats(const std::string& corpus, std::size_t min_count, const std::string& out) {
  const auto data = load_corpus(corpus, min_count);
  const auto stats = compute_stats(data);
  auto file = open_output(out);
  write_stats_csv(stats, data.vocab, file);
  print_summary(data, std::cout);
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string corpus;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode = "two-stage";
  bool paper_synthetic = false;
  bool paper_real = false;
  std::optional<std::size_t> dim, epochs, max_steps;
  std::optional<double> eta0;
  std::size_t min_count = 0;
  std::string state_in;
  bool no_flow = false;
  bool freeze_layernorm = false;
  std::string out_dir;
};

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_output(path);
  out << text << '\n';
}

int cmd_train(const TrainArgs& a) {
  Settings s = load_settings(a.config, {.paper_synthetic = a.paper_synthetic,
                                        .paper_real = a.paper_real});
  if (a.dim) s.init.dim = *a.dim;
  if (a.eta0) s.eta0 = *a.eta0;
  if (a.epochs) s.opt.epochs = *a.epochs;
  if (a.max_steps) s.flow.max_steps = *a.max_steps;
  s.init.seed = *a.seed;
  s.flow.validate();
  s.opt.validate();

  const auto data = load_corpus(a.corpus, a.min_count);
  const auto stats = compute_stats(data);
  ModelState state;
  if (!a.state_in.empty()) {
    auto in = open_input(a.state_in);
    state = state_from_json(in);
    if (static_cast<std::size_t>(state.vocab_size()) != data.vocab.size)
      throw InputError("initial state vocabulary does not match the corpus");
  } else {
    state = init_params(data.vocab.size, s.init);
  }
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  write_text(dir / "state_init.json", state_to_json(state));

  if (a.mode == "two-stage") {
    const auto one = stage_one_step(state, data, s.eta0);
    state = one.after;
    if (!a.no_flow) {
      Trajectory traj;
      int code = kOk;
      try {
        traj = run_gradient_flow(state, data, s.flow);
      } catch (const FlowStall& e) {
        std::cerr << "error: " << e.what() << '\n';
        traj = e.partial;
        code = kNumerical;
      }
      auto out = open_output(dir / "trajectory.jsonl");
      write_trajectory_jsonl(traj, out);
      state = traj.final_state;
      std::cout << "flow: " << traj.snapshots.size() << " snapshots, stop=" << traj.stop_reason
                << ", |p| " << traj.snapshots.front().norm << " -> " << traj.snapshots.back().norm
                << '\n';
      if (code != kOk) return code;
    }
  } else if (a.mode == "full") {
    const auto res = train_full(state, data, s.opt, *a.seed);
    state = res.state;
    auto out = open_output(dir / "epochs.jsonl");
    write_epochs_jsonl(res.epochs, out);
    std::cout << "full: " << s.opt.epochs << " epochs, loss " << res.epochs.front().loss << " -> "
              << res.epochs.back().loss << '\n';
  } else {
    auto two = TwoLayerState::from_base(state);
    const auto res = train_two_layer(two, data, s.opt, *a.seed, !a.freeze_layernorm);
    state = res.state.base;
    auto out = open_output(dir / "epochs.jsonl");
    for (std::size_t e = 0; e < res.losses.size(); ++e)
      out << json{{"epoch", e}, {"loss", res.losses[e]}, {"lr", s.opt.lr_at(e)}}.dump() << '\n';
    json ln{{"ln_gain", std::vector<double>(res.state.ln_gain.data(),
                                            res.state.ln_gain.data() + res.state.ln_gain.size())},
            {"ln_bias", std::vector<double>(res.state.ln_bias.data(),
                                            res.state.ln_bias.data() + res.state.ln_bias.size())},
            {"ln_eps", res.state.ln_eps}};
    write_text(dir / "layernorm.json", ln.dump());
    std::cout << "two-layer: " << s.opt.epochs << " epochs, loss " << res.losses.front() << " -> "
              << res.losses.back() << '\n';
  }
  write_text(dir / "state.json", state_to_json(state));
  auto fig = open_output(dir / "figure.csv");
  write_figure_csv(state, stats, data.vocab, fig);
  return kOk;
}

// ---------------------------------------------------------------------------
// verify

struct Check {
  std::string name;
  std::string status;  // PASS, FAIL, SKIP, INFO
  bool hard = true;
  json values = json::object();
};

class Battery {
 public:
  void add(Check c) { checks_.push_back(std::move(c)); }

  bool failed() const {
    for (const auto& c : checks_)
      if (c.hard && c.status == "FAIL") return true;
    return false;
  }

  void print(bool as_json) const {
    for (const auto& c : checks_) {
      if (as_json) {
        // Values go first so they cannot shadow the bookkeeping keys.
        json j = c.values;
        j.update(json{{"check", c.name}, {"status", c.status}, {"hard", c.hard}});
        std::cout << j.dump() << '\n';
      } else {
        std::printf("%-26s %-4s %s\n", c.name.c_str(), c.status.c_str(), c.values.dump().c_str());
      }
    }
  }

 private:
  std::vector<Check> checks_;
};

const char* verdict(bool ok) { return ok ? "PASS" : "FAIL"; }

// JSON has no infinity; unbounded quantities are written as null.
json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

struct VerifyArgs {
  std::string corpus;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> dim, max_steps;
  std::optional<double> eta0;
  bool as_json = false;
};

int cmd_verify(const VerifyArgs& a) {
  Settings s = load_settings(a.config, {});
  if (a.dim) s.init.dim = *a.dim;
  if (a.eta0) s.eta0 = *a.eta0;
  if (a.max_steps) s.flow.max_steps = *a.max_steps;
  s.init.seed = *a.seed;
  s.flow.validate();

  const auto data = load_corpus(a.corpus);
  const auto stats = compute_stats(data);
  Battery bat;

  const auto a1 = verify_assumption_one(data);
  bat.add({"assumption_one", verdict(a1.pass), false,
           {{"offending_sequences", a1.offenses.size()}}});

  const auto state0 = init_params(data.vocab.size, s.init);
  const auto init = check_init_concentration(state0, s.init.delta);
  {
    Check c{"init_concentration", verdict(init.pass()), init.precondition_met};
    if (!init.precondition_met) c.status = "INFO";
    c.values = {{"overlap_bound", init.overlap_bound},
                {"max_pair_overlap", init.max_pair_overlap},
                {"max_norm", init.max_norm},
                {"min_row_norm", init.min_row_norm},
                {"required_dim", init.required_dim},
                {"dim", s.init.dim},
                {"precondition_met", init.precondition_met}};
    bat.add(std::move(c));
  }

  const auto one = stage_one_step(state0, data, s.eta0);
  if (init.precondition_met) {
    bat.add({"stage1_error_bound", verdict(one.max_residual() <= one.error_bound()), true,
             {{"max_residual", one.max_residual()}, {"bound", one.error_bound()}}});
  } else {
    bat.add({"stage1_error_bound", "SKIP", true,
             {{"reason", "dimension below the one-step precondition"},
              {"required_dim", init.required_dim}}});
  }

  if (init.pass()) {
    const auto bd = check_boundedness(one);
    bat.add({"boundedness", verdict(bd.pass()), true,
             {{"max_row_norm", bd.max_row_norm}, {"row_bound", bd.row_bound},
              {"cls_norm", bd.cls_norm}, {"cls_bound", bd.cls_bound}}});
  } else {
    bat.add({"boundedness", "SKIP", true, {{"reason", "initialization concentration failed"}}});
  }

  {
    const auto lb = stage1_loss_bound(one, data);
    bat.add({"stage1_loss_bound", "INFO", false, {{"loss", lb.actual}, {"bound", lb.bound}}});
  }

  {
    std::size_t violations = 0;
    for (const auto& ex : data.examples)
      violations += !verify_q_bounds(one.after, ex.tokens, s.q_tau).all_hold();
    bat.add({"q_bounds", verdict(violations == 0), true,
             {{"sequences", data.size()}, {"violations", violations}, {"tau", s.q_tau}}});
  }

  {
    const auto zd = zero_drift_check(one.after, data, s.zero_drift_tol, 50, *a.seed);
    Check c{"zero_drift", zd.applicable ? verdict(zd.pass) : "SKIP", true};
    if (zd.applicable)
      c.values = {{"max_abs_drift", zd.max_abs_drift}, {"tol", s.zero_drift_tol}};
    else
      c.values = {{"reason", zd.reason}};
    bat.add(std::move(c));
  }

  if (!a1.pass) {
    for (const char* name : {"flow_norm_growth", "theorem_selection", "limit_is_maxmargin",
                             "pure_profile_smallest", "maxmargin_norm_bound"})
      bat.add({name, "SKIP", true, {{"reason", "dataset violates the single relevant token assumption"}}});
    bat.print(a.as_json);
    return bat.failed() ? kVerifyFailed : kOk;
  }

  Trajectory traj;
  try {
    traj = run_gradient_flow(one.after, data, s.flow);
  } catch (const FlowStall& e) {
    bat.add({"flow_norm_growth", "FAIL", true, {{"reason", e.what()}}});
    bat.print(a.as_json);
    return kNumerical;
  }
  const double growth = traj.snapshots.back().norm / traj.snapshots.front().norm;
  bat.add({"flow_norm_growth", verdict(growth >= s.flow.min_norm_growth), true,
           {{"growth", growth}, {"steps", traj.snapshots.back().step},
            {"stop_reason", traj.stop_reason}}});

  const Vector p_final = traj.final_state.cls;
  const auto profile = selection_profile(traj.final_state, p_final, data, s.limit.tie_tol);
  const auto sel = verify_theorem_selection(profile, stats);
  bat.add({"theorem_selection", verdict(sel.pass), true, {{"missing", sel.missing}}});

  const auto limit = verify_limit_is_maxmargin(traj, traj.final_state, data, s.limit);
  {
    Check c{"limit_is_maxmargin", limit.converged ? verdict(limit.pass) : "FAIL", true};
    c.values = {{"limit", limit.status}, {"cosine", limit.cosine},
                {"threshold", s.limit.cosine_threshold}};
    if (limit.solution) c.values["solution"] = json::parse(solution_summary_json(*limit.solution, limit.cosine));
    bat.add(std::move(c));
  }

  const auto lo = local_optimality_check(traj.final_state, data, p_final, s.limit.tie_tol);
  bat.add({"local_optimality", lo.applicable ? "INFO" : "SKIP", false,
           {{"mu", lo.mu}, {"positive", lo.pass}}});

  // The norm bound needs only the pure profile, so it runs even when enumeration would not.
  const double pure_norm =
      solve_max_margin(build_margin_problem(one.after, pure_relevant_profile(data))).norm();
  const double norm_bound = 4.0 * static_cast<double>(data.size());
  try {
    const auto cmp = compare_selections(one.after, data, s.enum_limit);
    // A sufficient condition for selecting only the relevant tokens, so a miss is
    // reported but does not fail the battery.
    bat.add({"pure_profile_smallest", verdict(cmp.pure_strictly_smallest), false,
             {{"pure_norm", cmp.pure_norm}, {"best_alternative_norm", finite_or_null(cmp.best_alternative_norm)},
              {"mu", finite_or_null(cmp.mu)}, {"alternatives", cmp.alternatives.size()},
              {"infeasible", cmp.infeasible}}});
  } catch (const EnumerationOverflow& e) {
    bat.add({"pure_profile_smallest", "SKIP", false, {{"reason", e.what()}}});
  }
  bat.add({"maxmargin_norm_bound", verdict(pure_norm <= norm_bound), true,
           {{"pure_norm", pure_norm}, {"bound", norm_bound}}});

  bat.print(a.as_json);
  return bat.failed() ? kVerifyFailed : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token selection in one-layer softmax attention: data, training, verification"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "sample a synthetic corpus");
  g->add_option("--model", gen.model)->check(CLI::IsMember({"klevel", "assumption1"}));
  g->add_flag("--paper-defaults", gen.paper_defaults, "K-level sizes and probabilities of the paper");
  g->add_option("--config", gen.config);
  g->add_option("--seed", gen.seed)->required();
  g->add_option("--n", gen.n);
  g->add_option("--t", gen.length, "sequence length");
  g->add_option("--relevant-pos", gen.rel_pos);
  g->add_option("--relevant-neg", gen.rel_neg);
  g->add_option("--irrelevant", gen.irrelevant);
  g->add_option("--out", gen.out)->required();

  std::string stats_corpus, stats_out;
  std::size_t stats_min = 0;
  auto* st = app.add_subcommand("stats", "token statistics as CSV");
  st->add_option("--corpus", stats_corpus)->required();
  st->add_option("--min-count", stats_min, "purge tokens seen fewer times");
  st->add_option("--out", stats_out)->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "stage one + gradient flow, or full training");
  t->add_option("--corpus", train.corpus)->required();
  t->add_option("--config", train.config);
  t->add_option("--seed", train.seed)->required();
  t->add_option("--mode", train.mode)->check(CLI::IsMember({"two-stage", "full", "two-layer"}));
  auto* syn = t->add_flag("--paper-synthetic-defaults", train.paper_synthetic);
  t->add_flag("--paper-real-defaults", train.paper_real)->excludes(syn);
  t->add_option("--dim", train.dim);
  t->add_option("--eta0", train.eta0);
  t->add_option("--epochs", train.epochs);
  t->add_option("--max-steps", train.max_steps, "gradient flow step cap");
  t->add_option("--min-count", train.min_count);
  t->add_option("--state-in", train.state_in, "start from a saved state.json");
  t->add_flag("--no-flow", train.no_flow, "stop after the single full-batch step");
  t->add_flag("--freeze-layernorm", train.freeze_layernorm);
  t->add_option("--out-dir", train.out_dir)->required();

  VerifyArgs verify;
  auto* v = app.add_subcommand("verify", "run the verification battery on a corpus");
  v->add_option("--corpus", verify.corpus)->required();
  v->add_option("--config", verify.config);
  v->add_option("--seed", verify.seed)->required();
  v->add_option("--dim", verify.dim);
  v->add_option("--eta0", verify.eta0);
  v->add_option("--max-steps", verify.max_steps);
  v->add_flag("--json", verify.as_json, "one JSON object per check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*st) return cmd_stats(stats_corpus, stats_min, stats_out);
    if (*t) return cmd_train(train);
    if (*v) return cmd_verify(verify);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kIo;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  }
  return kUsage;
}
