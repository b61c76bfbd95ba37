#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tokensel/datagen.hpp"
#include "tokensel/maxmargin.hpp"
#include "tokensel/model.hpp"
#include "tokensel/training.hpp"
#include "tokensel/twolayer.hpp"

namespace py = pybind11;
using namespace tokensel;

PYBIND11_MODULE(_core, m) {
  m.doc() = "one-layer softmax attention: gradients, training and max-margin token selection";

  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<InfeasibleError>(m, "InfeasibleError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);

  py::class_<Example>(m, "Example")
      .def(py::init([](std::vector<TokenId> tokens, int label) { return Example{std::move(tokens), label}; }),
           py::arg("tokens"), py::arg("label"))
      .def_readwrite("tokens", &Example::tokens)
      .def_readwrite("label", &Example::label);

  py::class_<LabeledDataset>(m, "LabeledDataset")
      .def(py::init([](std::vector<Example> examples, std::size_t vocab_size) {
             LabeledDataset d;
             d.examples = std::move(examples);
             d.vocab.size = vocab_size;
             d.validate();
             return d;
           }),
           py::arg("examples"), py::arg("vocab_size"))
      .def_readonly("examples", &LabeledDataset::examples)
      .def_property_readonly("vocab_size", [](const LabeledDataset& d) { return d.vocab.size; })
      .def("__len__", &LabeledDataset::size);

  py::class_<ModelState>(m, "ModelState")
      .def(py::init([](Matrix e, Vector p, Vector v) {
             ModelState s{std::move(e), std::move(p), std::move(v)};
             s.validate();
             return s;
           }),
           py::arg("embeddings"), py::arg("cls"), py::arg("readout"))
      .def_readwrite("embeddings", &ModelState::embeddings)
      .def_readwrite("cls", &ModelState::cls)
      .def_readwrite("readout", &ModelState::readout);

  py::class_<AttentionBreakdown>(m, "AttentionBreakdown")
      .def_readonly("scores", &AttentionBreakdown::scores)
      .def_readonly("weights", &AttentionBreakdown::weights)
      .def_readonly("gammas", &AttentionBreakdown::gammas)
      .def_readonly("output", &AttentionBreakdown::output)
      .def_readonly("sigmoid_factor", &AttentionBreakdown::sigmoid_factor);

  py::class_<GradientTable>(m, "GradientTable")
      .def_readonly("embeddings", &GradientTable::embeddings)
      .def_readonly("cls", &GradientTable::cls);

  m.def("attention_forward",
        [](const ModelState& s, std::vector<TokenId> tokens, int label) {
          return attention_forward(s, tokens, label);
        });
  m.def("dataset_loss", &dataset_loss);
  m.def("grad_all", &grad_all);
  m.def("finite_diff_grad", &finite_diff_grad, py::arg("state"), py::arg("data"),
        py::arg("step") = 1e-5);
  m.def("directional_grad", [](const ModelState& s, const LabeledDataset& d, const Vector& dir) {
    return directional_grad(s, d, dir);
  });

  py::class_<KLevelConfig>(m, "KLevelConfig")
      .def(py::init<>())
      .def_static("paper_defaults", &KLevelConfig::paper_defaults)
      .def_readwrite("sizes_pos", &KLevelConfig::sizes_pos)
      .def_readwrite("sizes_neg", &KLevelConfig::sizes_neg)
      .def_readwrite("size_irrelevant", &KLevelConfig::size_irrelevant)
      .def_readwrite("delta_tilde", &KLevelConfig::delta_tilde)
      .def_readwrite("deltas", &KLevelConfig::deltas)
      .def_readwrite("length", &KLevelConfig::length)
      .def_readwrite("label_prior", &KLevelConfig::label_prior)
      .def("vocab_size", &KLevelConfig::vocab_size)
      .def("token_probabilities", &KLevelConfig::token_probabilities);

  py::class_<AssumptionOneConfig>(m, "AssumptionOneConfig")
      .def(py::init<>())
      .def_readwrite("num_relevant_pos", &AssumptionOneConfig::num_relevant_pos)
      .def_readwrite("num_relevant_neg", &AssumptionOneConfig::num_relevant_neg)
      .def_readwrite("num_irrelevant", &AssumptionOneConfig::num_irrelevant)
      .def_readwrite("n", &AssumptionOneConfig::n)
      .def_readwrite("length", &AssumptionOneConfig::length);

  m.def("sample_klevel", &sample_klevel, py::arg("config"), py::arg("n"), py::arg("seed"));
  m.def("sample_assumption_one", &sample_assumption_one, py::arg("config"), py::arg("seed"));

  py::class_<TokenStat>(m, "TokenStat")
      .def_readonly("count_pos", &TokenStat::count_pos)
      .def_readonly("count_neg", &TokenStat::count_neg)
      .def_readonly("alpha", &TokenStat::alpha)
      .def_readonly("posterior_diff", &TokenStat::posterior_diff)
      .def_property_readonly("category", [](const TokenStat& t) { return to_string(t.category); });
  m.def("compute_stats", [](const LabeledDataset& d) { return compute_stats(d).tokens; });

  m.def("init_params",
        [](std::size_t vocab, std::size_t dim, std::uint64_t seed) {
          return init_params(vocab, InitConfig{dim, seed, 0.05});
        },
        py::arg("vocab_size"), py::arg("dim"), py::arg("seed"));

  py::class_<StageOneResult>(m, "StageOneResult")
      .def_readonly("before", &StageOneResult::before)
      .def_readonly("after", &StageOneResult::after)
      .def_readonly("alignment", &StageOneResult::alignment)
      .def("max_residual", &StageOneResult::max_residual)
      .def("error_bound", &StageOneResult::error_bound);
  m.def("stage_one_step", &stage_one_step, py::arg("state"), py::arg("data"), py::arg("eta0"));

  py::class_<Trajectory>(m, "Trajectory")
      .def_readonly("final_state", &Trajectory::final_state)
      .def_readonly("stop_reason", &Trajectory::stop_reason)
      .def_property_readonly("norms", [](const Trajectory& t) {
        std::vector<double> out;
        for (const auto& s : t.snapshots) out.push_back(s.norm);
        return out;
      })
      .def_property_readonly("losses", [](const Trajectory& t) {
        std::vector<double> out;
        for (const auto& s : t.snapshots) out.push_back(s.loss);
        return out;
      });
  m.def("run_gradient_flow",
        [](const ModelState& s, const LabeledDataset& d, double step_size, std::size_t max_steps) {
          FlowConfig cfg;
          cfg.step_size = step_size;
          cfg.max_steps = max_steps;
          return run_gradient_flow(s, d, cfg);
        },
        py::arg("state"), py::arg("data"), py::arg("step_size") = 1.0,
        py::arg("max_steps") = 1'000'000);

  py::class_<MarginSolution>(m, "MarginSolution")
      .def_readonly("p_hat", &MarginSolution::p_hat)
      .def_readonly("p_star", &MarginSolution::p_star)
      .def_readonly("duals", &MarginSolution::duals)
      .def_property_readonly("kkt", [](const MarginSolution& s) { return s.kkt.max(); })
      .def("norm", &MarginSolution::norm);
  m.def("solve_max_margin",
        [](Matrix rows, std::optional<Matrix> ties, double tol) {
          MarginProblem prob;
          prob.rows = std::move(rows);
          prob.ties = ties ? std::move(*ties) : Matrix(0, prob.rows.cols());
          SolveOptions opt;
          opt.tol = tol;
          return solve_max_margin(prob, opt);
        },
        py::arg("rows"), py::arg("ties") = py::none(), py::arg("tol") = 1e-10);

  py::class_<TwoLayerState>(m, "TwoLayerState")
      .def(py::init([](const ModelState& base) { return TwoLayerState::from_base(base); }))
      .def_readwrite("ln_gain", &TwoLayerState::ln_gain)
      .def_readwrite("ln_bias", &TwoLayerState::ln_bias);
  m.def("two_layer_forward", [](const TwoLayerState& s, std::vector<TokenId> tokens, int label) {
    const auto f = two_layer_forward(s, tokens, label);
    return py::make_tuple(f.rows, f.head.output);
  });
  m.def("two_layer_loss", &two_layer_loss);
}
