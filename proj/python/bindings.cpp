#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "resilsim/harness.hpp"

namespace py = pybind11;
using namespace resilsim;

namespace {

// Scenario overrides mirror the CLI's run flags.
Scenario with_overrides(Scenario sc, std::optional<std::string> policy, std::optional<std::uint64_t> seed,
                        std::optional<int> iterations) {
  if (policy) sc.policy = policy_from_string(*policy);
  if (seed) sc.seed = *seed;
  if (iterations) sc.iterations = *iterations;
  check_scenario(sc);
  return sc;
}

}  // namespace

PYBIND11_MODULE(_resilsim, m) {
  m.doc() = "Hybrid-parallel training resilience simulator";

  py::register_exception<ScenarioError>(m, "ScenarioError", PyExc_ValueError);

  py::class_<MicroBatch>(m, "MicroBatch")
      .def_readonly("id", &MicroBatch::id)
      .def_readonly("doc_lengths", &MicroBatch::doc_lengths)
      .def_readonly("token_budget", &MicroBatch::token_budget)
      .def("quad_load", [](const MicroBatch& mb) { return quad_load(mb); });

  py::class_<CostModel>(m, "CostModel")
      .def(py::init([](double alpha, double beta) { return CostModel{alpha, beta}; }), py::arg("alpha"),
           py::arg("beta"))
      .def_readwrite("alpha", &CostModel::alpha)
      .def_readwrite("beta", &CostModel::beta)
      .def_readwrite("ratio_f", &CostModel::ratio_f)
      .def_readwrite("ratio_b", &CostModel::ratio_b)
      .def_readwrite("ratio_w", &CostModel::ratio_w);

  m.def(
      "pack_sequences",
      [](const std::vector<std::int64_t>& lengths, std::int64_t budget) { return pack_sequences(lengths, budget); },
      py::arg("doc_lengths"), py::arg("token_budget"));

  m.def(
      "fit_cost_model",
      [](const std::vector<std::pair<std::vector<std::int64_t>, double>>& samples) {
        std::vector<std::pair<MicroBatch, double>> s;
        s.reserve(samples.size());
        for (const auto& [docs, t] : samples) {
          std::int64_t n = 0;
          for (auto l : docs) n += l;
          s.push_back({MicroBatch{static_cast<int>(s.size()), docs, n}, t});
        }
        const CostFit fit = fit_cost_model(s);
        return py::make_tuple(fit.model.alpha, fit.model.beta, fit.mape);
      },
      py::arg("samples"), "Fit (alpha, beta) from (doc_lengths, seconds) pairs; returns (alpha, beta, mape).");

  py::class_<RunResult>(m, "RunResult")
      .def_readonly("scenario", &RunResult::scenario)
      .def_property_readonly("policy", [](const RunResult& r) { return std::string(to_string(r.policy)); })
      .def_readonly("seed", &RunResult::seed)
      .def_readonly("aborted", &RunResult::aborted)
      .def_readonly("aborted_at", &RunResult::aborted_at)
      .def_readonly("abort_reason", &RunResult::abort_reason)
      .def_property_readonly("iterations_completed", [](const RunResult& r) { return r.iterations.size(); })
      .def_property_readonly("observed_times",
                             [](const RunResult& r) {
                               std::vector<double> t;
                               for (const auto& it : r.iterations) t.push_back(it.observed_time);
                               return t;
                             })
      .def_property_readonly("adaptations", [](const RunResult& r) { return r.adaptations.size(); })
      .def("throughput", &RunResult::throughput)
      .def("healthy_throughput", &RunResult::healthy_throughput)
      .def("wall_clock", &RunResult::wall_clock)
      .def("summary_json", [](const RunResult& r) { return summary_json(r); })
      .def("iterations_csv", [](const RunResult& r) { return iterations_csv(r); })
      .def("emit", [](const RunResult& r, const std::filesystem::path& out) {
        prepare_output_dir(out);
        emit_outputs(r, out);
      });

  m.def(
      "run",
      [](const std::filesystem::path& path, std::optional<std::string> policy, std::optional<std::uint64_t> seed,
         std::optional<int> iterations) {
        Scenario sc = with_overrides(load_scenario(path), std::move(policy), seed, iterations);
        py::gil_scoped_release release;
        return run_scenario(sc);
      },
      py::arg("scenario"), py::kw_only(), py::arg("policy") = py::none(), py::arg("seed") = py::none(),
      py::arg("iterations") = py::none(), "Run a scenario file.");

  m.def(
      "run_text",
      [](const std::string& text, std::optional<std::string> policy, std::optional<std::uint64_t> seed,
         std::optional<int> iterations) {
        Scenario sc = with_overrides(parse_scenario(text), std::move(policy), seed, iterations);
        py::gil_scoped_release release;
        return run_scenario(sc);
      },
      py::arg("text"), py::kw_only(), py::arg("policy") = py::none(), py::arg("seed") = py::none(),
      py::arg("iterations") = py::none(), "Run a scenario given as YAML or JSON text.");
}
