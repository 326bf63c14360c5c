#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dfsd/emd.hpp"
#include "dfsd/errors.hpp"
#include "dfsd/gradcheck.hpp"
#include "dfsd/pseudo.hpp"
#include "dfsd/stream.hpp"

namespace py = pybind11;
using namespace dfsd;

namespace {

using Rows = std::vector<std::vector<double>>;

NumArray to_array(const Rows& rows) {
  if (rows.empty()) throw InvalidArgument("empty matrix");
  NumArray a = NumArray::matrix(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != a.cols()) throw InvalidArgument("ragged matrix");
    for (std::size_t c = 0; c < a.cols(); ++c) a.at(r, c) = rows[r][c];
  }
  return a;
}

Rows to_rows(const NumArray& a) {
  Rows out;
  for (std::size_t r = 0; r < a.rows(); ++r) out.emplace_back(a.row(r).begin(), a.row(r).end());
  return out;
}

LayerWeights weights(std::vector<double> w) {
  LayerWeights lw{std::move(w)};
  lw.validate();
  return lw;
}

LossTerm parse_term(const std::string& s) {
  if (s == "embedding") return LossTerm::Embedding;
  if (s == "self_distillation") return LossTerm::SelfDistillation;
  if (s == "hda") return LossTerm::Hda;
  if (s == "total") return LossTerm::Total;
  throw InvalidArgument("unknown loss term '" + s + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "DFSD incremental-learning engine";

  m.def("temp_softmax", [](const Rows& logits, double t) { return to_rows(temp_softmax(to_array(logits), t)); },
        py::arg("logits"), py::arg("temperature") = 1.0);
  m.def("sym_kl", [](const std::vector<double>& p, const std::vector<double>& q, double eps) { return sym_kl(p, q, eps); },
        py::arg("p"), py::arg("q"), py::arg("epsilon") = 1e-8);

  m.def(
      "earth_movers",
      [](const Rows& cost, std::vector<double> wt, std::vector<double> ws) {
        const auto r = earth_movers(CostMatrix{to_array(cost)}, weights(std::move(wt)), weights(std::move(ws)));
        return py::dict(py::arg("value") = r.value, py::arg("flow") = to_rows(r.flow.f));
      },
      py::arg("cost"), py::arg("omega_t"), py::arg("omega_s"));
  m.def(
      "update_weights",
      [](std::vector<double> old, const Rows& flow, const Rows& cost, double momentum) {
        return update_weights(weights(std::move(old)), FlowMatrix{to_array(flow)}, CostMatrix{to_array(cost)}, momentum)
            .omega;
      },
      py::arg("old"), py::arg("flow"), py::arg("cost"), py::arg("momentum") = 0.9);

  m.def("allocate_counts", &allocate_counts, py::arg("gamma"), py::arg("new_task_size"), py::arg("tau"));

  m.def(
      "generate_task",
      [](const std::string& task, std::size_t n, std::uint64_t seed) {
        const Corpus c = generate_task_data(standard_task(parse_rule(task)), n, seed);
        py::list out;
        for (const auto& s : c.samples) {
          out.append(py::dict(py::arg("context") = join_symbols(s.context), py::arg("question") = join_symbols(s.question),
                              py::arg("answer") = join_symbols(s.answer), py::arg("task") = s.task));
        }
        return out;
      },
      py::arg("task"), py::arg("n"), py::arg("seed") = 0);

  m.def(
      "check_gradients",
      [](const std::string& term, std::uint64_t seed, std::size_t coords, double step) {
        const auto r = check_loss_gradients(parse_term(term), seed, coords, step);
        return py::dict(py::arg("max_rel_error") = r.max_rel_error, py::arg("coordinates") = r.coordinates);
      },
      py::arg("term") = "total", py::arg("seed") = 0, py::arg("coords") = 200, py::arg("step") = 1e-6);

  m.def(
      "run_stream_json",
      [](const std::string& config, const std::string& out_dir, std::function<void(std::string)> progress) {
        const RunConfig cfg = parse_run_config(nlohmann::json::parse(config));
        StreamData data = prepare_data(cfg);
        StreamHooks hooks;
        if (progress) {
          hooks.progress = [&](const std::string& msg) {
            py::gil_scoped_acquire gil;
            progress(msg);
          };
        }
        RunReport report;
        {
          py::gil_scoped_release release;
          report = train_stream(cfg, data, hooks);
        }
        if (!out_dir.empty()) emit_report(report, out_dir);
        return report_to_json(report).dump();
      },
      py::arg("config"), py::arg("out_dir") = "", py::arg("progress") = nullptr);
}
