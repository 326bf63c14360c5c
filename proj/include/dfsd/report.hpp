#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfsd/model.hpp"
#include "dfsd/tasks.hpp"
#include "dfsd/trainer.hpp"

namespace dfsd {

/// Greedy-decode each sample from its QA prompt until [EOS] (or the context
/// window fills) and score exact matches of the answer. Corpus must be
/// non-empty.
double exact_match(const Model& model, const Corpus& corpus);

/// Greedy answer for one sample; nullopt when no [EOS] was produced.
std::optional<Symbols> greedy_answer(const Model& model, const Sample& sample);

/// Row per stage, column per task; a task has no entry before its own stage.
using AccuracyMatrix = std::vector<std::vector<std::optional<double>>>;

/// Unweighted mean over the tasks scored at `stage`.
double average_score(const AccuracyMatrix& accuracy_matrix, std::size_t stage);

/// accuracy at introduction (stage == task) minus accuracy at `stage`.
double forgetting(const AccuracyMatrix& accuracy_matrix, std::size_t task, std::size_t stage);

struct RunReport {
  std::vector<std::string> tasks;
  AccuracyMatrix accuracy_matrix;  // stage x task
  std::vector<StepRecord> loss_curves;
  std::vector<EmdTraceRecord> emd_traces;
  nlohmann::ordered_json config_echo;
  std::vector<std::string> warnings;
};

nlohmann::ordered_json report_to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::ordered_json& j);

/// accuracy.csv body: header "stage,<task>..." then one row per stage;
/// absent entries are empty fields.
std::string accuracy_csv(const RunReport& report);
/// emd_flows.csv body: step, stage, kind, encoding, flattened flow, wt, ws.
std::string emd_flows_csv(const RunReport& report);

/// Write report.json, accuracy.csv and emd_flows.csv into `out_dir`
/// (created if missing). Output is a pure function of the report.
void emit_report(const RunReport& report, const std::filesystem::path& out_dir);

/// Shortest round-trip text for a double, identical to what report.json holds.
std::string format_number(double v);

}  // namespace dfsd
