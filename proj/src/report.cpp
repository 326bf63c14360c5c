#include "dfsd/report.hpp"

#include <fstream>

#include "dfsd/errors.hpp"

namespace dfsd {

std::optional<Symbols> greedy_answer(const Model& model, const Sample& sample) {
  const auto& vocab = Vocabulary::standard();
  std::vector<int> seq = encode_prompt(sample);
  const std::size_t max_len = model.config().max_seq_len;
  if (seq.size() > max_len) return std::nullopt;
  Symbols answer;
  while (seq.size() < max_len) {
    const auto logits = model.next_token_logits(seq);
    const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (next == Vocabulary::kEos) return answer;
    answer.push_back(vocab.symbol(next));
    seq.push_back(next);
  }
  return std::nullopt;
}

double exact_match(const Model& model, const Corpus& corpus) {
  if (corpus.samples.empty()) throw InvalidArgument("exact_match: corpus is empty");
  std::size_t hits = 0;
  for (const auto& s : corpus.samples) {
    const auto got = greedy_answer(model, s);
    if (got && *got == s.answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(corpus.samples.size());
}

double average_score(const AccuracyMatrix& m, std::size_t stage) {
  if (stage >= m.size()) throw InvalidArgument("average_score: no such stage");
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& v : m[stage]) {
    if (!v) continue;
    s += *v;
    ++n;
  }
  if (n == 0) throw InvalidArgument("average_score: stage has no scored task");
  return s / static_cast<double>(n);
}

double forgetting(const AccuracyMatrix& m, std::size_t task, std::size_t stage) {
  if (stage >= m.size() || task >= m.size() || task >= m[stage].size() || task >= m[task].size()) {
    throw InvalidArgument("forgetting: index out of range");
  }
  if (!m[task][task] || !m[stage][task]) throw InvalidArgument("forgetting: task not scored at that stage");
  return *m[task][task] - *m[stage][task];
}

// ---------------------------------------------------------------------------

namespace {

using ojson = nlohmann::ordered_json;

ojson loss_json(const LossBreakdown& l) {
  return {{"qa_ce", l.qa_ce},   {"lm_ce", l.lm_ce},   {"emb", l.emb},       {"sd_qa", l.sd_qa},
          {"sd_lm", l.sd_lm},   {"hda_qa", l.hda_qa}, {"hda_lm", l.hda_lm}, {"total", l.total}};
}

LossBreakdown loss_from(const nlohmann::ordered_json& j) {
  return {j.at("qa_ce"), j.at("lm_ce"), j.at("emb"), j.at("sd_qa"),
          j.at("sd_lm"), j.at("hda_qa"), j.at("hda_lm"), j.at("total")};
}

ojson matrix_json(const NumArray& a) {
  ojson rows = ojson::array();
  for (std::size_t r = 0; r < a.rows(); ++r) rows.push_back(std::vector<double>(a.row(r).begin(), a.row(r).end()));
  return rows;
}

NumArray matrix_from(const nlohmann::ordered_json& j) {
  const std::size_t rows = j.size();
  const std::size_t cols = rows ? j.at(0).size() : 0;
  NumArray a = NumArray::matrix(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) a.at(r, c) = j.at(r).at(c).get<double>();
  }
  return a;
}

}  // namespace

std::string format_number(double v) { return nlohmann::json(v).dump(); }

nlohmann::ordered_json report_to_json(const RunReport& r) {
  ojson j;
  j["tasks"] = r.tasks;
  ojson acc = ojson::array();
  for (const auto& row : r.accuracy_matrix) {
    ojson cells = ojson::array();
    for (const auto& v : row) cells.push_back(v ? ojson(*v) : ojson(nullptr));
    acc.push_back(std::move(cells));
  }
  j["accuracy_matrix"] = std::move(acc);
  ojson avg = ojson::array();
  for (std::size_t s = 0; s < r.accuracy_matrix.size(); ++s) avg.push_back(average_score(r.accuracy_matrix, s));
  j["average_scores"] = avg;
  ojson curves = ojson::array();
  for (const auto& s : r.loss_curves) {
    curves.push_back({{"step", s.step}, {"stage", s.stage}, {"pseudo", s.pseudo}, {"loss", loss_json(s.loss)}});
  }
  j["loss_curves"] = std::move(curves);
  ojson traces = ojson::array();
  for (const auto& t : r.emd_traces) {
    traces.push_back({{"step", t.step},
                      {"stage", t.stage},
                      {"kind", std::string(1, t.kind)},
                      {"encoding", t.encoding},
                      {"value", t.result.value},
                      {"cost", matrix_json(t.result.cost.d)},
                      {"flow", matrix_json(t.result.flow.f)},
                      {"omega_t", t.omega_t.omega},
                      {"omega_s", t.omega_s.omega}});
  }
  j["emd_traces"] = std::move(traces);
  j["config"] = r.config_echo;
  j["warnings"] = r.warnings;
  return j;
}

RunReport report_from_json(const nlohmann::ordered_json& j) {
  RunReport r;
  r.tasks = j.at("tasks").get<std::vector<std::string>>();
  for (const auto& row : j.at("accuracy_matrix")) {
    auto& cells = r.accuracy_matrix.emplace_back();
    for (const auto& v : row) cells.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  for (const auto& s : j.at("loss_curves")) {
    r.loss_curves.push_back({s.at("step"), s.at("stage"), s.at("pseudo"), loss_from(s.at("loss"))});
  }
  for (const auto& t : j.at("emd_traces")) {
    EmdTraceRecord rec;
    rec.step = t.at("step");
    rec.stage = t.at("stage");
    rec.kind = t.at("kind").get<std::string>().at(0);
    rec.encoding = t.at("encoding");
    rec.result.value = t.at("value");
    rec.result.cost.d = matrix_from(t.at("cost"));
    rec.result.flow.f = matrix_from(t.at("flow"));
    rec.omega_t.omega = t.at("omega_t").get<std::vector<double>>();
    rec.omega_s.omega = t.at("omega_s").get<std::vector<double>>();
    r.emd_traces.push_back(std::move(rec));
  }
  r.config_echo = j.at("config");
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

std::string accuracy_csv(const RunReport& r) {
  std::string out = "stage";
  for (const auto& t : r.tasks) out += "," + t;
  out += '\n';
  for (std::size_t s = 0; s < r.accuracy_matrix.size(); ++s) {
    out += std::to_string(s + 1);
    for (const auto& v : r.accuracy_matrix[s]) out += "," + (v ? format_number(*v) : std::string());
    out += '\n';
  }
  return out;
}

std::string emd_flows_csv(const RunReport& r) {
  std::string out = "step,stage,kind,encoding";
  const std::size_t k = r.emd_traces.empty() ? 0 : r.emd_traces.front().omega_t.size();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) out += ",f_" + std::to_string(i) + "_" + std::to_string(j);
  }
  for (std::size_t i = 0; i < k; ++i) out += ",wt_" + std::to_string(i);
  for (std::size_t i = 0; i < k; ++i) out += ",ws_" + std::to_string(i);
  out += '\n';
  for (const auto& t : r.emd_traces) {
    out += std::to_string(t.step) + "," + std::to_string(t.stage) + "," + t.kind + "," + t.encoding;
    for (double v : t.result.flow.f.values()) out += "," + format_number(v);
    for (double v : t.omega_t.omega) out += "," + format_number(v);
    for (double v : t.omega_s.omega) out += "," + format_number(v);
    out += '\n';
  }
  return out;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << body;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

void emit_report(const RunReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  write_file(out_dir / "report.json", report_to_json(report).dump(1) + "\n");
  write_file(out_dir / "accuracy.csv", accuracy_csv(report));
  write_file(out_dir / "emd_flows.csv", emd_flows_csv(report));
}

}  // namespace dfsd
