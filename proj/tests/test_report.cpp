#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dfsd/errors.hpp"
#include "dfsd/report.hpp"
#include "dfsd/stream.hpp"

using namespace dfsd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream in(line);
  std::string f;
  while (std::getline(in, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

RunConfig tiny_config() {
  RunConfig c;
  c.tasks = {"copy", "reverse"};
  c.train_size = 48;
  c.eval_size = 10;
  c.model.num_layers = 2;
  c.model.d_model = 16;
  c.model.num_heads = 2;
  c.model.max_seq_len = 16;
  c.hyper.learning_rate = 3e-3;
  c.hyper.epochs_per_task = 2;
  c.hyper.batch_size = 8;
  c.hyper.gamma = 0.5;
  c.hyper.trace_every = 2;
  return c;
}

const RunReport& tiny_report() {
  static const RunReport r = [] {
    const RunConfig c = tiny_config();
    return train_stream(c, prepare_data(c));
  }();
  return r;
}

}  // namespace

TEST_CASE("average score and forgetting") {
  const AccuracyMatrix m = {{0.9, std::nullopt, std::nullopt}, {0.5, 1.0, std::nullopt}, {0.8, 0.7, 0.9}};
  CHECK(average_score(m, 0) == 0.9);
  CHECK(average_score(m, 1) == 0.75);
  CHECK(std::abs(average_score(m, 2) - 0.8) < 1e-15);
  CHECK(std::abs(forgetting(m, 0, 1) - 0.4) < 1e-15);
  CHECK(std::abs(forgetting(m, 1, 2) - 0.3) < 1e-15);
  CHECK(forgetting(m, 2, 2) == 0.0);
  CHECK_THROWS_AS(average_score(m, 3), InvalidArgument);
  CHECK_THROWS_AS(forgetting(m, 2, 1), InvalidArgument);
}

TEST_CASE("exact match scoring") {
  ModelConfig cfg{.num_layers = 2, .d_model = 8, .num_heads = 2, .vocab_size = 41, .max_seq_len = 12, .seed = 1};
  const Model m(cfg);
  const auto spec = standard_task(Rule::Copy);
  const Corpus c = generate_task_data(spec, 20, 4);
  CHECK_THROWS_AS(exact_match(m, Corpus{}), InvalidArgument);

  // Independent greedy decode straight from the logits.
  const auto& vocab = Vocabulary::standard();
  std::size_t hits = 0;
  for (const auto& s : c.samples) {
    std::vector<int> seq = encode_prompt(s);
    Symbols got;
    bool done = false;
    while (seq.size() < cfg.max_seq_len) {
      const auto logits = m.next_token_logits(seq);
      const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      if (next == Vocabulary::kEos) {
        done = true;
        break;
      }
      got.push_back(vocab.symbol(next));
      seq.push_back(next);
    }
    const auto lib = greedy_answer(m, s);
    CHECK(lib.has_value() == done);
    if (done) {
      CHECK(*lib == got);
      if (got == s.answer) ++hits;
    }
  }
  CHECK(exact_match(m, c) == static_cast<double>(hits) / 20.0);
}

TEST_CASE("stream report structure") {
  const RunReport& r = tiny_report();
  REQUIRE(r.accuracy_matrix.size() == 2);
  CHECK(r.accuracy_matrix[0][0].has_value());
  CHECK_FALSE(r.accuracy_matrix[0][1].has_value());
  CHECK(r.accuracy_matrix[1][0].has_value());
  CHECK(r.accuracy_matrix[1][1].has_value());
  CHECK(r.tasks == std::vector<std::string>{"copy", "reverse"});
  CHECK_FALSE(r.loss_curves.empty());
  CHECK_FALSE(r.emd_traces.empty());
  CHECK(r.config_echo.at("gamma") == 0.5);

  const RunConfig one = [] {
    RunConfig c = tiny_config();
    c.tasks = {"shift"};
    return c;
  }();
  const RunReport single = train_stream(one, prepare_data(one));
  CHECK(single.accuracy_matrix.size() == 1);
  CHECK(single.accuracy_matrix[0].size() == 1);
  CHECK(single.emd_traces.empty());
}

TEST_CASE("report files") {
  const RunReport& r = tiny_report();
  const fs::path a = fs::temp_directory_path() / "dfsd_report_a", b = fs::temp_directory_path() / "dfsd_report_b";
  fs::remove_all(a);
  fs::remove_all(b);
  emit_report(r, a);
  emit_report(r, b);
  for (const char* f : {"report.json", "accuracy.csv", "emd_flows.csv"}) CHECK(slurp(a / f) == slurp(b / f));

  const auto acc = lines(slurp(a / "accuracy.csv"));
  REQUIRE(acc.size() == r.accuracy_matrix.size() + 1);
  CHECK(acc[0] == "stage,copy,reverse");
  CHECK(fields(acc[1]).size() == 3);
  CHECK(fields(acc[1])[2].empty());

  // Every CSV number equals the JSON value exactly.
  const auto j = nlohmann::ordered_json::parse(slurp(a / "report.json"));
  for (std::size_t s = 0; s < r.accuracy_matrix.size(); ++s) {
    const auto f = fields(acc[s + 1]);
    for (std::size_t t = 0; t < 2; ++t) {
      if (j["accuracy_matrix"][s][t].is_null()) {
        CHECK(f[t + 1].empty());
      } else {
        CHECK(std::stod(f[t + 1]) == j["accuracy_matrix"][s][t].get<double>());
      }
    }
  }
  const auto flows = lines(slurp(a / "emd_flows.csv"));
  REQUIRE(flows.size() == r.emd_traces.size() + 1);
  const std::size_t k = 2;
  for (std::size_t i = 1; i < flows.size(); ++i) {
    const auto f = fields(flows[i]);
    REQUIRE(f.size() == 4 + k * k + 2 * k);
    const auto& trace = j["emd_traces"][i - 1];
    CHECK((f[2] == "A" || f[2] == "H"));
    for (std::size_t c = 0; c < k * k; ++c) CHECK(std::stod(f[4 + c]) == trace["flow"][c / k][c % k].get<double>());
    for (std::size_t row = 0; row < k; ++row) {
      double sum = 0;
      for (std::size_t c = 0; c < k; ++c) sum += std::stod(f[4 + row * k + c]);
      CHECK(std::abs(sum - std::stod(f[4 + k * k + row])) <= 1e-9);
    }
  }

  // Round trip through the parser and re-emit: byte-identical.
  const RunReport back = report_from_json(j);
  const fs::path c = fs::temp_directory_path() / "dfsd_report_c";
  fs::remove_all(c);
  emit_report(back, c);
  for (const char* f : {"report.json", "accuracy.csv", "emd_flows.csv"}) CHECK(slurp(a / f) == slurp(c / f));
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST_CASE("run config parsing") {
  const auto c = parse_run_config(nlohmann::json::parse(
      R"({"gamma":0.01,"mode":"replay_only","seed":3,"model":{"d_model":32},"tasks":["copy","sort"],"max_len":4})"));
  CHECK(c.hyper.gamma == 0.01);
  CHECK(c.hyper.mode == Mode::ReplayOnly);
  CHECK(c.resolved_model().seed == 3);
  CHECK(c.resolved_model().d_model == 32);
  CHECK(c.resolved_model().vocab_size == 41);
  CHECK(c.task_specs()[1].rule == Rule::Sort);
  CHECK(c.task_specs()[1].max_len == 4);

  const auto echo = run_config_to_json(c);
  const auto again = parse_run_config(echo);
  CHECK(run_config_to_json(again) == echo);

  CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"gama":0.01})")), InvalidArgument);
  CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"gamma":"high"})")), InvalidArgument);
  CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"mode":"lamol"})")), InvalidArgument);
  CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"model":{"layers":3}})")), InvalidArgument);
  CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"tasks":["copy","copy"]})")), InvalidArgument);
  CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"gamma":0})")), InvalidArgument);
  CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"([1])")), InvalidArgument);
}

TEST_CASE("held-out data never reuses training seeds") {
  RunConfig c = tiny_config();
  c.train_size = 200;
  c.eval_size = 200;
  const auto d = prepare_data(c);
  REQUIRE(d.train.size() == 2);
  CHECK_FALSE(d.train[0].samples == d.eval[0].samples);
  CHECK(prepare_data(c).eval[1] == d.eval[1]);
}
