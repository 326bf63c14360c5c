// Acceptance gate: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dfsd/emd.hpp"
#include "dfsd/gradcheck.hpp"
#include "dfsd/losses.hpp"
#include "dfsd/pseudo.hpp"
#include "dfsd/rng.hpp"
#include "dfsd/stream.hpp"
#include "oracles.hpp"

using namespace dfsd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void verdict(const std::string& id, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << id << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------

void transport_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_value = 0, worst_marginal = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + trial % 3;
    CostMatrix cost{NumArray::matrix(k, k)};
    std::vector<std::vector<double>> d(k, std::vector<double>(k));
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) cost.d.at(i, j) = d[i][j] = rng.uniform();
    auto simplex = [&] {
      std::vector<double> w(k);
      double s = 0;
      for (auto& v : w) s += (v = rng.uniform());
      for (auto& v : w) v /= s;
      return w;
    };
    const LayerWeights wt{simplex()}, ws{simplex()};
    const auto r = earth_movers(cost, wt, ws);
    worst_value = std::max(worst_value, std::abs(r.value - oracle::transport_bruteforce(d, wt.omega, ws.omega)));
    for (std::size_t i = 0; i < k; ++i) {
      double row = 0, col = 0;
      for (std::size_t j = 0; j < k; ++j) {
        row += r.flow.f.at(i, j);
        col += r.flow.f.at(j, i);
        if (r.flow.f.at(i, j) < -1e-9) worst_marginal = std::max(worst_marginal, -r.flow.f.at(i, j));
      }
      worst_marginal = std::max({worst_marginal, std::abs(row - wt.omega[i]), std::abs(col - ws.omega[i])});
    }
  }
  const double secs = seconds_since(t0);
  verdict("1 transport oracle", worst_value <= 1e-9 && worst_marginal <= 1e-9 && secs < 10.0,
          "200 instances, max |value - brute force| = " + fmt(worst_value) + ", max marginal error = " +
              fmt(worst_marginal) + ", " + fmt(secs, 3) + " s");
}

void gradient_checks() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (auto term : {LossTerm::Embedding, LossTerm::SelfDistillation, LossTerm::Hda, LossTerm::Total}) {
    const auto r = check_loss_gradients(term, 0, 200, 1e-6);
    ok = ok && r.max_rel_error <= 1e-4 && r.coordinates >= 200;
    detail += loss_term_name(term) + " " + fmt(r.max_rel_error, 3) + " (" + std::to_string(r.coordinates) + "), ";
  }
  const double secs = seconds_since(t0);
  verdict("2 gradient checks", ok && secs < 60.0, detail + fmt(secs, 3) + " s");
}

std::vector<double> row_of(const NumArray& a, std::size_t r) { return {a.row(r).begin(), a.row(r).end()}; }

void identity_reductions() {
  ModelConfig cfg{.num_layers = 2, .d_model = 8, .num_heads = 2, .vocab_size = 41, .max_seq_len = 16, .seed = 3};
  Model student(cfg);
  Rng rng(4);
  for (auto& p : student.parameters())
    for (double& v : p.value.values()) v += 0.3 * rng.normal();
  const Model teacher = Model::restore(student.snapshot());
  const std::vector<int> tokens = {3, 15, 16, 17, 8, 0, 15, 16, 17, 1};
  const auto t = teacher.forward(tokens), s = student.forward(tokens);
  const double emb = embedding_loss(t.trace, s.trace);
  const double sd = sd_loss(t.trace, s.trace, MatchingWeights::uniform(2)).value;

  double hda_err = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(6), v = 2 + rng.below(40);
    NumArray tl = NumArray::matrix(rows, v), sl = NumArray::matrix(rows, v);
    for (double& x : tl.values()) x = 3.0 * rng.normal();
    for (double& x : sl.values()) x = 3.0 * rng.normal();
    std::vector<int> targets(rows);
    for (auto& x : targets) x = static_cast<int>(rng.below(v));
    const double temp = 0.5 + 3.0 * rng.uniform();
    double hard = 0, soft = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> onehot(v, 0.0);
      onehot[targets[r]] = 1.0;
      hard += oracle::soft_ce(row_of(sl, r), onehot, temp);
      soft += oracle::soft_ce(row_of(sl, r), oracle::softmax(row_of(tl, r), temp), temp);
    }
    hda_err = std::max(hda_err, std::abs(hda_loss(tl, sl, targets, 0.0, temp) - hard / rows));
    hda_err = std::max(hda_err, std::abs(hda_loss(tl, sl, targets, 1.0, temp) - soft / rows));
  }
  verdict("3 identity reductions", std::abs(emb) <= 1e-12 && std::abs(sd) <= 1e-12 && hda_err <= 1e-10,
          "L_emb = " + fmt(emb) + ", L_SD = " + fmt(sd) + ", HDA endpoint error = " + fmt(hda_err));
}

std::vector<LossBreakdown> second_stage_losses(const TrainState& first, const HyperParams& h) {
  TrainState state = first;
  TrainLog log;
  const auto rev = standard_task(Rule::Reverse);
  train_task(state, rev, generate_task_data(rev, 96, 2), h, log);
  std::vector<LossBreakdown> out;
  for (const auto& s : log.steps) out.push_back(s.loss);
  return out;
}

void composition() {
  const LossBreakdown ones{1, 1, 1, 1, 1, 1, 1, 0};
  const double total = total_loss(ones, {0.25, 0.5, 0.08}).total;

  ModelConfig cfg{.num_layers = 2, .d_model = 32, .num_heads = 2, .vocab_size = 41, .max_seq_len = 16, .seed = 1};
  HyperParams h;
  h.learning_rate = 3e-3;
  h.batch_size = 8;
  h.gamma = 0.25;
  h.trace_every = 2;
  TrainState first(cfg);
  {
    HyperParams warm = h;
    warm.epochs_per_task = 8;
    TrainLog log;
    const auto copy = standard_task(Rule::Copy);
    train_task(first, copy, generate_task_data(copy, 1000, 1), warm, log);
  }
  auto with = [&](Mode m, double mu, double delta) {
    HyperParams x = h;
    x.mode = m;
    x.mu = mu;
    x.delta = delta;
    return second_stage_losses(first, x);
  };
  const auto full = with(Mode::Dfsd, h.mu, h.delta);
  const bool no_sd = with(Mode::Dfsd, 0.0, h.delta) == with(Mode::DfsdNoSd, h.mu, h.delta);
  const bool no_hda = with(Mode::Dfsd, h.mu, 0.0) == with(Mode::DfsdNoHda, h.mu, h.delta);
  const auto pseudo_steps = std::count_if(full.begin(), full.end(), [](const LossBreakdown& l) { return l.sd_qa > 0; });
  verdict("4 objective composition", total == 2.41 && no_sd && no_hda && pseudo_steps > 0,
          "all-ones total = " + format_number(total) + ", dfsd_no_sd == dfsd(mu=0): " + (no_sd ? "yes" : "no") +
              ", dfsd_no_hda == dfsd(delta=0): " + (no_hda ? "yes" : "no") + " over " + std::to_string(full.size()) +
              " steps (" + std::to_string(pseudo_steps) + " distilled)");
}

void allocation() {
  const auto c = allocate_counts(0.01, 2500, 5);
  const std::size_t total = std::accumulate(c.begin(), c.end(), std::size_t{0});
  const bool ok = c == std::vector<std::size_t>{7, 6, 6, 6} && total == 25;
  std::string shown;
  for (auto v : c) shown += (shown.empty() ? "" : ",") + std::to_string(v);
  verdict("6 pseudo allocation", ok, "gamma 0.01, |D|=2500, tau=5 -> [" + shown + "], total " + std::to_string(total));
}

// ---------------------------------------------------------------------------

struct Arm {
  std::string name;
  Mode mode;
  double gamma;
};

struct ArmResult {
  std::vector<RunReport> reports;  // one per seed
  std::vector<double> seconds;
};

double final_average(const RunReport& r) { return average_score(r.accuracy_matrix, r.accuracy_matrix.size() - 1); }

// Flow marginals and weight normalization straight from an emitted CSV.
struct CsvCheck {
  std::size_t rows = 0;
  double worst = 0;
};

CsvCheck check_flows_csv(const fs::path& path, std::size_t k) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CsvCheck c;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4 + k * k + 2 * k) {
      c.worst = INFINITY;
      return c;
    }
    auto at = [&](std::size_t i) { return std::stod(f[i]); };
    double st = 0, ss_ = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const double wt = at(4 + k * k + i), ws = at(4 + k * k + k + i);
      st += wt;
      ss_ += ws;
      double row = 0, col = 0;
      for (std::size_t j = 0; j < k; ++j) {
        row += at(4 + i * k + j);
        col += at(4 + j * k + i);
      }
      c.worst = std::max({c.worst, std::abs(row - wt), std::abs(col - ws)});
      if (wt < 0 || ws < 0) c.worst = INFINITY;
    }
    c.worst = std::max({c.worst, std::abs(st - 1.0), std::abs(ss_ - 1.0)});
    ++c.rows;
  }
  return c;
}

void experiment(const RunConfig& base, const fs::path& out, std::size_t seeds) {
  const std::vector<Arm> arms = {{"finetune", Mode::Finetune, 0.05},          {"dfsd_g0.05", Mode::Dfsd, 0.05},
                                 {"dfsd_g0.01", Mode::Dfsd, 0.01},            {"replay_only_g0.01", Mode::ReplayOnly, 0.01},
                                 {"dfsd_no_sd_g0.01", Mode::DfsdNoSd, 0.01},  {"dfsd_no_hda_g0.01", Mode::DfsdNoHda, 0.01}};
  const std::size_t n_tasks = base.tasks.size();
  std::map<std::string, ArmResult> results;
  std::vector<std::vector<double>> ceilings(n_tasks);
  nlohmann::ordered_json summary;

  for (std::size_t seed = 0; seed < seeds; ++seed) {
    RunConfig cfg = base;
    cfg.hyper.seed = seed;
    cfg.data_seed = seed;
    const StreamData data = prepare_data(cfg);

    for (std::size_t t = 0; t < n_tasks; ++t) {
      RunConfig one = cfg;
      one.tasks = {cfg.tasks[t]};
      one.hyper.mode = Mode::Finetune;
      const StreamData sub{{data.train[t]}, {data.eval[t]}};
      const auto t0 = Clock::now();
      const RunReport r = train_stream(one, sub);
      ceilings[t].push_back(*r.accuracy_matrix[0][0]);
      std::cerr << "ceiling " << cfg.tasks[t] << " seed " << seed << ": " << format_number(ceilings[t].back()) << " ("
                << fmt(seconds_since(t0), 3) << " s)" << std::endl;
    }

    for (const auto& arm : arms) {
      RunConfig a = cfg;
      a.hyper.mode = arm.mode;
      a.hyper.gamma = arm.gamma;
      const auto t0 = Clock::now();
      RunReport r = train_stream(a, data);
      const double secs = seconds_since(t0);
      emit_report(r, out / (arm.name + "_s" + std::to_string(seed)));
      std::cerr << arm.name << " seed " << seed << ": final average " << format_number(final_average(r)) << " ("
                << fmt(secs, 4) << " s)" << std::endl;
      results[arm.name].reports.push_back(std::move(r));
      results[arm.name].seconds.push_back(secs);
    }
  }

  double slowest = 0;
  for (const auto& [name, res] : results) {
    slowest = std::max(slowest, *std::max_element(res.seconds.begin(), res.seconds.end()));
    auto& js = summary["arms"][name];
    for (const auto& r : res.reports) js["final_average"].push_back(final_average(r));
    for (const auto& r : res.reports) js["final_row"].push_back(report_to_json(r)["accuracy_matrix"].back());
    js["median_final_average"] = median(js["final_average"].get<std::vector<double>>());
  }
  std::vector<double> ceiling_median(n_tasks);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    ceiling_median[t] = median(ceilings[t]);
    summary["ceilings"][base.tasks[t]] = ceilings[t];
  }
  auto med_final = [&](const std::string& arm) {
    std::vector<double> v;
    for (const auto& r : results.at(arm).reports) v.push_back(final_average(r));
    return median(v);
  };
  auto med_task = [&](const std::string& arm, std::size_t t) {
    std::vector<double> v;
    for (const auto& r : results.at(arm).reports) v.push_back(*r.accuracy_matrix.back()[t]);
    return median(v);
  };

  // (a) finetune forgets task 1.
  std::vector<double> drops;
  for (const auto& r : results.at("finetune").reports) drops.push_back(forgetting(r.accuracy_matrix, 0, n_tasks - 1));
  const double drop = median(drops);
  verdict("5a finetune forgetting", drop >= 0.30,
          "median drop on " + base.tasks[0] + " = " + fmt(drop) + " (need >= 0.30)");

  // (b) dfsd at gamma 0.05 near the single-task ceiling on every task.
  bool near = true;
  std::string detail;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    const double got = med_task("dfsd_g0.05", t);
    near = near && got >= ceiling_median[t] - 0.10;
    detail += base.tasks[t] + " " + fmt(got) + " vs ceiling " + fmt(ceiling_median[t]) + "; ";
  }
  verdict("5b dfsd gamma 0.05 near ceiling", near, detail + "need each within 0.10");

  // (c) orderings at gamma 0.01.
  const double d = med_final("dfsd_g0.01"), r = med_final("replay_only_g0.01"), nsd = med_final("dfsd_no_sd_g0.01"),
               nhda = med_final("dfsd_no_hda_g0.01");
  verdict("5c gamma 0.01 ordering", d >= r + 0.05 && d >= nsd && d >= nhda,
          "median final average dfsd " + fmt(d) + ", replay_only " + fmt(r) + ", dfsd_no_sd " + fmt(nsd) +
              ", dfsd_no_hda " + fmt(nhda) + " (need dfsd >= replay_only + 0.05 and >= both ablations)");
  verdict("5d stream runtime", slowest <= 1800.0, "slowest full stream " + fmt(slowest, 4) + " s (limit 1800 s)");

  // Determinism: rerun one full stream and compare the emitted bytes.
  {
    RunConfig cfg = base;
    cfg.hyper.seed = 0;
    cfg.data_seed = 0;
    cfg.hyper.mode = Mode::Dfsd;
    cfg.hyper.gamma = 0.05;
    const fs::path again = out / "dfsd_g0.05_s0_rerun";
    emit_report(train_stream(cfg, prepare_data(cfg)), again);
    const bool same = slurp(again / "report.json") == slurp(out / "dfsd_g0.05_s0" / "report.json");
    verdict("7 determinism", same, std::string("dfsd gamma 0.05 seed 0 rerun report.json ") +
                                       (same ? "byte-identical" : "differs"));
  }

  // EMD traces from every emitted run.
  std::size_t rows = 0, runs = 0;
  double worst = 0;
  bool every_distilled_run_traced = true;
  for (const auto& arm : arms) {
    for (std::size_t seed = 0; seed < seeds; ++seed) {
      const auto c = check_flows_csv(out / (arm.name + "_s" + std::to_string(seed)) / "emd_flows.csv",
                                     base.model.num_layers);
      rows += c.rows;
      worst = std::max(worst, c.worst);
      ++runs;
      if ((arm.mode == Mode::Dfsd || arm.mode == Mode::DfsdNoHda) && c.rows == 0) every_distilled_run_traced = false;
    }
  }
  verdict("8 emd trace sanity", worst <= 1e-9 && rows > 0 && every_distilled_run_traced,
          std::to_string(rows) + " flow rows over " + std::to_string(runs) +
              " runs, max marginal or normalization error " + fmt(worst));

  summary["ceiling_median"] = ceiling_median;
  summary["finetune_median_drop"] = drop;
  summary["slowest_stream_seconds"] = slowest;
  std::ofstream(out / "summary.json") << summary.dump(1) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate"};
  std::string config_path = DFSD_EXPERIMENT_CONFIG;
  std::string out = "acceptance_runs";
  std::size_t seeds = 3;
  bool skip_experiment = false;
  app.add_option("--config", config_path, "forgetting experiment config");
  app.add_option("--out", out, "directory for the experiment reports");
  app.add_option("--seeds", seeds, "seeds per arm")->check(CLI::PositiveNumber);
  app.add_flag("--skip-experiment", skip_experiment, "only run the fast criteria");
  CLI11_PARSE(app, argc, argv);

  try {
    transport_oracle();
    gradient_checks();
    identity_reductions();
    composition();
    allocation();
    if (skip_experiment) {
      std::cout << "SKIP 5 7 8: experiment not run" << std::endl;
    } else {
      const RunConfig base = load_run_config(config_path);
      fs::create_directories(out);
      experiment(base, out, seeds);
    }
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << (failures ? "FAILED " + std::to_string(failures) + " criteria" : std::string("ALL PASS")) << std::endl;
  return failures ? 1 : 0;
}
