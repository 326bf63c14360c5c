// dfsd: data generation, training, evaluation and inspection for the
// incremental-learning engine.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dfsd/emd.hpp"
#include "dfsd/errors.hpp"
#include "dfsd/gradcheck.hpp"
#include "dfsd/report.hpp"
#include "dfsd/stream.hpp"

namespace fs = std::filesystem;
using namespace dfsd;

namespace {

std::vector<std::vector<double>> read_numbers(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream in(line);
    std::vector<double> row;
    std::string tok;
    while (in >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("not a number: '" + tok + "' in " + path.string(), line_no);
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(path.string() + " holds no numbers", 0);
  return rows;
}

LayerWeights read_weights(const fs::path& path) {
  LayerWeights w;
  for (const auto& row : read_numbers(path)) w.omega.insert(w.omega.end(), row.begin(), row.end());
  return w;
}

CostMatrix read_cost(const fs::path& path) {
  const auto rows = read_numbers(path);
  CostMatrix c{NumArray::matrix(rows.size(), rows.size())};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw ParseError("cost matrix must be square", i + 1);
    for (std::size_t j = 0; j < rows.size(); ++j) c.d.at(i, j) = rows[i][j];
  }
  return c;
}

void print_matrix(const AccuracyMatrix& m, const std::vector<std::string>& tasks) {
  std::cout << "stage";
  for (const auto& t : tasks) std::cout << '\t' << t;
  std::cout << "\tavg\n";
  for (std::size_t s = 0; s < m.size(); ++s) {
    std::cout << s + 1;
    for (const auto& v : m[s]) {
      std::cout << '\t';
      if (v) std::cout << std::fixed << std::setprecision(4) << *v;
      else std::cout << '-';
    }
    std::cout << '\t' << average_score(m, s) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental language learning with EMD self-distillation and hidden data augmentation"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic task corpus");
  std::string gen_task, gen_out, gen_format = "jsonl";
  std::size_t gen_n = 0, gen_min = 2, gen_max = 5, gen_alpha = 8;
  gen->add_option("--task", gen_task, "copy | reverse | shift | sort | parity")->required();
  gen->add_option("--n", gen_n, "Number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "Output corpus path")->required();
  gen->add_option("--format", gen_format, "Corpus format")->check(CLI::IsMember({"jsonl"}));
  gen->add_option("--min-len", gen_min, "Shortest context");
  gen->add_option("--max-len", gen_max, "Longest context");
  gen->add_option("--alphabet-size", gen_alpha, "Letters a.. used in contexts")->check(CLI::Range(2, 26));
  gen->add_option("--seed", seed, "Random seed");

  // train
  auto* train = app.add_subcommand("train", "Train a task stream and write a run report");
  std::string cfg_path, out_dir, dump_pseudo, mode_override;
  std::optional<double> gamma_override, lr_override;
  std::optional<std::uint64_t> train_seed;
  bool carry_weights = false, quiet = false;
  train->add_option("--config", cfg_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--seed", train_seed, "Override the config seed");
  train->add_option("--mode", mode_override, "Override the training mode")
      ->check(CLI::IsMember({"dfsd", "replay_only", "finetune", "dfsd_no_sd", "dfsd_no_hda"}));
  train->add_option("--gamma", gamma_override, "Override the pseudo-data ratio");
  train->add_option("--learning-rate", lr_override, "Override the learning rate");
  train->add_flag("--carry-weights", carry_weights, "Keep layer weights across tasks");
  train->add_option("--dump-pseudo", dump_pseudo, "Write generated pseudo-samples to this corpus file");
  train->add_flag("--quiet", quiet, "No progress output");

  // eval
  auto* eval = app.add_subcommand("eval", "Exact-match accuracy of a checkpoint on a corpus");
  std::string ckpt_path, corpus_path;
  eval->add_option("--checkpoint", ckpt_path, "Model snapshot")->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", corpus_path, "Held-out corpus")->required()->check(CLI::ExistingFile);
  eval->add_option("--seed", seed, "Unused; accepted for uniformity");

  // emd-solve
  auto* solve = app.add_subcommand("emd-solve", "Solve one layer-matching transportation problem");
  std::string cost_path, wt_path, ws_path;
  solve->add_option("--cost", cost_path, "K x K cost matrix, one row per line")->required()->check(CLI::ExistingFile);
  solve->add_option("--wt", wt_path, "Teacher layer weights")->required()->check(CLI::ExistingFile);
  solve->add_option("--ws", ws_path, "Student layer weights")->required()->check(CLI::ExistingFile);
  solve->add_option("--seed", seed, "Unused; accepted for uniformity");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every objective term");
  std::size_t gc_coords = 200;
  double gc_step = 1e-6, gc_tol = 1e-4;
  gc->add_option("--coords", gc_coords, "Coordinates sampled per term");
  gc->add_option("--step", gc_step, "Central-difference step")->check(CLI::Range(1e-7, 1e-4));
  gc->add_option("--tolerance", gc_tol, "Maximum relative error");
  gc->add_option("--seed", seed, "Random seed");

  // report
  auto* rep = app.add_subcommand("report", "Summarize a run directory");
  std::string run_dir, rep_out;
  rep->add_option("--run", run_dir, "Directory holding report.json")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--out", rep_out, "Re-emit report files here");
  rep->add_option("--seed", seed, "Unused; accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      TaskSpec spec = standard_task(parse_rule(gen_task));
      spec.alphabet.clear();
      for (std::size_t i = 0; i < gen_alpha; ++i) spec.alphabet.emplace_back(1, static_cast<char>('a' + i));
      spec.min_len = gen_min;
      spec.max_len = gen_max;
      write_corpus(generate_task_data(spec, gen_n, seed), gen_out);
    } else if (*train) {
      nlohmann::json raw;
      {
        std::ifstream f(cfg_path);
        try {
          raw = nlohmann::json::parse(f);
        } catch (const nlohmann::json::parse_error& e) {
          std::cerr << "error: " << cfg_path << " is not valid JSON: " << e.what() << '\n';
          return 1;
        }
      }
      if (train_seed) raw["seed"] = *train_seed;
      if (!mode_override.empty()) raw["mode"] = mode_override;
      if (gamma_override) raw["gamma"] = *gamma_override;
      if (lr_override) raw["learning_rate"] = *lr_override;
      if (carry_weights) raw["carry_weights"] = true;
      RunConfig config;
      try {
        config = parse_run_config(raw);
      } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
      }
      fs::create_directories(out_dir);
      StreamHooks hooks;
      hooks.on_stage_end = [&](std::size_t stage, const Model& m) {
        save_snapshot(m.snapshot(), fs::path(out_dir) / ("checkpoint_stage" + std::to_string(stage) + ".bin"));
      };
      if (!quiet) hooks.progress = [](const std::string& msg) { std::cerr << msg << '\n'; };
      std::ofstream pseudo_out;
      if (!dump_pseudo.empty()) {
        pseudo_out.open(dump_pseudo, std::ios::binary | std::ios::trunc);
        if (!pseudo_out) throw std::runtime_error("cannot open " + dump_pseudo);
        hooks.pseudo_sink = [&](std::size_t, const Corpus& c) { pseudo_out << format_corpus(c); };
      }
      const RunReport report = train_stream(config, prepare_data(config), hooks);
      emit_report(report, out_dir);
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
      if (!quiet) print_matrix(report.accuracy_matrix, report.tasks);
    } else if (*eval) {
      const Model model = Model::restore(load_snapshot(ckpt_path));
      const auto corpus = read_corpus(corpus_path);
      std::cout << format_number(exact_match(model, corpus.corpus)) << '\n';
    } else if (*solve) {
      const CostMatrix cost = read_cost(cost_path);
      const EmdResult r = earth_movers(cost, read_weights(wt_path), read_weights(ws_path));
      std::cout << std::setprecision(12) << r.value << '\n';
      for (std::size_t i = 0; i < r.flow.size(); ++i) {
        for (std::size_t j = 0; j < r.flow.size(); ++j) std::cout << (j ? " " : "") << r.flow.f.at(i, j);
        std::cout << '\n';
      }
    } else if (*gc) {
      bool ok = true;
      for (LossTerm t : {LossTerm::Embedding, LossTerm::SelfDistillation, LossTerm::Hda, LossTerm::Total}) {
        const auto r = check_loss_gradients(t, seed, gc_coords, gc_step);
        std::cout << loss_term_name(t) << " coords=" << r.coordinates << " max_rel_error=" << r.max_rel_error
                  << '\n';
        ok = ok && r.max_rel_error <= gc_tol;
      }
      if (!ok) {
        std::cerr << "gradient check failed\n";
        return 2;
      }
    } else if (*rep) {
      std::ifstream f(fs::path(run_dir) / "report.json");
      if (!f) throw std::runtime_error("no report.json in " + run_dir);
      const RunReport report = report_from_json(nlohmann::ordered_json::parse(f));
      print_matrix(report.accuracy_matrix, report.tasks);
      const std::size_t last = report.accuracy_matrix.size() - 1;
      for (std::size_t t = 0; t + 1 < report.accuracy_matrix.size(); ++t) {
        std::cout << "forgetting " << report.tasks[t] << ": " << forgetting(report.accuracy_matrix, t, last) << '\n';
      }
      for (const auto& w : report.warnings) std::cout << "warning: " << w << '\n';
      if (!rep_out.empty()) emit_report(report, rep_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
