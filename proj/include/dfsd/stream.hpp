#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfsd/report.hpp"
#include "dfsd/trainer.hpp"

namespace dfsd {

/// Everything a training run needs. Serialized as a flat object holding the
/// HyperParams fields plus "model", "tasks" and data-generation keys.
struct RunConfig {
  HyperParams hyper;
  ModelConfig model;  // seed is taken from hyper.seed; vocab_size from the suite
  std::vector<std::string> tasks = {"copy", "reverse", "shift"};
  std::size_t train_size = 2000;
  std::size_t eval_size = 500;
  std::uint64_t data_seed = 0;
  std::size_t min_len = 2;
  std::size_t max_len = 5;
  std::size_t alphabet_size = 8;
  std::vector<std::string> train_corpora;  // optional; one path per task
  std::vector<std::string> eval_corpora;

  /// Model config actually used (seed and vocabulary filled in).
  ModelConfig resolved_model() const;
  std::vector<TaskSpec> task_specs() const;
  void validate() const;
};

/// Strict parse: unknown keys and wrong types are errors.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::ordered_json run_config_to_json(const RunConfig& c);

struct StreamData {
  std::vector<Corpus> train;
  std::vector<Corpus> eval;
};

/// Synthetic train/held-out corpora; held-out seeds never collide with
/// training seeds. Corpus paths in the config take precedence.
StreamData prepare_data(const RunConfig& config);

struct StreamHooks {
  std::function<void(std::size_t stage, const Model&)> on_stage_end;
  std::function<void(const std::string&)> progress;
  std::function<void(std::size_t stage, const Corpus&)> pseudo_sink;
};

/// Train every task in order; after each stage score the student on every
/// task's held-out set.
RunReport train_stream(const RunConfig& config, const StreamData& data, const StreamHooks& hooks = {});

}  // namespace dfsd
