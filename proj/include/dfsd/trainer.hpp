#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dfsd/losses.hpp"
#include "dfsd/model.hpp"
#include "dfsd/rng.hpp"
#include "dfsd/tasks.hpp"

namespace dfsd {

enum class Mode {
  Dfsd,        // replay + self-distillation + HDA
  ReplayOnly,  // replay with plain QA/LM cross-entropy
  Finetune,    // no replay at all
  DfsdNoSd,    // DFSD without self-distillation
  DfsdNoHda,   // DFSD without HDA
};

enum class TokenMode {
  Task,  // one lead token per task
  Gen,   // one shared [GEN] lead token
};

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);

struct HyperParams {
  double gamma = 0.05;
  double beta = 0.25;
  double mu = 0.5;
  double delta = 0.08;
  double alpha = 0.9;
  double temperature = 2.0;  // distillation softmax temperature
  double learning_rate = 1e-4;
  std::size_t epochs_per_task = 5;
  std::size_t batch_size = 16;
  std::size_t top_k = 20;
  double weight_momentum = 0.9;
  std::uint64_t seed = 0;
  Mode mode = Mode::Dfsd;

  double emb_weight = 1.0;  // scale of the embedding term inside each SD bucket
  double generation_temperature = 1.0;
  TokenMode token_mode = TokenMode::Task;
  bool carry_weights = false;  // keep layer weights across tasks instead of resetting
  WeightStrategy weight_strategy = WeightStrategy::InverseCost;
  std::size_t trace_every = 25;  // EMD trace sampling period in steps

  void validate() const;
  /// beta/mu/delta with the terms the mode disables set to zero.
  ObjectiveWeights objective() const;
  bool uses_pseudo() const { return mode != Mode::Finetune; }
};

/// Adam with (0.9, 0.999, 1e-8). State is keyed by parameter position.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Update every parameter from its gradient. Throws NonFiniteError (before
  /// touching anything) if any gradient is NaN/Inf.
  void step(std::span<DiffNode> params);
  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<NumArray> m_, v_;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t stage = 0;
  bool pseudo = false;
  LossBreakdown loss;
};

struct EmdTraceRecord {
  std::size_t step = 0;
  std::size_t stage = 0;
  char kind = 'A';           // 'A' attention, 'H' hidden state
  std::string encoding;      // "qa" or "lm"
  EmdResult result;
  LayerWeights omega_t, omega_s;  // weights the solve used
};

/// Everything a training run appends to as it goes.
struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EmdTraceRecord> emd_traces;
  std::vector<std::string> warnings;
  /// Optional: receives each stage's accepted pseudo-samples.
  std::function<void(std::size_t stage, const Corpus&)> pseudo_sink;
};

struct TrainState {
  Model student;
  std::optional<ModelSnapshot> teacher;
  std::vector<TaskSpec> task_history;
  MatchingWeights weights;
  std::size_t step_counter = 0;

  explicit TrainState(const ModelConfig& config)
      : student(config), weights(MatchingWeights::uniform(config.num_layers)) {}
};

/// Lead token for LM encoding and generation of a task under a token mode.
std::string lead_token(const TaskSpec& spec, TokenMode mode);

/// Interleave `pseudo_batches` among `real_batches`: true marks a pseudo
/// batch. Pseudo batches are spread evenly, each after a real batch.
std::vector<bool> interleave_schedule(std::size_t real_batches, std::size_t pseudo_batches);

/// Train the student on one new task (see README for the stage procedure).
void train_task(TrainState& state, const TaskSpec& spec, const Corpus& corpus, const HyperParams& hyper,
                TrainLog& log);

}  // namespace dfsd
