#include "dfsd/stream.hpp"

#include <fstream>
#include <set>

#include "dfsd/errors.hpp"

namespace dfsd {
namespace {

using json = nlohmann::json;

std::string token_mode_name(TokenMode m) { return m == TokenMode::Gen ? "gen" : "task"; }
std::string strategy_name(WeightStrategy s) { return s == WeightStrategy::Fixed ? "fixed" : "inverse_cost"; }

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

ModelConfig RunConfig::resolved_model() const {
  ModelConfig m = model;
  m.seed = hyper.seed;
  m.vocab_size = static_cast<std::uint32_t>(Vocabulary::standard().size());
  return m;
}

std::vector<TaskSpec> RunConfig::task_specs() const {
  std::vector<TaskSpec> specs;
  for (const auto& name : tasks) {
    TaskSpec s = standard_task(parse_rule(name));
    s.alphabet.clear();
    for (std::size_t i = 0; i < alphabet_size; ++i) s.alphabet.emplace_back(1, static_cast<char>('a' + i));
    s.min_len = min_len;
    s.max_len = max_len;
    specs.push_back(std::move(s));
  }
  return specs;
}

void RunConfig::validate() const {
  hyper.validate();
  resolved_model().validate();
  if (tasks.empty()) throw InvalidArgument("config: at least one task is required");
  std::set<std::string> seen;
  for (const auto& t : tasks) {
    parse_rule(t);
    if (!seen.insert(t).second) throw InvalidArgument("config: task '" + t + "' listed twice");
  }
  if (train_size == 0 || eval_size == 0) throw InvalidArgument("config: train_size and eval_size must be positive");
  if (alphabet_size < 2 || alphabet_size > 26) throw InvalidArgument("config: alphabet_size must lie in [2, 26]");
  if (min_len == 0 || min_len > max_len) throw InvalidArgument("config: need 1 <= min_len <= max_len");
  // Longest LM encoding: lead + context + question + [ANS] + answer + [EOS].
  if (1 + max_len + 1 + 1 + max_len + 1 > model.max_seq_len) {
    throw InvalidArgument("config: max_len too large for the model's max_seq_len");
  }
  if (!train_corpora.empty() && train_corpora.size() != tasks.size()) {
    throw InvalidArgument("config: train_corpora needs one path per task");
  }
  if (!eval_corpora.empty() && eval_corpora.size() != tasks.size()) {
    throw InvalidArgument("config: eval_corpora needs one path per task");
  }
}

RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
  static const std::set<std::string> known = {
      "gamma", "beta", "mu", "delta", "alpha", "temperature", "learning_rate", "epochs_per_task", "batch_size",
      "top_k", "weight_momentum", "seed", "mode", "emb_weight", "generation_temperature", "token_mode",
      "carry_weights", "weight_strategy", "trace_every", "model", "tasks", "train_size", "eval_size", "data_seed",
      "min_len", "max_len", "alphabet_size", "train_corpora", "eval_corpora"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw InvalidArgument("config: unknown key '" + key + "'");
  }
  RunConfig c;
  HyperParams& h = c.hyper;
  read_key(j, "gamma", h.gamma);
  read_key(j, "beta", h.beta);
  read_key(j, "mu", h.mu);
  read_key(j, "delta", h.delta);
  read_key(j, "alpha", h.alpha);
  read_key(j, "temperature", h.temperature);
  read_key(j, "learning_rate", h.learning_rate);
  read_key(j, "epochs_per_task", h.epochs_per_task);
  read_key(j, "batch_size", h.batch_size);
  read_key(j, "top_k", h.top_k);
  read_key(j, "weight_momentum", h.weight_momentum);
  read_key(j, "seed", h.seed);
  read_key(j, "emb_weight", h.emb_weight);
  read_key(j, "generation_temperature", h.generation_temperature);
  read_key(j, "carry_weights", h.carry_weights);
  read_key(j, "trace_every", h.trace_every);
  std::string s;
  if (j.contains("mode")) {
    read_key(j, "mode", s);
    h.mode = parse_mode(s);
  }
  if (j.contains("token_mode")) {
    read_key(j, "token_mode", s);
    if (s != "task" && s != "gen") throw InvalidArgument("config: token_mode must be \"task\" or \"gen\"");
    h.token_mode = s == "gen" ? TokenMode::Gen : TokenMode::Task;
  }
  if (j.contains("weight_strategy")) {
    read_key(j, "weight_strategy", s);
    if (s != "inverse_cost" && s != "fixed") {
      throw InvalidArgument("config: weight_strategy must be \"inverse_cost\" or \"fixed\"");
    }
    h.weight_strategy = s == "fixed" ? WeightStrategy::Fixed : WeightStrategy::InverseCost;
  }
  if (const auto it = j.find("model"); it != j.end()) {
    if (!it->is_object()) throw InvalidArgument("config: model must be an object");
    for (const auto& [key, value] : it->items()) {
      if (key != "num_layers" && key != "d_model" && key != "num_heads" && key != "max_seq_len") {
        throw InvalidArgument("config: unknown model key '" + key + "'");
      }
    }
    read_key(*it, "num_layers", c.model.num_layers);
    read_key(*it, "d_model", c.model.d_model);
    read_key(*it, "num_heads", c.model.num_heads);
    read_key(*it, "max_seq_len", c.model.max_seq_len);
  }
  read_key(j, "tasks", c.tasks);
  read_key(j, "train_size", c.train_size);
  read_key(j, "eval_size", c.eval_size);
  read_key(j, "data_seed", c.data_seed);
  read_key(j, "min_len", c.min_len);
  read_key(j, "max_len", c.max_len);
  read_key(j, "alphabet_size", c.alphabet_size);
  read_key(j, "train_corpora", c.train_corpora);
  read_key(j, "eval_corpora", c.eval_corpora);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what(), 0);
  }
  return parse_run_config(j);
}

nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  const HyperParams& h = c.hyper;
  nlohmann::ordered_json j;
  j["gamma"] = h.gamma;
  j["beta"] = h.beta;
  j["mu"] = h.mu;
  j["delta"] = h.delta;
  j["alpha"] = h.alpha;
  j["temperature"] = h.temperature;
  j["learning_rate"] = h.learning_rate;
  j["epochs_per_task"] = h.epochs_per_task;
  j["batch_size"] = h.batch_size;
  j["top_k"] = h.top_k;
  j["weight_momentum"] = h.weight_momentum;
  j["seed"] = h.seed;
  j["mode"] = mode_name(h.mode);
  j["emb_weight"] = h.emb_weight;
  j["generation_temperature"] = h.generation_temperature;
  j["token_mode"] = token_mode_name(h.token_mode);
  j["carry_weights"] = h.carry_weights;
  j["weight_strategy"] = strategy_name(h.weight_strategy);
  j["trace_every"] = h.trace_every;
  j["model"] = {{"num_layers", c.model.num_layers},
                {"d_model", c.model.d_model},
                {"num_heads", c.model.num_heads},
                {"max_seq_len", c.model.max_seq_len}};
  j["tasks"] = c.tasks;
  j["train_size"] = c.train_size;
  j["eval_size"] = c.eval_size;
  j["data_seed"] = c.data_seed;
  j["min_len"] = c.min_len;
  j["max_len"] = c.max_len;
  j["alphabet_size"] = c.alphabet_size;
  j["train_corpora"] = c.train_corpora;
  j["eval_corpora"] = c.eval_corpora;
  return j;
}

StreamData prepare_data(const RunConfig& config) {
  const auto specs = config.task_specs();
  StreamData data;
  for (std::size_t t = 0; t < specs.size(); ++t) {
    if (!config.train_corpora.empty()) {
      data.train.push_back(read_corpus(config.train_corpora[t]).corpus);
    } else {
      data.train.push_back(generate_task_data(specs[t], config.train_size, derive_seed(config.data_seed, t)));
    }
    if (!config.eval_corpora.empty()) {
      data.eval.push_back(read_corpus(config.eval_corpora[t]).corpus);
    } else {
      data.eval.push_back(
          generate_task_data(specs[t], config.eval_size, derive_seed(config.data_seed, (1ULL << 32) + t)));
    }
  }
  return data;
}

RunReport train_stream(const RunConfig& config, const StreamData& data, const StreamHooks& hooks) {
  config.validate();
  const auto specs = config.task_specs();
  if (data.train.size() != specs.size() || data.eval.size() != specs.size()) {
    throw InvalidArgument("train_stream: need one train and one held-out corpus per task");
  }
  RunReport report;
  report.tasks = config.tasks;
  report.config_echo = run_config_to_json(config);
  TrainState state(config.resolved_model());
  TrainLog log;
  log.pseudo_sink = hooks.pseudo_sink;
  for (std::size_t stage = 0; stage < specs.size(); ++stage) {
    if (hooks.progress) hooks.progress("stage " + std::to_string(stage + 1) + ": training " + specs[stage].name);
    train_task(state, specs[stage], data.train[stage], config.hyper, log);
    std::vector<std::optional<double>> row(specs.size());
    for (std::size_t t = 0; t <= stage; ++t) row[t] = exact_match(state.student, data.eval[t]);
    if (hooks.progress) {
      std::string msg = "stage " + std::to_string(stage + 1) + " accuracy:";
      for (std::size_t t = 0; t <= stage; ++t) msg += " " + specs[t].name + "=" + format_number(*row[t]);
      hooks.progress(msg);
    }
    report.accuracy_matrix.push_back(std::move(row));
    if (hooks.on_stage_end) hooks.on_stage_end(stage + 1, state.student);
  }
  report.loss_curves = std::move(log.steps);
  report.emd_traces = std::move(log.emd_traces);
  report.warnings = std::move(log.warnings);
  return report;
}

}  // namespace dfsd
