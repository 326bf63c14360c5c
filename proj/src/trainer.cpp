#include "dfsd/trainer.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "dfsd/errors.hpp"
#include "dfsd/pseudo.hpp"

namespace dfsd {

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Dfsd: return "dfsd";
    case Mode::ReplayOnly: return "replay_only";
    case Mode::Finetune: return "finetune";
    case Mode::DfsdNoSd: return "dfsd_no_sd";
    case Mode::DfsdNoHda: return "dfsd_no_hda";
  }
  return "unknown";
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::Dfsd, Mode::ReplayOnly, Mode::Finetune, Mode::DfsdNoSd, Mode::DfsdNoHda}) {
    if (mode_name(m) == s) return m;
  }
  throw InvalidArgument("unknown mode '" + s + "'");
}

void HyperParams::validate() const {
  auto fail = [](const std::string& what) { throw InvalidArgument("HyperParams: " + what); };
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(beta >= 0.0)) fail("beta must be >= 0");
  if (!(mu >= 0.0)) fail("mu must be >= 0");
  if (!(delta >= 0.0)) fail("delta must be >= 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must lie in [0, 1]");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (epochs_per_task == 0) fail("epochs_per_task must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (top_k == 0) fail("top_k must be positive");
  if (!(weight_momentum >= 0.0 && weight_momentum < 1.0)) fail("weight_momentum must lie in [0, 1)");
  if (!(emb_weight >= 0.0)) fail("emb_weight must be >= 0");
  if (!(generation_temperature > 0.0)) fail("generation_temperature must be positive");
  if (trace_every == 0) fail("trace_every must be positive");
}

ObjectiveWeights HyperParams::objective() const {
  ObjectiveWeights w{beta, mu, delta};
  if (mode == Mode::ReplayOnly || mode == Mode::Finetune || mode == Mode::DfsdNoSd) w.mu = 0.0;
  if (mode == Mode::ReplayOnly || mode == Mode::Finetune || mode == Mode::DfsdNoHda) w.delta = 0.0;
  return w;
}

// ---------------------------------------------------------------------------

void Adam::step(std::span<DiffNode> params) {
  for (const auto& p : params) {
    if (!p.gradient.all_finite()) throw NonFiniteError("optimizer: non-finite gradient");
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.shape(), 0.0);
      v_.emplace_back(p.value.shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw InvalidArgument("optimizer: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k].value;
    const auto& g = params[k].gradient;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------

std::string lead_token(const TaskSpec& spec, TokenMode mode) {
  return mode == TokenMode::Gen ? std::string("[GEN]") : spec.task_token;
}

std::vector<bool> interleave_schedule(std::size_t real_batches, std::size_t pseudo_batches) {
  std::vector<bool> out;
  if (real_batches == 0) return std::vector<bool>(pseudo_batches, true);
  for (std::size_t r = 0; r < real_batches; ++r) {
    out.push_back(false);
    const std::size_t due = (r + 1) * pseudo_batches / real_batches - r * pseudo_batches / real_batches;
    out.insert(out.end(), due, true);
  }
  return out;
}

namespace {

struct ReplayItem {
  Sample sample;
  std::string lead;
};

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<long>(i),
                         order.begin() + static_cast<long>(std::min(n, i + batch_size)));
  }
  return batches;
}

Var batch_mean(Tape& tape, const std::vector<Var>& terms) {
  const std::vector<double> w(terms.size(), 1.0 / static_cast<double>(terms.size()));
  return weighted_sum(tape, terms, w);
}

std::string describe_batch(const std::vector<const ReplayItem*>& items) {
  std::ostringstream out;
  out << "offending batch:";
  for (const auto* it : items) {
    out << "\n  [" << it->sample.task << "] " << join_symbols(it->sample.context) << " | "
        << join_symbols(it->sample.question) << " | " << join_symbols(it->sample.answer);
  }
  return out.str();
}

// Per-encoding tensors of one sample within a batch tape.
struct EncodedPass {
  Encoded enc;
  std::vector<std::size_t> positions;
  TracedForward student;
  std::optional<ForwardResult> teacher;
};

}  // namespace

void train_task(TrainState& state, const TaskSpec& spec, const Corpus& corpus, const HyperParams& hyper,
                TrainLog& log) {
  hyper.validate();
  if (corpus.samples.empty()) throw InvalidArgument("train_task: corpus is empty");
  const std::size_t stage = state.task_history.size() + 1;
  const std::size_t max_len = state.student.config().max_seq_len;
  const ObjectiveWeights obj = hyper.objective();

  std::vector<ReplayItem> real;
  real.reserve(corpus.samples.size());
  const std::string real_lead = lead_token(spec, hyper.token_mode);
  for (const auto& s : corpus.samples) real.push_back({s, real_lead});

  std::vector<ReplayItem> replay;
  std::optional<Model> teacher;
  if (!state.task_history.empty()) {
    state.teacher = state.student.snapshot();
    if (hyper.uses_pseudo()) {
      teacher.emplace(Model::restore(*state.teacher));
      const auto counts = allocate_counts(hyper.gamma, corpus.samples.size(), stage);
      const SamplingOptions opts{hyper.top_k, hyper.generation_temperature, max_len};
      for (std::size_t i = 0; i < state.task_history.size(); ++i) {
        const TaskSpec& prev = state.task_history[i];
        const std::string lead = lead_token(prev, hyper.token_mode);
        const std::string name = hyper.token_mode == TokenMode::Task ? prev.name : std::string();
        PseudoBatch batch;
        try {
          batch = generate_pseudo(*teacher, lead, name, counts[i], opts, derive_seed(hyper.seed, 10000 + stage * 64 + i));
        } catch (const DegradedGeneration& e) {
          log.warnings.push_back("stage " + std::to_string(stage) + ": " + e.what());
          batch = e.partial();
        }
        if (log.pseudo_sink && !batch.samples.empty()) log.pseudo_sink(stage, batch.as_corpus());
        for (auto& s : batch.samples) replay.push_back({std::move(s), lead});
      }
    }
  }
  if (!hyper.carry_weights || state.task_history.empty()) {
    state.weights = MatchingWeights::uniform(state.student.config().num_layers);
  }

  const bool use_sd = obj.mu != 0.0 && teacher.has_value();
  const bool use_hda = obj.delta != 0.0 && teacher.has_value();
  Adam optimizer(hyper.learning_rate);
  Rng rng(derive_seed(hyper.seed, 20000 + stage));
  std::size_t last_trace_bucket = std::numeric_limits<std::size_t>::max();

  for (std::size_t epoch = 0; epoch < hyper.epochs_per_task; ++epoch) {
    const auto real_batches = make_batches(real.size(), hyper.batch_size, rng);
    const auto replay_batches = make_batches(replay.size(), hyper.batch_size, rng);
    const auto schedule = interleave_schedule(real_batches.size(), replay_batches.size());
    std::size_t next_real = 0, next_replay = 0;

    for (bool is_replay : schedule) {
      const auto& idx = is_replay ? replay_batches[next_replay++] : real_batches[next_real++];
      std::vector<const ReplayItem*> items;
      for (std::size_t i : idx) items.push_back(is_replay ? &replay[i] : &real[i]);

      state.student.zero_grad();
      Tape tape;
      std::vector<EncodedPass> qa(items.size()), lm(items.size());
      std::vector<Var> qa_ce, lm_ce, emb_qa, emb_lm, hda_qa, hda_lm;
      const bool distill = is_replay && (use_sd || use_hda);
      for (std::size_t b = 0; b < items.size(); ++b) {
        const Sample& s = items[b]->sample;
        qa[b].enc = encode_qa(s, max_len);
        lm[b].enc = encode_lm(s, items[b]->lead, max_len);
        for (EncodedPass* p : {&qa[b], &lm[b]}) {
          p->positions = p->enc.target_positions();
          p->student = state.student.forward(tape, p->enc.tokens, true);
          if (distill) p->teacher = teacher->forward(p->enc.tokens);
        }
        qa_ce.push_back(next_token_cross_entropy(qa[b].student.logits, qa[b].enc.tokens, qa[b].positions));
        lm_ce.push_back(next_token_cross_entropy(lm[b].student.logits, lm[b].enc.tokens, lm[b].positions));
        if (distill && use_sd) {
          emb_qa.push_back(embedding_loss(qa[b].teacher->trace.embeddings, qa[b].student.embeddings));
          emb_lm.push_back(embedding_loss(lm[b].teacher->trace.embeddings, lm[b].student.embeddings));
        }
        if (distill && use_hda) {
          for (auto [p, out] : {std::pair{&qa[b], &hda_qa}, std::pair{&lm[b], &hda_lm}}) {
            out->push_back(hda_loss(prediction_rows(p->teacher->logits, p->positions),
                                    prediction_rows(p->student.logits, p->positions),
                                    target_tokens(p->enc.tokens, p->positions), hyper.alpha, hyper.temperature));
          }
        }
      }

      LossBreakdown parts;
      std::vector<Var> terms;
      std::vector<double> factors;
      Var qa_mean = batch_mean(tape, qa_ce);
      Var lm_mean = batch_mean(tape, lm_ce);
      terms = {qa_mean, lm_mean};
      factors = {1.0, obj.beta};
      parts.qa_ce = qa_mean.scalar();
      parts.lm_ce = lm_mean.scalar();

      std::vector<SdResult> sd_diag;
      if (distill && use_sd) {
        for (auto [passes, emb, slot] :
             {std::tuple{&qa, &emb_qa, &parts.sd_qa}, std::tuple{&lm, &emb_lm, &parts.sd_lm}}) {
          std::vector<const LayerTrace*> tt;
          std::vector<const TracedForward*> st;
          for (const auto& p : *passes) {
            tt.push_back(&p.teacher->trace);
            st.push_back(&p.student);
          }
          SdTerm sd = sd_loss(tape, tt, st, state.weights);
          Var emb_mean = batch_mean(tape, *emb);
          const std::vector<Var> bucket = {sd.value, emb_mean};
          const std::vector<double> bucket_w = {1.0, hyper.emb_weight};
          Var total_sd = weighted_sum(tape, bucket, bucket_w);
          *slot = total_sd.scalar();
          parts.emb += emb_mean.scalar();
          terms.push_back(total_sd);
          factors.push_back(obj.mu);
          sd_diag.push_back(std::move(sd.diagnostics));
        }
      }
      if (distill && use_hda) {
        Var hq = batch_mean(tape, hda_qa);
        Var hl = batch_mean(tape, hda_lm);
        parts.hda_qa = hq.scalar();
        parts.hda_lm = hl.scalar();
        terms.push_back(hq);
        terms.push_back(hl);
        factors.push_back(obj.delta);
        factors.push_back(obj.delta);
      }
      Var total = weighted_sum(tape, terms, factors);
      parts = total_loss(parts, obj);
      if (!std::isfinite(total.scalar())) {
        throw NonFiniteError("non-finite loss at step " + std::to_string(state.step_counter) + "; " +
                             describe_batch(items));
      }
      tape.backward(total);
      try {
        optimizer.step(state.student.parameters());
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " at step " + std::to_string(state.step_counter) + "; " +
                             describe_batch(items));
      }

      if (!sd_diag.empty()) {
        const std::size_t bucket = state.step_counter / hyper.trace_every;
        if (bucket != last_trace_bucket) {
          last_trace_bucket = bucket;
          const char* enc_names[] = {"qa", "lm"};
          for (std::size_t e = 0; e < sd_diag.size(); ++e) {
            log.emd_traces.push_back({state.step_counter, stage, 'A', enc_names[e], sd_diag[e].attention,
                                      state.weights.attention_t, state.weights.attention_s});
            log.emd_traces.push_back({state.step_counter, stage, 'H', enc_names[e], sd_diag[e].hidden,
                                      state.weights.hidden_t, state.weights.hidden_s});
          }
        }
        std::vector<EmdResult> att, hid;
        for (const auto& d : sd_diag) {
          att.push_back(d.attention);
          hid.push_back(d.hidden);
        }
        auto& w = state.weights;
        const double m = hyper.weight_momentum;
        const auto strat = hyper.weight_strategy;
        w.attention_t = update_weights(w.attention_t, att, m, Side::Teacher, strat);
        w.attention_s = update_weights(w.attention_s, att, m, Side::Student, strat);
        w.hidden_t = update_weights(w.hidden_t, hid, m, Side::Teacher, strat);
        w.hidden_s = update_weights(w.hidden_s, hid, m, Side::Student, strat);
      }
      log.steps.push_back({state.step_counter, stage, is_replay, parts});
      ++state.step_counter;
    }
  }
  state.task_history.push_back(spec);
}

}  // namespace dfsd
