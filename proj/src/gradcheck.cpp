#include "dfsd/gradcheck.hpp"

#include <optional>

#include "dfsd/losses.hpp"
#include "dfsd/model.hpp"
#include "dfsd/rng.hpp"

namespace dfsd {

std::string loss_term_name(LossTerm term) {
  switch (term) {
    case LossTerm::Embedding: return "embedding";
    case LossTerm::SelfDistillation: return "self_distillation";
    case LossTerm::Hda: return "hda";
    case LossTerm::Total: return "total";
  }
  return "unknown";
}

namespace {

struct ToySequence {
  std::vector<int> tokens;
  std::vector<std::size_t> positions;
};

struct ToyProblem {
  Model student;
  Model teacher;
  std::vector<ToySequence> qa, lm;
  MatchingWeights weights;
  std::optional<FrozenFlows> flows_qa, flows_lm;
};

ToyProblem make_problem(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 16;
  cfg.seed = seed;
  ToyProblem p{Model(cfg), Model(cfg), {}, {}, MatchingWeights::uniform(2), {}, {}};
  Rng rng(derive_seed(seed, 1));
  // Larger weights than the 0.02 init so attention and hidden rows are far
  // from uniform and the costs are well conditioned.
  for (auto& node : p.student.parameters()) {
    for (double& v : node.value.values()) v += 0.3 * rng.normal();
  }
  p.teacher.load(p.student.snapshot());
  for (auto& node : p.teacher.parameters()) {
    for (double& v : node.value.values()) v += 0.1 * rng.normal();
  }
  for (int b = 0; b < 2; ++b) {
    ToySequence qa;
    for (int t = 0; t < 7; ++t) qa.tokens.push_back(static_cast<int>(rng.below(16)));
    qa.positions = {4, 5, 6};
    ToySequence lm;
    lm.tokens.push_back(3 + b);
    lm.tokens.insert(lm.tokens.end(), qa.tokens.begin(), qa.tokens.end());
    for (std::size_t t = 1; t < lm.tokens.size(); ++t) lm.positions.push_back(t);
    p.qa.push_back(std::move(qa));
    p.lm.push_back(std::move(lm));
  }
  p.weights.attention_t = {{0.6, 0.4}};
  p.weights.attention_s = {{0.3, 0.7}};
  p.weights.hidden_t = {{0.45, 0.55}};
  p.weights.hidden_s = {{0.5, 0.5}};
  return p;
}

struct Terms {
  Var emb, sd, hda, total;
};

Terms build(Tape& tape, ToyProblem& p) {
  auto mean = [&](const std::vector<Var>& v) {
    return weighted_sum(tape, v, std::vector<double>(v.size(), 1.0 / static_cast<double>(v.size())));
  };
  // Per encoding (QA, LM): cross-entropy, embedding, SD and HDA terms.
  Var ce[2], emb[2], sd[2], hda[2];
  for (int e = 0; e < 2; ++e) {
    auto& seqs = e == 0 ? p.qa : p.lm;
    std::vector<ForwardResult> teacher;
    std::vector<TracedForward> student;
    std::vector<Var> ce_s, emb_s, hda_s;
    for (const auto& s : seqs) {
      teacher.push_back(p.teacher.forward(s.tokens));
      student.push_back(p.student.forward(tape, s.tokens, true));
      ce_s.push_back(next_token_cross_entropy(student.back().logits, s.tokens, s.positions));
      emb_s.push_back(embedding_loss(teacher.back().trace.embeddings, student.back().embeddings));
      hda_s.push_back(hda_loss(prediction_rows(teacher.back().logits, s.positions),
                               prediction_rows(student.back().logits, s.positions),
                               target_tokens(s.tokens, s.positions), 0.9, 2.0));
    }
    std::vector<const LayerTrace*> tt;
    std::vector<const TracedForward*> st;
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      tt.push_back(&teacher[b].trace);
      st.push_back(&student[b]);
    }
    auto& frozen = e == 0 ? p.flows_qa : p.flows_lm;
    SdTerm term = sd_loss(tape, tt, st, p.weights, frozen ? &*frozen : nullptr);
    if (!frozen) frozen = FrozenFlows{term.diagnostics.attention.flow, term.diagnostics.hidden.flow};
    ce[e] = mean(ce_s);
    emb[e] = mean(emb_s);
    sd[e] = term.value;
    hda[e] = mean(hda_s);
  }
  auto sum2 = [&](Var a, Var b) { return weighted_sum(tape, std::vector<Var>{a, b}, std::vector<double>{1.0, 1.0}); };
  Terms t;
  t.emb = sum2(emb[0], emb[1]);
  t.sd = sum2(sd[0], sd[1]);
  t.hda = sum2(hda[0], hda[1]);
  // qa + beta*lm + mu*(sd_qa + emb_qa + sd_lm + emb_lm) + delta*(hda_qa + hda_lm)
  const std::vector<Var> all = {ce[0], ce[1], t.sd, t.emb, t.hda};
  t.total = weighted_sum(tape, all, std::vector<double>{1.0, 0.25, 0.5, 0.5, 0.08});
  return t;
}

}  // namespace

GradCheckResult check_loss_gradients(LossTerm term, std::uint64_t seed, std::size_t coords, double step) {
  ToyProblem problem = make_problem(seed);
  {
    Tape warm;
    build(warm, problem);  // freezes the flows at the base point
  }
  std::vector<DiffNode*> params;
  for (auto& node : problem.student.parameters()) params.push_back(&node);
  auto loss_fn = [&](Tape& tape) {
    const Terms t = build(tape, problem);
    switch (term) {
      case LossTerm::Embedding: return t.emb;
      case LossTerm::SelfDistillation: return t.sd;
      case LossTerm::Hda: return t.hda;
      case LossTerm::Total: return t.total;
    }
    return t.total;
  };
  return grad_check(loss_fn, params, step, coords, derive_seed(seed, 2));
}

}  // namespace dfsd
