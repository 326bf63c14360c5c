#include "dfsd/losses.hpp"

#include <cmath>

#include "dfsd/errors.hpp"

namespace dfsd {

LossBreakdown total_loss(const LossBreakdown& c, const ObjectiveWeights& w) {
  LossBreakdown out = c;
  out.total = c.qa_ce + w.beta * c.lm_ce + w.mu * (c.sd_qa + c.sd_lm) + w.delta * (c.hda_qa + c.hda_lm);
  return out;
}

MatchingWeights MatchingWeights::uniform(std::size_t k) {
  const auto u = LayerWeights::uniform(k);
  return {u, u, u, u};
}

namespace {

NumArray feature_softmax(const NumArray& hidden) { return temp_softmax(hidden, 1.0); }

void check_layers(std::size_t teacher, std::size_t student) {
  if (teacher == 0 || teacher != student) throw InvalidArgument("sd_loss: teacher and student need the same K layers");
}

}  // namespace

double embedding_loss(const LayerTrace& teacher, const LayerTrace& student) {
  if (!teacher.embeddings.same_shape(student.embeddings)) throw InvalidArgument("embedding_loss: shape mismatch");
  return mse(teacher.embeddings, student.embeddings) / static_cast<double>(teacher.embeddings.cols());
}

SdResult sd_loss(const LayerTrace& teacher, const LayerTrace& student, const MatchingWeights& w) {
  check_layers(teacher.attention.size(), student.attention.size());
  check_layers(teacher.hidden.size(), student.hidden.size());
  std::vector<NumArray> ht, hs;
  for (const auto& h : teacher.hidden) ht.push_back(feature_softmax(h));
  for (const auto& h : student.hidden) hs.push_back(feature_softmax(h));
  SdResult r;
  r.attention = earth_movers(layer_cost(teacher.attention, student.attention), w.attention_t, w.attention_s);
  r.hidden = earth_movers(layer_cost(ht, hs), w.hidden_t, w.hidden_s);
  r.value = r.attention.value + r.hidden.value;
  return r;
}

NumArray hda_targets(const NumArray& teacher_logits, std::span<const int> targets, double alpha,
                     double temperature) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("hda_loss: alpha must lie in [0, 1]");
  if (teacher_logits.rows() != targets.size()) throw InvalidArgument("hda_loss: one logit row per target required");
  NumArray mixed = temp_softmax(teacher_logits, temperature);
  for (std::size_t r = 0; r < mixed.rows(); ++r) {
    auto row = mixed.row(r);
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= row.size()) {
      throw InvalidArgument("hda_loss: target token out of range");
    }
    for (double& v : row) v *= alpha;
    row[static_cast<std::size_t>(targets[r])] += 1.0 - alpha;
  }
  return mixed;
}

double hda_loss(const NumArray& teacher_logits, const NumArray& student_logits, std::span<const int> targets,
                double alpha, double temperature) {
  Tape tape;
  return hda_loss(teacher_logits, tape.constant_ref(student_logits), targets, alpha, temperature).scalar();
}

Var embedding_loss(const NumArray& teacher_embeddings, Var student_embeddings) {
  const double m = static_cast<double>(teacher_embeddings.cols());
  return scale(squared_distance(teacher_embeddings, student_embeddings), 1.0 / m);
}

namespace {

// d_ij as tape scalars averaged over the batch, plus their values.
struct CostVars {
  std::vector<Var> d;  // row-major K x K
  CostMatrix values;
};

CostVars batch_costs(Tape& tape, const std::vector<std::vector<const NumArray*>>& teacher,
                     const std::vector<std::vector<Var>>& student) {
  const std::size_t batch = teacher.size();
  const std::size_t k = teacher.front().size();
  CostVars out{{}, CostMatrix{NumArray::matrix(k, k)}};
  const std::vector<double> mean(batch, 1.0 / static_cast<double>(batch));
  std::vector<Var> per_sample(batch);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t b = 0; b < batch; ++b) per_sample[b] = sym_kl_rows(*teacher[b][i], student[b][j]);
      Var d = weighted_sum(tape, per_sample, mean);
      out.values.d.at(i, j) = d.scalar();
      out.d.push_back(d);
    }
  }
  return out;
}

Var emd_term(Tape& tape, const CostVars& costs, const FlowMatrix& flow) {
  double total = 0.0;
  for (double f : flow.f.values()) total += f;
  if (!(total > 0.0)) throw InvalidArgument("sd_loss: total flow is zero");
  std::vector<double> weights(flow.f.values().begin(), flow.f.values().end());
  for (double& v : weights) v /= total;
  return weighted_sum(tape, costs.d, weights);
}

}  // namespace

SdTerm sd_loss(Tape& tape, std::span<const LayerTrace* const> teacher, std::span<const TracedForward* const> student,
               const MatchingWeights& w, const FrozenFlows* frozen) {
  if (teacher.empty() || teacher.size() != student.size()) {
    throw InvalidArgument("sd_loss: need one teacher trace per student trace");
  }
  std::vector<std::vector<const NumArray*>> ta, th;
  std::vector<std::vector<Var>> sa, sh;
  std::vector<std::vector<NumArray>> teacher_hidden_probs(teacher.size());
  for (std::size_t b = 0; b < teacher.size(); ++b) {
    check_layers(teacher[b]->attention.size(), student[b]->attention.size());
    check_layers(teacher[b]->hidden.size(), student[b]->hidden.size());
    auto& thp = teacher_hidden_probs[b];
    for (const auto& h : teacher[b]->hidden) thp.push_back(feature_softmax(h));
    ta.emplace_back();
    th.emplace_back();
    for (const auto& a : teacher[b]->attention) ta.back().push_back(&a);
    for (const auto& h : thp) th.back().push_back(&h);
    sa.push_back(student[b]->attention);
    sh.emplace_back();
    for (const Var& h : student[b]->hidden) sh.back().push_back(row_softmax(h));
  }

  const CostVars attention_costs = batch_costs(tape, ta, sa);
  const CostVars hidden_costs = batch_costs(tape, th, sh);

  SdTerm term;
  auto& diag = term.diagnostics;
  diag.attention.cost = attention_costs.values;
  diag.hidden.cost = hidden_costs.values;
  if (frozen) {
    diag.attention.flow = frozen->attention;
    diag.hidden.flow = frozen->hidden;
  } else {
    diag.attention.flow = solve_transport(attention_costs.values, w.attention_t, w.attention_s);
    diag.hidden.flow = solve_transport(hidden_costs.values, w.hidden_t, w.hidden_s);
  }
  diag.attention.value = emd_value(diag.attention.flow, diag.attention.cost);
  diag.hidden.value = emd_value(diag.hidden.flow, diag.hidden.cost);

  const std::vector<Var> parts = {emd_term(tape, attention_costs, diag.attention.flow),
                                  emd_term(tape, hidden_costs, diag.hidden.flow)};
  const std::vector<double> ones = {1.0, 1.0};
  term.value = weighted_sum(tape, parts, ones);
  diag.value = term.value.scalar();
  return term;
}

Var hda_loss(const NumArray& teacher_logits, Var student_logits, std::span<const int> targets, double alpha,
             double temperature) {
  if (!teacher_logits.same_shape(student_logits.value())) throw InvalidArgument("hda_loss: logits shape mismatch");
  return soft_cross_entropy(student_logits, hda_targets(teacher_logits, targets, alpha, temperature), temperature);
}

NumArray prediction_rows(const NumArray& logits, std::span<const std::size_t> positions) {
  NumArray out = NumArray::matrix(positions.size(), logits.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] == 0 || positions[i] > logits.rows()) throw InvalidArgument("prediction_rows: bad position");
    const auto src = logits.row(positions[i] - 1);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Var prediction_rows(Var logits, std::span<const std::size_t> positions) {
  std::vector<int> rows;
  for (std::size_t p : positions) {
    if (p == 0) throw InvalidArgument("prediction_rows: bad position");
    rows.push_back(static_cast<int>(p - 1));
  }
  return gather_rows(logits, rows);
}

std::vector<int> target_tokens(std::span<const int> tokens, std::span<const std::size_t> positions) {
  std::vector<int> out;
  for (std::size_t p : positions) out.push_back(tokens[p]);
  return out;
}

}  // namespace dfsd
