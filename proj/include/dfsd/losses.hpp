#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dfsd/autodiff.hpp"
#include "dfsd/emd.hpp"
#include "dfsd/model.hpp"

namespace dfsd {

/// Per-step loss components. sd_qa / sd_lm already include the weighted
/// embedding term; `emb` is reported separately for inspection only.
struct LossBreakdown {
  double qa_ce = 0.0;
  double lm_ce = 0.0;
  double emb = 0.0;
  double sd_qa = 0.0;
  double sd_lm = 0.0;
  double hda_qa = 0.0;
  double hda_lm = 0.0;
  double total = 0.0;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// Factors of the combined objective.
struct ObjectiveWeights {
  double beta = 0.25;  // LM task
  double mu = 0.5;     // self-distillation
  double delta = 0.08; // hidden data augmentation
};

/// total = qa_ce + beta*lm_ce + mu*(sd_qa + sd_lm) + delta*(hda_qa + hda_lm).
/// Copies the components and fills in `total`.
LossBreakdown total_loss(const LossBreakdown& components, const ObjectiveWeights& w);

/// Teacher/student weight pairs for the attention and hidden-state matchings.
struct MatchingWeights {
  LayerWeights attention_t, attention_s;
  LayerWeights hidden_t, hidden_s;

  static MatchingWeights uniform(std::size_t k);
};

struct SdResult {
  double value = 0.0;
  EmdResult attention;
  EmdResult hidden;
};

/// (1/M) * sum_i ||e_i^T - e_i^S||^2 with M the embedding width. Summed, not
/// averaged, over positions.
double embedding_loss(const LayerTrace& teacher, const LayerTrace& student);

/// EMD over head-averaged attention plus EMD over hidden states (each hidden
/// row passed through a softmax over features first).
SdResult sd_loss(const LayerTrace& teacher, const LayerTrace& student, const MatchingWeights& w);

/// Mixed targets alpha * softmax(teacher / T) + (1 - alpha) * onehot(token),
/// one row per target.
NumArray hda_targets(const NumArray& teacher_logits, std::span<const int> targets, double alpha, double temperature);

/// Mean over rows of -(mixed target) . log clamp(softmax(student / T), 1e-8).
/// Logit rows correspond one-to-one with `targets`.
double hda_loss(const NumArray& teacher_logits, const NumArray& student_logits, std::span<const int> targets,
                double alpha, double temperature);

// ---------------------------------------------------------------------------
// Tape versions used by the trainer. The teacher side is always constant.

Var embedding_loss(const NumArray& teacher_embeddings, Var student_embeddings);

/// Flows to reuse instead of re-solving, e.g. to hold them fixed in a
/// finite-difference check.
struct FrozenFlows {
  FlowMatrix attention;
  FlowMatrix hidden;
};

struct SdTerm {
  Var value;
  SdResult diagnostics;
};

/// Batch self-distillation: cost d_ij is the mean over the batch of the
/// per-sample layer costs; one transport solve per matrix kind. Flows and
/// weights are constants; gradients reach the student only through d_ij.
SdTerm sd_loss(Tape& tape, std::span<const LayerTrace* const> teacher, std::span<const TracedForward* const> student,
               const MatchingWeights& w, const FrozenFlows* frozen = nullptr);

Var hda_loss(const NumArray& teacher_logits, Var student_logits, std::span<const int> targets, double alpha,
             double temperature);

/// Rows `positions[i] - 1` of a logits array: the predictions of each target.
NumArray prediction_rows(const NumArray& logits, std::span<const std::size_t> positions);
Var prediction_rows(Var logits, std::span<const std::size_t> positions);
/// tokens[positions[i]].
std::vector<int> target_tokens(std::span<const int> tokens, std::span<const std::size_t> positions);

}  // namespace dfsd
