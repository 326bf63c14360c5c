#pragma once

#include <cstdint>
#include <string>

#include "dfsd/autodiff.hpp"

namespace dfsd {

enum class LossTerm { Embedding, SelfDistillation, Hda, Total };

std::string loss_term_name(LossTerm term);

/// Finite-difference check of one objective term on a 2-layer, d_model=8,
/// V=16 model against a perturbed frozen teacher, over a two-sample batch of
/// QA and LM sequences. Transport flows are solved once at the base point
/// and held fixed.
GradCheckResult check_loss_gradients(LossTerm term, std::uint64_t seed = 0, std::size_t coords = 200,
                                     double step = 1e-6);

}  // namespace dfsd
