#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfsd/model.hpp"
#include "dfsd/rng.hpp"
#include "dfsd/tasks.hpp"

namespace dfsd {

struct PseudoBatch {
  std::vector<Sample> samples;
  std::map<std::string, std::size_t> per_task_counts;
  std::size_t rejected_count = 0;

  Corpus as_corpus() const;
};

/// Thrown when the retry budget runs out; carries whatever was accepted.
class DegradedGeneration : public std::runtime_error {
 public:
  DegradedGeneration(const std::string& msg, PseudoBatch partial)
      : std::runtime_error(msg), partial_(std::move(partial)) {}
  const PseudoBatch& partial() const { return partial_; }

 private:
  PseudoBatch partial_;
};

/// Split round(gamma * new_task_size) pseudo-samples over the tau - 1
/// previous tasks, earliest first; earlier tasks take the remainder.
/// gamma in (0, 1], new_task_size >= 1, tau >= 2.
std::vector<std::size_t> allocate_counts(double gamma, std::size_t new_task_size, std::size_t tau);

struct SamplingOptions {
  std::size_t top_k = 20;
  double temperature = 1.0;
  std::size_t max_len = 64;
};

/// Draw one token from the top-k of `logits / temperature`.
int sample_top_k(std::span<const double> logits, const SamplingOptions& opts, Rng& rng);

/// Autoregressively sample from `lead_token` until [EOS] or max_len and keep
/// the well-formed results (see parse_sequence). Rejected draws are retried
/// until 10 * count rejections; after that DegradedGeneration is thrown.
/// `task` names the samples; when empty each sample takes the name of its
/// question word (shared-token mode). Correctness of answers is not checked.
PseudoBatch generate_pseudo(const Model& teacher, const std::string& lead_token, const std::string& task,
                            std::size_t count, const SamplingOptions& opts, std::uint64_t seed);

}  // namespace dfsd
