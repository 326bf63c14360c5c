#include "dfsd/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfsd/errors.hpp"

namespace dfsd {

Corpus PseudoBatch::as_corpus() const {
  Corpus c;
  c.samples = samples;
  c.provenance = Provenance::Pseudo;
  if (per_task_counts.size() == 1) c.task_id = per_task_counts.begin()->first;
  return c;
}

std::vector<std::size_t> allocate_counts(double gamma, std::size_t new_task_size, std::size_t tau) {
  if (tau < 2) throw InvalidArgument("allocate_counts: tau must be at least 2");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InvalidArgument("allocate_counts: gamma must lie in (0, 1]");
  if (new_task_size == 0) throw InvalidArgument("allocate_counts: new task is empty");
  const auto total = static_cast<std::size_t>(std::llround(gamma * static_cast<double>(new_task_size)));
  const std::size_t tasks = tau - 1;
  std::vector<std::size_t> counts(tasks, total / tasks);
  for (std::size_t i = 0; i < total % tasks; ++i) ++counts[i];
  return counts;
}

int sample_top_k(std::span<const double> logits, const SamplingOptions& opts, Rng& rng) {
  if (logits.empty()) throw InvalidArgument("sample_top_k: empty logits");
  if (!(opts.temperature > 0.0)) throw InvalidArgument("sample_top_k: temperature must be positive");
  const std::size_t k = std::clamp<std::size_t>(opts.top_k, 1, logits.size());
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(), [&](int a, int b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  std::vector<double> p(k);
  const double mx = logits[order[0]];
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    p[i] = std::exp((logits[order[i]] - mx) / opts.temperature);
    sum += p[i];
  }
  double u = rng.uniform() * sum;
  for (std::size_t i = 0; i < k; ++i) {
    if (u < p[i]) return order[i];
    u -= p[i];
  }
  return order[k - 1];
}

PseudoBatch generate_pseudo(const Model& teacher, const std::string& lead_token, const std::string& task,
                            std::size_t count, const SamplingOptions& opts, std::uint64_t seed) {
  const auto& vocab = Vocabulary::standard();
  const int lead = vocab.id(lead_token);
  const std::size_t max_len = std::min<std::size_t>(opts.max_len, teacher.config().max_seq_len);
  Rng rng(seed);
  PseudoBatch batch;
  while (batch.samples.size() < count) {
    if (batch.rejected_count >= 10 * count) {
      throw DegradedGeneration("generated " + std::to_string(batch.samples.size()) + " of " + std::to_string(count) +
                                   " pseudo-samples from " + lead_token + " before the retry budget ran out",
                               std::move(batch));
    }
    std::vector<int> seq{lead};
    while (seq.size() < max_len) {
      const int next = sample_top_k(teacher.next_token_logits(seq), opts, rng);
      seq.push_back(next);
      if (next == Vocabulary::kEos) break;
    }
    auto parsed = parse_sequence(std::span<const int>(seq).subspan(1), task);
    if (!parsed) {
      ++batch.rejected_count;
      continue;
    }
    if (parsed->task.empty()) parsed->task = parsed->question.front();
    ++batch.per_task_counts[parsed->task];
    batch.samples.push_back(std::move(*parsed));
  }
  return batch;
}

}  // namespace dfsd
