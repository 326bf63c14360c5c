#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dfsd {

enum class Rule { Copy, Reverse, Shift, Sort, Parity };

std::string_view rule_name(Rule rule);
/// Case-insensitive lookup; throws InvalidArgument for unknown names.
Rule parse_rule(std::string_view name);

using Symbols = std::vector<std::string>;

/// One QA-format datum. All symbol strings use the shared vocabulary.
struct Sample {
  Symbols context;
  Symbols question;
  Symbols answer;
  std::string task;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct TaskSpec {
  std::string name;        // also the corpus task id
  std::string task_token;  // reserved lead symbol for LM encoding and generation
  Rule rule = Rule::Copy;
  Symbols alphabet;        // context symbols
  std::size_t min_len = 2;
  std::size_t max_len = 5;
  int shift = 1;           // SHIFT only
};

/// The built-in suite spec for a rule: name, task token, alphabet a..h,
/// context lengths 2..5.
TaskSpec standard_task(Rule rule);

enum class Provenance { Real, Pseudo };

struct Corpus {
  std::vector<Sample> samples;
  Provenance provenance = Provenance::Real;
  std::string task_id;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Fixed symbol table shared by every task: special tokens first, then one
/// task token per rule, the question words, parity answers and the letters.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  static constexpr int kAns = 0;
  static constexpr int kEos = 1;
  static constexpr int kGen = 2;

  std::size_t size() const { return symbols_.size(); }
  int id(std::string_view symbol) const;  // throws InvalidArgument if unknown
  std::optional<int> find(std::string_view symbol) const;
  const std::string& symbol(int id) const;

  bool is_task_token(int id) const;
  bool is_special(int id) const;  // [ANS], [EOS], [GEN] or a task token
  bool is_question_word(int id) const;
  /// Task token symbol for a rule, e.g. "<copy>".
  std::string task_token(Rule rule) const;

 private:
  Vocabulary();
  std::vector<std::string> symbols_;
};

/// The answer the task rule assigns to a context.
Symbols apply_rule(const TaskSpec& spec, const Symbols& context);

/// Deterministic in (spec, n, seed). Throws InvalidArgument for n == 0.
Corpus generate_task_data(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

/// Token ids plus a target mask: mask[t] == 1 means token t is predicted from
/// the logits at position t - 1.
struct Encoded {
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;

  std::vector<std::size_t> target_positions() const;
};

/// context + question + [ANS] + answer + [EOS]; targets are answer and [EOS].
Encoded encode_qa(const Sample& s, std::size_t max_len);
/// lead + context + question + [ANS] + answer + [EOS]; every position after
/// the lead is a target.
Encoded encode_lm(const Sample& s, std::string_view lead_token, std::size_t max_len);
/// The QA prompt: context + question + [ANS].
std::vector<int> encode_prompt(const Sample& s);

/// Split `context question [ANS] answer [EOS]` back into a Sample. Returns
/// nothing when the structure is broken: missing [ANS] or [EOS], empty
/// context or answer, no question word right before [ANS], or a special
/// token inside context/answer. Tokens after [EOS] are not allowed.
std::optional<Sample> parse_sequence(std::span<const int> tokens, std::string task);

struct CorpusReadResult {
  Corpus corpus;
  std::size_t unknown_fields = 0;  // count of ignored keys across all lines
};

/// One JSON object per line with keys context, question, answer, task and an
/// optional provenance ("real" | "pseudo"). Symbols are space separated.
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
std::string format_corpus(const Corpus& corpus);
CorpusReadResult read_corpus(const std::filesystem::path& path);
CorpusReadResult parse_corpus(std::string_view text);

std::string join_symbols(const Symbols& s);
Symbols split_symbols(std::string_view text);

}  // namespace dfsd
