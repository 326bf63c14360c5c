#include "dfsd/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dfsd/errors.hpp"
#include "dfsd/rng.hpp"

namespace dfsd {
namespace {

constexpr Rule kRules[] = {Rule::Copy, Rule::Reverse, Rule::Shift, Rule::Sort, Rule::Parity};
constexpr int kFirstTaskToken = 3;
constexpr int kFirstQuestionWord = kFirstTaskToken + 5;

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::size_t alphabet_index(const TaskSpec& spec, const std::string& symbol) {
  const auto it = std::find(spec.alphabet.begin(), spec.alphabet.end(), symbol);
  if (it == spec.alphabet.end()) throw InvalidArgument("symbol '" + symbol + "' is not in the task alphabet");
  return static_cast<std::size_t>(it - spec.alphabet.begin());
}

}  // namespace

std::string_view rule_name(Rule rule) {
  switch (rule) {
    case Rule::Copy: return "copy";
    case Rule::Reverse: return "reverse";
    case Rule::Shift: return "shift";
    case Rule::Sort: return "sort";
    case Rule::Parity: return "parity";
  }
  return "unknown";
}

Rule parse_rule(std::string_view name) {
  const std::string n = lower(name);
  for (Rule r : kRules) {
    if (rule_name(r) == n) return r;
  }
  throw InvalidArgument("unknown task rule '" + std::string(name) + "'");
}

TaskSpec standard_task(Rule rule) {
  TaskSpec spec;
  spec.name = std::string(rule_name(rule));
  spec.task_token = Vocabulary::standard().task_token(rule);
  spec.rule = rule;
  for (char c = 'a'; c <= 'h'; ++c) spec.alphabet.emplace_back(1, c);
  return spec;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
  symbols_ = {"[ANS]", "[EOS]", "[GEN]"};
  for (Rule r : kRules) symbols_.push_back("<" + std::string(rule_name(r)) + ">");
  for (Rule r : kRules) symbols_.emplace_back(rule_name(r));
  symbols_.emplace_back("even");
  symbols_.emplace_back("odd");
  for (char c = 'a'; c <= 'z'; ++c) symbols_.emplace_back(1, c);
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

std::optional<int> Vocabulary::find(std::string_view symbol) const {
  const auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
  if (it == symbols_.end()) return std::nullopt;
  return static_cast<int>(it - symbols_.begin());
}

int Vocabulary::id(std::string_view symbol) const {
  const auto found = find(symbol);
  if (!found) throw InvalidArgument("symbol '" + std::string(symbol) + "' is not in the vocabulary");
  return *found;
}

const std::string& Vocabulary::symbol(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) throw InvalidArgument("token id out of range");
  return symbols_[static_cast<std::size_t>(id)];
}

bool Vocabulary::is_task_token(int id) const { return id >= kFirstTaskToken && id < kFirstQuestionWord; }
bool Vocabulary::is_special(int id) const { return id >= 0 && id < kFirstQuestionWord; }
bool Vocabulary::is_question_word(int id) const { return id >= kFirstQuestionWord && id < kFirstQuestionWord + 5; }

std::string Vocabulary::task_token(Rule rule) const { return "<" + std::string(rule_name(rule)) + ">"; }

// ---------------------------------------------------------------------------

Symbols apply_rule(const TaskSpec& spec, const Symbols& context) {
  switch (spec.rule) {
    case Rule::Copy: return context;
    case Rule::Reverse: return {context.rbegin(), context.rend()};
    case Rule::Shift: {
      Symbols out;
      const auto k = static_cast<long>(spec.alphabet.size());
      for (const auto& s : context) {
        const long i = static_cast<long>(alphabet_index(spec, s));
        out.push_back(spec.alphabet[static_cast<std::size_t>(((i + spec.shift) % k + k) % k)]);
      }
      return out;
    }
    case Rule::Sort: {
      Symbols out = context;
      std::stable_sort(out.begin(), out.end(), [&](const std::string& a, const std::string& b) {
        return alphabet_index(spec, a) < alphabet_index(spec, b);
      });
      return out;
    }
    case Rule::Parity: {
      std::size_t sum = 0;
      for (const auto& s : context) sum += alphabet_index(spec, s);
      return {sum % 2 == 0 ? "even" : "odd"};
    }
  }
  throw InvalidArgument("unknown rule");
}

Corpus generate_task_data(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("generate_task_data: n must be at least 1");
  if (spec.alphabet.empty() || spec.min_len == 0 || spec.min_len > spec.max_len) {
    throw InvalidArgument("generate_task_data: task needs a non-empty alphabet and 1 <= min_len <= max_len");
  }
  const auto& vocab = Vocabulary::standard();
  for (const auto& s : spec.alphabet) {
    if (vocab.is_special(vocab.id(s)) || vocab.is_question_word(vocab.id(s))) {
      throw InvalidArgument("generate_task_data: alphabet symbol '" + s + "' is reserved");
    }
  }
  Rng rng(seed);
  Corpus corpus;
  corpus.task_id = spec.name;
  corpus.samples.reserve(n);
  const std::string question(rule_name(spec.rule));
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    for (std::size_t j = 0; j < len; ++j) s.context.push_back(spec.alphabet[rng.below(spec.alphabet.size())]);
    s.question = {question};
    s.answer = apply_rule(spec, s.context);
    s.task = spec.name;
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Encoded::target_positions() const {
  std::vector<std::size_t> pos;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) pos.push_back(t);
  }
  return pos;
}

std::vector<int> encode_prompt(const Sample& s) {
  const auto& vocab = Vocabulary::standard();
  std::vector<int> out;
  for (const auto& sym : s.context) out.push_back(vocab.id(sym));
  for (const auto& sym : s.question) out.push_back(vocab.id(sym));
  out.push_back(Vocabulary::kAns);
  return out;
}

Encoded encode_qa(const Sample& s, std::size_t max_len) {
  const auto& vocab = Vocabulary::standard();
  Encoded e;
  e.tokens = encode_prompt(s);
  e.mask.assign(e.tokens.size(), 0);
  for (const auto& sym : s.answer) {
    e.tokens.push_back(vocab.id(sym));
    e.mask.push_back(1);
  }
  e.tokens.push_back(Vocabulary::kEos);
  e.mask.push_back(1);
  if (e.tokens.size() > max_len) {
    throw LengthError("encoded sample has " + std::to_string(e.tokens.size()) + " tokens, limit is " +
                      std::to_string(max_len));
  }
  return e;
}

Encoded encode_lm(const Sample& s, std::string_view lead_token, std::size_t max_len) {
  const auto& vocab = Vocabulary::standard();
  Encoded e = encode_qa(s, max_len == 0 ? 0 : max_len - 1);
  e.tokens.insert(e.tokens.begin(), vocab.id(lead_token));
  e.mask.assign(e.tokens.size(), 1);
  e.mask[0] = 0;
  return e;
}

std::optional<Sample> parse_sequence(std::span<const int> tokens, std::string task) {
  const auto& vocab = Vocabulary::standard();
  const auto ans = std::find(tokens.begin(), tokens.end(), Vocabulary::kAns);
  const auto eos = std::find(tokens.begin(), tokens.end(), Vocabulary::kEos);
  if (ans == tokens.end() || eos == tokens.end() || eos < ans) return std::nullopt;
  if (eos + 1 != tokens.end()) return std::nullopt;
  const auto prefix_len = static_cast<std::size_t>(ans - tokens.begin());
  if (prefix_len < 2) return std::nullopt;  // need context and question
  const int question = tokens[prefix_len - 1];
  if (!vocab.is_question_word(question)) return std::nullopt;
  Sample s;
  s.task = std::move(task);
  s.question = {vocab.symbol(question)};
  for (std::size_t i = 0; i + 1 < prefix_len; ++i) {
    if (vocab.is_special(tokens[i]) || vocab.is_question_word(tokens[i])) return std::nullopt;
    s.context.push_back(vocab.symbol(tokens[i]));
  }
  for (auto it = ans + 1; it != eos; ++it) {
    if (vocab.is_special(*it) || vocab.is_question_word(*it)) return std::nullopt;
    s.answer.push_back(vocab.symbol(*it));
  }
  if (s.answer.empty()) return std::nullopt;
  return s;
}

// ---------------------------------------------------------------------------

std::string join_symbols(const Symbols& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += s[i];
  }
  return out;
}

Symbols split_symbols(std::string_view text) {
  Symbols out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string format_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& s : corpus.samples) {
    nlohmann::ordered_json j;
    j["context"] = join_symbols(s.context);
    j["question"] = join_symbols(s.question);
    j["answer"] = join_symbols(s.answer);
    j["task"] = s.task;
    j["provenance"] = corpus.provenance == Provenance::Pseudo ? "pseudo" : "real";
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << format_corpus(corpus);
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

CorpusReadResult parse_corpus(std::string_view text) {
  const auto& vocab = Vocabulary::standard();
  CorpusReadResult result;
  std::optional<Provenance> provenance;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError("record must be a JSON object", line_no);
    auto field = [&](const char* key) {
      const auto it = j.find(key);
      if (it == j.end() || !it->is_string()) throw ParseError(std::string("missing string field '") + key + "'", line_no);
      return it->get<std::string>();
    };
    Sample s;
    s.context = split_symbols(field("context"));
    s.question = split_symbols(field("question"));
    s.answer = split_symbols(field("answer"));
    s.task = field("task");
    for (const Symbols* part : {&s.context, &s.question, &s.answer}) {
      for (const auto& sym : *part) {
        if (!vocab.find(sym)) throw ParseError("unknown symbol '" + sym + "'", line_no);
      }
    }
    Provenance p = Provenance::Real;
    if (const auto it = j.find("provenance"); it != j.end()) {
      if (*it == "pseudo") {
        p = Provenance::Pseudo;
      } else if (*it != "real") {
        throw ParseError("provenance must be \"real\" or \"pseudo\"", line_no);
      }
    }
    if (provenance && *provenance != p) throw ParseError("mixed provenance in one corpus", line_no);
    provenance = p;
    for (const auto& [key, value] : j.items()) {
      if (key != "context" && key != "question" && key != "answer" && key != "task" && key != "provenance") {
        ++result.unknown_fields;
      }
    }
    result.corpus.samples.push_back(std::move(s));
  }
  if (result.corpus.samples.empty()) throw ParseError("corpus contains no records", 0);
  result.corpus.provenance = provenance.value_or(Provenance::Real);
  const std::string& first = result.corpus.samples.front().task;
  const bool uniform = std::all_of(result.corpus.samples.begin(), result.corpus.samples.end(),
                                   [&](const Sample& s) { return s.task == first; });
  result.corpus.task_id = uniform ? first : std::string();
  return result;
}

CorpusReadResult read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_corpus(buf.str());
}

}  // namespace dfsd
