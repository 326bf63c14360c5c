#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dfsd/autodiff.hpp"
#include "dfsd/num_array.hpp"

namespace dfsd {

struct ModelConfig {
  std::uint32_t num_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t num_heads = 4;
  std::uint32_t vocab_size = 0;
  std::uint32_t max_seq_len = 64;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument unless every field is usable.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Number of scalar weights implied by a config (output head tied to the
/// token embedding).
std::size_t parameter_count(const ModelConfig& config);

/// Per-layer internals captured during a forward pass.
struct LayerTrace {
  std::vector<NumArray> attention;  // K x (n x n), head-averaged, causal
  std::vector<NumArray> hidden;     // K x (n x d_model), block outputs
  NumArray embeddings;              // n x d_model, token + position
};

struct ForwardResult {
  NumArray logits;  // n x vocab_size
  LayerTrace trace;
};

/// Same quantities as ForwardResult, recorded on a tape.
struct TracedForward {
  Var logits;
  std::vector<Var> attention;
  std::vector<Var> hidden;
  Var embeddings;
};

inline constexpr std::uint32_t kSnapshotFormatVersion = 1;

struct ModelSnapshot {
  ModelConfig config;
  NumArray parameters;  // flat, in Model::parameters() order
  std::uint32_t format_version = kSnapshotFormatVersion;
};

/// Pre-norm decoder-only transformer: token + learned position embeddings,
/// K blocks of causal multi-head attention and a GELU MLP of width 4*d, final
/// layer norm and an output head tied to the token embedding.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t parameter_count() const;

  std::span<DiffNode> parameters() { return params_; }
  std::span<const DiffNode> parameters() const { return params_; }
  void zero_grad();

  /// Record a forward pass. With `trainable` false the weights enter the tape
  /// as constants and nothing downstream requires a gradient.
  TracedForward forward(Tape& tape, std::span<const int> tokens, bool trainable);
  /// Frozen forward on a tape; usable on a const (teacher) model.
  TracedForward forward_frozen(Tape& tape, std::span<const int> tokens) const;
  ForwardResult forward(std::span<const int> tokens) const;
  /// Logits of the last position only; used by decoding loops.
  std::vector<double> next_token_logits(std::span<const int> tokens) const;

  ModelSnapshot snapshot() const;
  static Model restore(const ModelSnapshot& snap);
  /// Overwrite weights from a snapshot whose config equals ours.
  void load(const ModelSnapshot& snap);

 private:
  void check_tokens(std::span<const int> tokens) const;
  TracedForward build(std::span<const Var> w, std::span<const int> tokens) const;

  ModelConfig config_;
  std::vector<DiffNode> params_;
};

std::vector<std::uint8_t> encode_snapshot(const ModelSnapshot& snap);
ModelSnapshot decode_snapshot(std::span<const std::uint8_t> bytes);
void save_snapshot(const ModelSnapshot& snap, const std::filesystem::path& path);
ModelSnapshot load_snapshot(const std::filesystem::path& path);

}  // namespace dfsd
