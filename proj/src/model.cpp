#include "dfsd/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dfsd/errors.hpp"
#include "dfsd/rng.hpp"

namespace dfsd {
namespace {

// Parameter layout: [wte, wpe, per block (ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o,
// ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj), lnf_g, lnf_b].
constexpr std::size_t kPerBlock = 12;
enum BlockSlot : std::size_t { kLn1G, kLn1B, kWqkv, kBqkv, kWo, kBo, kLn2G, kLn2B, kWfc, kBfc, kWproj, kBproj };

constexpr double kInitScale = 0.02;
constexpr char kMagic[8] = {'D', 'F', 'S', 'D', 'S', 'N', 'A', 'P'};

std::size_t block_index(std::size_t layer, BlockSlot slot) { return 2 + layer * kPerBlock + slot; }

}  // namespace

void ModelConfig::validate() const {
  if (num_layers < 2) throw InvalidArgument("ModelConfig: num_layers must be at least 2");
  if (d_model == 0 || num_heads == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw InvalidArgument("ModelConfig: d_model, num_heads, vocab_size and max_seq_len must be positive");
  }
  if (d_model % num_heads != 0) throw InvalidArgument("ModelConfig: num_heads must divide d_model");
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  // Per block: two layer norms (4d), qkv (3d^2 + 3d), output (d^2 + d),
  // MLP (4d^2 + 4d) + (4d^2 + d).
  const std::size_t block = 12 * d * d + 13 * d;
  return c.vocab_size * d + c.max_seq_len * d + c.num_layers * block + 2 * d;
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  Rng rng(config_.seed);
  auto normal = [&](std::size_t r, std::size_t c) {
    NumArray a = NumArray::matrix(r, c);
    for (double& v : a.values()) v = kInitScale * rng.normal();
    return DiffNode(std::move(a));
  };
  auto constant = [](std::size_t c, double v) { return DiffNode(NumArray::matrix(1, c, v)); };

  params_.push_back(normal(config_.vocab_size, d));
  params_.push_back(normal(config_.max_seq_len, d));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    params_.push_back(constant(d, 1.0));
    params_.push_back(constant(d, 0.0));
    params_.push_back(normal(d, 3 * d));
    params_.push_back(constant(3 * d, 0.0));
    params_.push_back(normal(d, d));
    params_.push_back(constant(d, 0.0));
    params_.push_back(constant(d, 1.0));
    params_.push_back(constant(d, 0.0));
    params_.push_back(normal(d, 4 * d));
    params_.push_back(constant(4 * d, 0.0));
    params_.push_back(normal(4 * d, d));
    params_.push_back(constant(d, 0.0));
  }
  params_.push_back(constant(d, 1.0));
  params_.push_back(constant(d, 0.0));
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Model::check_tokens(std::span<const int> tokens) const {
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  if (tokens.size() > config_.max_seq_len) throw LengthError("forward: sequence longer than max_seq_len");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::uint32_t>(t) >= config_.vocab_size) {
      throw InvalidArgument("forward: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

TracedForward Model::forward(Tape& tape, std::span<const int> tokens, bool trainable) {
  if (!trainable) return forward_frozen(tape, tokens);
  check_tokens(tokens);
  std::vector<Var> w;
  w.reserve(params_.size());
  for (auto& p : params_) w.push_back(tape.param(p));
  return build(w, tokens);
}

TracedForward Model::forward_frozen(Tape& tape, std::span<const int> tokens) const {
  check_tokens(tokens);
  std::vector<Var> w;
  w.reserve(params_.size());
  for (const auto& p : params_) w.push_back(tape.constant_ref(p.value));
  return build(w, tokens);
}

TracedForward Model::build(std::span<const Var> w, std::span<const int> tokens) const {

  const std::size_t heads = config_.num_heads;
  TracedForward out;
  Var x = add(gather_rows(w[0], tokens), leading_rows(w[1], tokens.size()));
  out.embeddings = x;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    auto p = [&](BlockSlot s) { return w[block_index(l, s)]; };
    Var h = layer_norm(x, p(kLn1G), p(kLn1B));
    Var qkv = add_row(matmul(h, p(kWqkv)), p(kBqkv));
    Var probs = causal_attention(qkv, heads);
    out.attention.push_back(head_mean(probs, heads));
    Var attn = add_row(matmul(attention_mix(probs, qkv, heads), p(kWo)), p(kBo));
    x = add(x, attn);
    Var m = layer_norm(x, p(kLn2G), p(kLn2B));
    m = gelu(add_row(matmul(m, p(kWfc)), p(kBfc)));
    m = add_row(matmul(m, p(kWproj)), p(kBproj));
    x = add(x, m);
    out.hidden.push_back(x);
  }
  const std::size_t nf = params_.size() - 2;
  Var final_h = layer_norm(x, w[nf], w[nf + 1]);
  out.logits = matmul_bt(final_h, w[0]);
  return out;
}

ForwardResult Model::forward(std::span<const int> tokens) const {
  Tape tape;
  auto traced = forward_frozen(tape, tokens);
  ForwardResult r;
  r.logits = traced.logits.value();
  for (const Var& a : traced.attention) r.trace.attention.push_back(a.value());
  for (const Var& h : traced.hidden) r.trace.hidden.push_back(h.value());
  r.trace.embeddings = traced.embeddings.value();
  return r;
}

std::vector<double> Model::next_token_logits(std::span<const int> tokens) const {
  Tape tape;
  auto traced = forward_frozen(tape, tokens);
  const auto last = traced.logits.value().row(tokens.size() - 1);
  return {last.begin(), last.end()};
}

ModelSnapshot Model::snapshot() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());
  return {config_, NumArray::vector(std::move(flat)), kSnapshotFormatVersion};
}

Model Model::restore(const ModelSnapshot& snap) {
  Model m(snap.config);
  m.load(snap);
  return m;
}

void Model::load(const ModelSnapshot& snap) {
  if (snap.format_version != kSnapshotFormatVersion) {
    throw FormatError("snapshot format version " + std::to_string(snap.format_version) + " is not supported");
  }
  if (!(snap.config == config_)) throw InvalidArgument("snapshot config does not match the model");
  if (snap.parameters.size() != parameter_count()) throw FormatError("snapshot parameter count mismatch");
  std::size_t off = 0;
  for (auto& p : params_) {
    std::copy_n(snap.parameters.data() + off, p.value.size(), p.value.data());
    off += p.value.size();
  }
}

// ---------------------------------------------------------------------------
// Binary format: magic, u32 version, u32 x5 config, u64 seed, u64 count,
// then little-endian IEEE doubles.

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t& off) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (off + sizeof(U) > in.size()) throw FormatError("snapshot truncated");
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(in[off + i]) << (8 * i);
  off += sizeof(U);
  return std::bit_cast<T>(u);
}

}  // namespace

std::vector<std::uint8_t> encode_snapshot(const ModelSnapshot& snap) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le(out, snap.format_version);
  put_le(out, snap.config.num_layers);
  put_le(out, snap.config.d_model);
  put_le(out, snap.config.num_heads);
  put_le(out, snap.config.vocab_size);
  put_le(out, snap.config.max_seq_len);
  put_le(out, snap.config.seed);
  put_le(out, static_cast<std::uint64_t>(snap.parameters.size()));
  for (double v : snap.parameters.values()) put_le(out, v);
  return out;
}

ModelSnapshot decode_snapshot(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a model snapshot (bad magic)");
  }
  std::size_t off = sizeof(kMagic);
  ModelSnapshot snap;
  snap.format_version = get_le<std::uint32_t>(bytes, off);
  if (snap.format_version != kSnapshotFormatVersion) {
    throw FormatError("snapshot format version " + std::to_string(snap.format_version) + " is not supported");
  }
  snap.config.num_layers = get_le<std::uint32_t>(bytes, off);
  snap.config.d_model = get_le<std::uint32_t>(bytes, off);
  snap.config.num_heads = get_le<std::uint32_t>(bytes, off);
  snap.config.vocab_size = get_le<std::uint32_t>(bytes, off);
  snap.config.max_seq_len = get_le<std::uint32_t>(bytes, off);
  snap.config.seed = get_le<std::uint64_t>(bytes, off);
  const auto count = get_le<std::uint64_t>(bytes, off);
  snap.config.validate();
  if (count != parameter_count(snap.config)) throw FormatError("snapshot parameter count does not match its config");
  if (bytes.size() - off != count * 8) throw FormatError("snapshot payload size mismatch");
  std::vector<double> flat(count);
  for (auto& v : flat) v = get_le<double>(bytes, off);
  snap.parameters = NumArray::vector(std::move(flat));
  return snap;
}

void save_snapshot(const ModelSnapshot& snap, const std::filesystem::path& path) {
  const auto bytes = encode_snapshot(snap);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

ModelSnapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_snapshot(bytes);
}

}  // namespace dfsd
