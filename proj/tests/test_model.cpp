#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "dfsd/errors.hpp"
#include "dfsd/model.hpp"

using namespace dfsd;

namespace {

ModelConfig toy(std::uint64_t seed = 1) {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.num_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 12;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("parameter count by architecture arithmetic") {
  // token table V*d, positions L*d; per block: 2 layer norms (4d), qkv
  // (d*3d + 3d), projection (d*d + d), MLP (d*4d + 4d + 4d*d + d); final norm 2d.
  auto count = [](std::size_t k, std::size_t d, std::size_t v, std::size_t l) {
    const std::size_t block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d);
    return v * d + l * d + k * block + 2 * d;
  };
  ModelConfig c = toy();
  CHECK(parameter_count(c) == count(2, 8, 16, 12));
  CHECK(Model(c).parameter_count() == count(2, 8, 16, 12));
  std::size_t stored = 0;
  Model m(c);
  for (const auto& p : m.parameters()) stored += p.value.size();
  CHECK(stored == parameter_count(c));

  ModelConfig big;
  big.vocab_size = 41;
  CHECK(parameter_count(big) == count(4, 64, 41, 64));
}

TEST_CASE("config validation") {
  ModelConfig c = toy();
  c.num_heads = 3;
  CHECK_THROWS_AS(Model{c}, InvalidArgument);
  c = toy();
  c.num_layers = 1;
  CHECK_THROWS_AS(Model{c}, InvalidArgument);
  c = toy();
  c.vocab_size = 0;
  CHECK_THROWS_AS(Model{c}, InvalidArgument);
}

TEST_CASE("initialization is seeded") {
  Model a(toy(5)), b(toy(5)), c(toy(6));
  CHECK(a.snapshot().parameters == b.snapshot().parameters);
  CHECK_FALSE(a.snapshot().parameters == c.snapshot().parameters);
}

TEST_CASE("forward trace invariants") {
  Model m(toy());
  const std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  const auto out = m.forward(tokens);
  CHECK(out.logits.rows() == tokens.size());
  CHECK(out.logits.cols() == 16);
  CHECK(out.logits.all_finite());
  REQUIRE(out.trace.attention.size() == 2);
  REQUIRE(out.trace.hidden.size() == 2);
  CHECK(out.trace.embeddings.rows() == tokens.size());
  CHECK(out.trace.embeddings.cols() == 8);
  for (const auto& a : out.trace.attention) {
    CHECK(a.at(0, 0) == 1.0);
    for (std::size_t r = 0; r < tokens.size(); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < tokens.size(); ++c) {
        if (c > r) CHECK(a.at(r, c) == 0.0);
        s += a.at(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
  for (const auto& h : out.trace.hidden) CHECK(h.all_finite());
}

TEST_CASE("future tokens do not change earlier logits") {
  Model m(toy(2));
  std::vector<int> tokens = {3, 1, 4, 1, 5, 9};
  const auto base = m.forward(tokens);
  tokens[4] = 0;
  tokens[5] = 15;
  const auto changed = m.forward(tokens);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 16; ++c) CHECK(base.logits.at(r, c) == changed.logits.at(r, c));
  }
  CHECK_FALSE(base.logits.row(4)[0] == changed.logits.row(4)[0]);
}

TEST_CASE("forward is deterministic and all entry points agree") {
  Model m(toy(3));
  const std::vector<int> tokens = {7, 7, 2, 0, 11};
  const auto a = m.forward(tokens), b = m.forward(tokens);
  CHECK(a.logits == b.logits);
  Tape t;
  const auto traced = m.forward(t, tokens, true);
  CHECK(traced.logits.value() == a.logits);
  Tape f;
  CHECK(m.forward_frozen(f, tokens).logits.value() == a.logits);
  const auto last = m.next_token_logits(tokens);
  for (std::size_t c = 0; c < 16; ++c) CHECK(last[c] == a.logits.at(4, c));
}

TEST_CASE("token validation") {
  Model m(toy());
  CHECK_THROWS_AS(m.forward(std::vector<int>{1, 16}), InvalidArgument);
  CHECK_THROWS_AS(m.forward(std::vector<int>{-1}), InvalidArgument);
  CHECK_THROWS_AS(m.forward(std::vector<int>(13, 1)), LengthError);
  CHECK_THROWS_AS(m.forward(std::vector<int>{}), InvalidArgument);
}

TEST_CASE("snapshot round trip") {
  Model m(toy(4));
  for (auto& p : m.parameters()) p.value[0] += 0.5;
  const std::vector<int> tokens = {1, 2, 3, 4};
  const auto snap = m.snapshot();
  const Model r = Model::restore(snap);
  CHECK(r.forward(tokens).logits == m.forward(tokens).logits);

  const auto bytes = encode_snapshot(snap);
  const auto back = decode_snapshot(bytes);
  CHECK(back.config == snap.config);
  CHECK(back.parameters == snap.parameters);
  CHECK(Model::restore(back).forward(tokens).logits == m.forward(tokens).logits);

  const auto path = std::filesystem::temp_directory_path() / "dfsd_test_snapshot.bin";
  save_snapshot(snap, path);
  const auto once = load_snapshot(path);
  const auto twice = load_snapshot(path);
  CHECK(encode_snapshot(once) == bytes);
  CHECK(encode_snapshot(twice) == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("snapshot errors") {
  Model m(toy());
  auto snap = m.snapshot();
  Model other(ModelConfig{.num_layers = 3, .d_model = 8, .num_heads = 2, .vocab_size = 16, .max_seq_len = 12});
  CHECK_THROWS_AS(other.load(snap), InvalidArgument);

  auto bytes = encode_snapshot(snap);
  auto wrong_version = bytes;
  wrong_version[8] = 2;
  CHECK_THROWS_AS(decode_snapshot(wrong_version), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_snapshot(bad_magic), FormatError);
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_snapshot(bytes), FormatError);
  snap.format_version = 9;
  CHECK_THROWS_AS(Model::restore(snap), FormatError);
  CHECK_THROWS(load_snapshot("/nonexistent/dir/snap.bin"));
}
