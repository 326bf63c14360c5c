#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dfsd/num_array.hpp"

namespace dfsd {

/// A persistent differentiable value: model weights and anything else that
/// should receive a gradient across tapes.
struct DiffNode {
  NumArray value;
  NumArray gradient;

  DiffNode() = default;
  explicit DiffNode(NumArray v) : value(std::move(v)), gradient(value.shape(), 0.0) {}
  void zero_grad() { gradient.fill(0.0); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const NumArray& value() const;
  double scalar() const { return value()[0]; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking them
/// backwards is a valid topological order. Single-threaded.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(NumArray v);
  /// Constant that aliases external storage; `v` must outlive the tape.
  Var constant_ref(const NumArray& v);
  /// Leaf whose gradient accumulates into `p.gradient` during backward().
  Var param(DiffNode& p);

  /// Record a computed node. `fn` is dropped when no parent requires a gradient.
  Var record(NumArray value, std::span<const Var> parents, BackwardFn fn);
  Var record(NumArray value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
  }

  const NumArray& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, zero-allocated on first access.
  NumArray& grad(std::size_t id);
  bool has_grad(std::size_t id) const;

  /// Seed d(loss)/d(loss) = seed and propagate to every reachable node.
  void backward(Var loss, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    NumArray value;
    const NumArray* alias = nullptr;
    NumArray grad;
    NumArray* external_grad = nullptr;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

inline const NumArray& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Differentiable operations. All operate on rank-2 arrays; scalars are 1x1.

Var matmul(Var a, Var b);                 // a (n x k) * b (k x m)
Var matmul_bt(Var a, Var b);              // a (n x k) * b^T, b is (m x k)
Var add(Var a, Var b);                    // same shape
Var add_row(Var a, Var bias);             // bias (1 x m) broadcast over rows
Var scale(Var a, double s);
Var gelu(Var x);                          // tanh approximation
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gather_rows(Var table, std::span<const int> indices);
Var leading_rows(Var table, std::size_t n);
Var row_softmax(Var x);

/// Causal multi-head attention probabilities from packed qkv (n x 3d).
/// Result stacks heads: row h*n + r holds head h's distribution for query r.
Var causal_attention(Var qkv, std::size_t num_heads);
/// Apply stacked attention probabilities to the value block of qkv -> (n x d).
Var attention_mix(Var probs, Var qkv, std::size_t num_heads);
/// Mean over heads of stacked probabilities -> (n x n).
Var head_mean(Var probs, std::size_t num_heads);

/// Sum of squared differences between a constant array and a Var.
Var squared_distance(const NumArray& target, Var x);
/// Mean over rows of sym_kl(target row, x row); gradient flows into x only.
Var sym_kl_rows(const NumArray& target, Var x, double epsilon = kLogClampEpsilon);
/// Mean over `positions` of -log softmax(logits[pos-1])[tokens[pos]].
Var next_token_cross_entropy(Var logits, std::span<const int> tokens,
                             std::span<const std::size_t> positions);
/// Mean over rows of -sum(targets_row * log(clamp(softmax(x_row / T), 1e-8))).
Var soft_cross_entropy(Var logits, const NumArray& targets, double temperature);
/// sum_i weights[i] * terms[i] over scalar Vars. Empty input -> 0.
Var weighted_sum(Tape& tape, std::span<const Var> terms, std::span<const double> weights);

// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compare reverse-mode gradients of `loss_fn` against central differences.
/// Samples at most `max_coords` parameter coordinates (all when fewer exist).
/// Relative error is |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(const std::function<Var(Tape&)>& loss_fn,
                           std::span<DiffNode* const> params, double step = 1e-6,
                           std::size_t max_coords = 200, std::uint64_t seed = 0);

}  // namespace dfsd
