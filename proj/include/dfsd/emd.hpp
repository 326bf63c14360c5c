#pragma once

#include <span>
#include <vector>

#include "dfsd/num_array.hpp"

namespace dfsd {

/// Per-layer importance on one side of the layer matching. Sums to 1.
struct LayerWeights {
  std::vector<double> omega;

  static LayerWeights uniform(std::size_t k);
  std::size_t size() const { return omega.size(); }
  /// Throws InvalidArgument on negative entries or a sum off 1 by > 1e-9.
  void validate() const;
  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// d[i][j]: cost of moving teacher layer i's knowledge onto student layer j.
struct CostMatrix {
  NumArray d;
  std::size_t size() const { return d.rows(); }
};

/// f[i][j]: mass moved from teacher layer i to student layer j.
struct FlowMatrix {
  NumArray f;
  std::size_t size() const { return f.rows(); }
};

struct EmdResult {
  double value = 0.0;
  FlowMatrix flow;
  CostMatrix cost;
};

/// d[i][j] = mean over rows r of sym_kl(teacher[i] row r, student[j] row r).
/// Every layer array must hold probability rows; all layers must share one
/// shape.
CostMatrix layer_cost(std::span<const NumArray> teacher, std::span<const NumArray> student,
                      double epsilon = kLogClampEpsilon);

/// Exact balanced transportation problem: minimize sum d.f subject to f >= 0,
/// row sums omega_t and column sums omega_s. Successive shortest paths on the
/// complete bipartite graph; exact up to floating-point rounding.
FlowMatrix solve_transport(const CostMatrix& cost, const LayerWeights& omega_t, const LayerWeights& omega_s);

/// sum d.f / sum f. Throws InvalidArgument when the total flow is zero.
double emd_value(const FlowMatrix& flow, const CostMatrix& cost);

/// layer_cost -> solve_transport -> emd_value.
EmdResult earth_movers(const CostMatrix& cost, const LayerWeights& omega_t, const LayerWeights& omega_s);

enum class WeightStrategy {
  InverseCost,  // weight each layer by the inverse of the cost its flow pays
  Fixed,        // keep the weights as they are
};

enum class Side { Teacher, Student };

/// Inverse-cost re-weighting of the teacher side (rows of flow/cost):
///   c_i = sum_j f_ij d_ij / max(sum_j f_ij, 1e-12)
///   w_i ∝ 1 / (c_i + 1e-6)
///   new = normalize(momentum * old + (1 - momentum) * normalize(w))
/// momentum must lie in [0, 1).
LayerWeights update_weights(const LayerWeights& old, const FlowMatrix& flow, const CostMatrix& cost, double momentum);

/// Same rule with the flow-weighted costs of several solves pooled before
/// averaging. Side::Student uses columns instead of rows.
LayerWeights update_weights(const LayerWeights& old, std::span<const EmdResult> solves, double momentum, Side side,
                            WeightStrategy strategy = WeightStrategy::InverseCost);

}  // namespace dfsd
