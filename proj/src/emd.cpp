#include "dfsd/emd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dfsd/errors.hpp"

namespace dfsd {

LayerWeights LayerWeights::uniform(std::size_t k) {
  if (k == 0) throw InvalidArgument("LayerWeights: need at least one layer");
  return {std::vector<double>(k, 1.0 / static_cast<double>(k))};
}

void LayerWeights::validate() const {
  if (omega.empty()) throw InvalidArgument("LayerWeights: empty");
  double s = 0.0;
  for (double w : omega) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("LayerWeights: entries must be finite and >= 0");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument("LayerWeights: entries must sum to 1");
}

CostMatrix layer_cost(std::span<const NumArray> teacher, std::span<const NumArray> student, double epsilon) {
  if (teacher.empty() || teacher.size() != student.size()) {
    throw InvalidArgument("layer_cost: teacher and student must expose the same non-zero number of layers");
  }
  const auto& shape = teacher.front().shape();
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    if (teacher[k].shape() != shape || student[k].shape() != shape) {
      throw InvalidArgument("layer_cost: row length mismatch between compared layers");
    }
  }
  const std::size_t k = teacher.size();
  const std::size_t rows = teacher.front().rows();
  CostMatrix cost{NumArray::matrix(k, k)};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < rows; ++r) s += sym_kl(teacher[i].row(r), student[j].row(r), epsilon);
      cost.d.at(i, j) = s / static_cast<double>(rows);
    }
  }
  return cost;
}

FlowMatrix solve_transport(const CostMatrix& cost, const LayerWeights& omega_t, const LayerWeights& omega_s) {
  const std::size_t k = cost.size();
  if (cost.d.cols() != k || omega_t.size() != k || omega_s.size() != k) {
    throw InvalidArgument("solve_transport: dimension mismatch");
  }
  omega_t.validate();
  omega_s.validate();
  for (double v : cost.d.values()) {
    if (!std::isfinite(v)) throw InvalidArgument("solve_transport: costs must be finite");
  }

  constexpr double kTol = 1e-15;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> supply = omega_t.omega;
  std::vector<double> demand = omega_s.omega;
  FlowMatrix flow{NumArray::matrix(k, k)};

  // Residual graph: node i < k is teacher layer i, node k + j is student
  // layer j. Forward arcs i -> k+j are uncapacitated with cost d_ij; backward
  // arcs k+j -> i carry the current flow with cost -d_ij. Each round finds a
  // cheapest path from any source with supply left to any sink with demand
  // left (Bellman-Ford; costs may be negative) and pushes the bottleneck.
  const std::size_t n = 2 * k;
  std::vector<double> dist(n);
  std::vector<std::size_t> pred(n);
  const std::size_t max_rounds = 4 * k * k + 16;
  for (std::size_t round = 0;; ++round) {
    const bool supply_left = std::any_of(supply.begin(), supply.end(), [](double v) { return v > kTol; });
    const bool demand_left = std::any_of(demand.begin(), demand.end(), [](double v) { return v > kTol; });
    if (!supply_left || !demand_left) break;
    if (round >= max_rounds) throw std::logic_error("solve_transport: did not converge");

    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(pred.begin(), pred.end(), n);
    for (std::size_t i = 0; i < k; ++i) {
      if (supply[i] > kTol) dist[i] = 0.0;
    }
    for (std::size_t pass = 0; pass < n; ++pass) {
      bool changed = false;
      for (std::size_t i = 0; i < k; ++i) {
        if (dist[i] == kInf) continue;
        for (std::size_t j = 0; j < k; ++j) {
          const double nd = dist[i] + cost.d.at(i, j);
          if (nd < dist[k + j] - 1e-15) {
            dist[k + j] = nd;
            pred[k + j] = i;
            changed = true;
          }
        }
      }
      for (std::size_t j = 0; j < k; ++j) {
        if (dist[k + j] == kInf) continue;
        for (std::size_t i = 0; i < k; ++i) {
          if (flow.f.at(i, j) <= kTol) continue;
          const double nd = dist[k + j] - cost.d.at(i, j);
          if (nd < dist[i] - 1e-15) {
            dist[i] = nd;
            pred[i] = k + j;
            changed = true;
          }
        }
      }
      if (!changed) break;
    }

    std::size_t sink = n;
    for (std::size_t j = 0; j < k; ++j) {
      if (demand[j] > kTol && dist[k + j] < kInf && (sink == n || dist[k + j] < dist[sink])) sink = k + j;
    }
    if (sink == n) throw std::logic_error("solve_transport: no augmenting path");

    // Walk back to the source and find the bottleneck.
    double amount = demand[sink - k];
    std::size_t v = sink;
    while (pred[v] != n) {
      const std::size_t u = pred[v];
      if (u >= k) amount = std::min(amount, flow.f.at(v, u - k));  // backward arc u=k+j -> v=i
      v = u;
    }
    amount = std::min(amount, supply[v]);
    const std::size_t source = v;

    v = sink;
    while (pred[v] != n) {
      const std::size_t u = pred[v];
      if (u < k) {
        flow.f.at(u, v - k) += amount;
      } else {
        flow.f.at(v, u - k) = std::max(0.0, flow.f.at(v, u - k) - amount);
      }
      v = u;
    }
    supply[source] -= amount;
    demand[sink - k] -= amount;
  }
  return flow;
}

double emd_value(const FlowMatrix& flow, const CostMatrix& cost) {
  if (flow.f.shape() != cost.d.shape()) throw InvalidArgument("emd_value: flow and cost shapes differ");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < flow.f.size(); ++i) {
    num += cost.d[i] * flow.f[i];
    den += flow.f[i];
  }
  if (!(den > 0.0)) throw InvalidArgument("emd_value: total flow is zero");
  return num / den;
}

EmdResult earth_movers(const CostMatrix& cost, const LayerWeights& omega_t, const LayerWeights& omega_s) {
  EmdResult r;
  r.flow = solve_transport(cost, omega_t, omega_s);
  r.value = emd_value(r.flow, cost);
  r.cost = cost;
  return r;
}

namespace {

void check_momentum(double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("update_weights: momentum must lie in [0, 1)");
}

LayerWeights blend(const LayerWeights& old, const std::vector<double>& received_cost, double momentum) {
  const std::size_t k = old.size();
  std::vector<double> w(k);
  for (std::size_t i = 0; i < k; ++i) w[i] = 1.0 / (received_cost[i] + 1e-6);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  LayerWeights out{std::vector<double>(k)};
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    out.omega[i] = momentum * old.omega[i] + (1.0 - momentum) * (w[i] / wsum);
    total += out.omega[i];
  }
  for (double& v : out.omega) v /= total;
  return out;
}

}  // namespace

LayerWeights update_weights(const LayerWeights& old, const FlowMatrix& flow, const CostMatrix& cost,
                            double momentum) {
  const EmdResult r{0.0, flow, cost};
  return update_weights(old, std::span<const EmdResult>(&r, 1), momentum, Side::Teacher);
}

LayerWeights update_weights(const LayerWeights& old, std::span<const EmdResult> solves, double momentum, Side side,
                            WeightStrategy strategy) {
  check_momentum(momentum);
  const std::size_t k = old.size();
  if (k == 0) throw InvalidArgument("update_weights: empty weights");
  for (const auto& s : solves) {
    if (s.flow.f.rows() != k || s.flow.f.cols() != k || s.cost.d.shape() != s.flow.f.shape()) {
      throw InvalidArgument("update_weights: dimension mismatch");
    }
  }
  if (strategy == WeightStrategy::Fixed || solves.empty()) return old;
  std::vector<double> paid(k, 0.0), mass(k, 0.0);
  for (const auto& s : solves) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t layer = side == Side::Teacher ? i : j;
        paid[layer] += s.flow.f.at(i, j) * s.cost.d.at(i, j);
        mass[layer] += s.flow.f.at(i, j);
      }
    }
  }
  std::vector<double> received(k);
  for (std::size_t i = 0; i < k; ++i) received[i] = paid[i] / std::max(mass[i], 1e-12);
  return blend(old, received, momentum);
}

}  // namespace dfsd
