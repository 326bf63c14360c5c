#include "dfsd/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "dfsd/errors.hpp"
#include "dfsd/rng.hpp"

namespace dfsd {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const NumArray& a) {
  return ConstMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}
MutMap as_mat(NumArray& a) {
  return MutMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

NumArray scalar_array(double v) { return NumArray::matrix(1, 1, v); }

void require(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(NumArray v) {
  Node n;
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant_ref(const NumArray& v) {
  Node n;
  n.alias = &v;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(DiffNode& p) {
  if (!p.gradient.same_shape(p.value)) p.gradient = NumArray(p.value.shape(), 0.0);
  Node n;
  n.alias = &p.value;
  n.external_grad = &p.gradient;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(NumArray value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape != this) throw InvalidArgument("Tape::record: parent belongs to a different tape");
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const NumArray& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.alias ? *n.alias : n.value;
}

NumArray& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.external_grad) return *n.external_grad;
  if (n.grad.empty()) n.grad = NumArray(value(id).shape(), 0.0);
  return n.grad;
}

bool Tape::has_grad(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external_grad != nullptr || !n.grad.empty();
}

void Tape::backward(Var loss, double seed) {
  if (loss.tape != this) throw InvalidArgument("Tape::backward: loss belongs to a different tape");
  if (value(loss.id).size() != 1) throw InvalidArgument("Tape::backward: loss must be a scalar");
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] += seed;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward && has_grad(i)) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Operations

Var matmul(Var a, Var b) {
  const NumArray& av = a.value();
  const NumArray& bv = b.value();
  require(av.cols() == bv.rows(), "matmul: inner dimension mismatch");
  NumArray out = NumArray::matrix(av.rows(), bv.cols());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto g = as_mat(std::as_const(t.grad(self)));
    if (t.requires_grad(a.id)) as_mat(t.grad(a.id)).noalias() += g * as_mat(b.value()).transpose();
    if (t.requires_grad(b.id)) as_mat(t.grad(b.id)).noalias() += as_mat(a.value()).transpose() * g;
  });
}

Var matmul_bt(Var a, Var b) {
  const NumArray& av = a.value();
  const NumArray& bv = b.value();
  require(av.cols() == bv.cols(), "matmul_bt: inner dimension mismatch");
  NumArray out = NumArray::matrix(av.rows(), bv.rows());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto g = as_mat(std::as_const(t.grad(self)));
    if (t.requires_grad(a.id)) as_mat(t.grad(a.id)).noalias() += g * as_mat(b.value());
    if (t.requires_grad(b.id)) as_mat(t.grad(b.id)).noalias() += g.transpose() * as_mat(a.value());
  });
}

Var add(Var a, Var b) {
  require(a.value().same_shape(b.value()), "add: shape mismatch");
  NumArray out = a.value();
  as_mat(out) += as_mat(b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto g = as_mat(std::as_const(t.grad(self)));
    if (t.requires_grad(a.id)) as_mat(t.grad(a.id)) += g;
    if (t.requires_grad(b.id)) as_mat(t.grad(b.id)) += g;
  });
}

Var add_row(Var a, Var bias) {
  const NumArray& av = a.value();
  require(bias.value().size() == av.cols(), "add_row: bias width mismatch");
  NumArray out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias.value()[c];
  }
  return a.tape->record(std::move(out), {a, bias}, [a, bias](Tape& t, std::size_t self) {
    const NumArray& g = t.grad(self);
    if (t.requires_grad(a.id)) as_mat(t.grad(a.id)) += as_mat(g);
    if (t.requires_grad(bias.id)) {
      NumArray& gb = t.grad(bias.id);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

Var scale(Var a, double s) {
  NumArray out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    as_mat(t.grad(a.id)) += s * as_mat(std::as_const(t.grad(self)));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
  NumArray out = x.value();
  for (double& v : out.values()) {
    v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return x.tape->record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const NumArray& xv = x.value();
    const NumArray& g = t.grad(self);
    NumArray& gx = t.grad(x.id);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += g[i] * d;
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const NumArray& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gain.value().size() == d && bias.value().size() == d, "layer_norm: parameter width mismatch");
  NumArray out = NumArray::matrix(n, d);
  NumArray xhat = NumArray::matrix(n, d);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = xv.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat.at(r, c) = (row[c] - mean) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gain.value()[c] + bias.value()[c];
    }
  }
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const NumArray& g = t.grad(self);
        const std::size_t n = g.rows(), d = g.cols();
        const NumArray& gv = gain.value();
        if (t.requires_grad(gain.id) || t.requires_grad(bias.id)) {
          NumArray& gg = t.grad(gain.id);
          NumArray& gb = t.grad(bias.id);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += g.at(r, c) * xhat.at(r, c);
              gb[c] += g.at(r, c);
            }
          }
        }
        if (!t.requires_grad(x.id)) return;
        NumArray& gx = t.grad(x.id);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < n; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = g.at(r, c) * gv[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xhat.at(r, c);
          }
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) {
            gx.at(r, c) += inv_std[r] * (dxhat[c] - mean_d - xhat.at(r, c) * mean_dx);
          }
        }
      });
}

Var gather_rows(Var table, std::span<const int> indices) {
  const NumArray& tv = table.value();
  NumArray out = NumArray::matrix(indices.size(), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && static_cast<std::size_t>(indices[i]) < tv.rows(), "gather_rows: index out of range");
    std::copy_n(tv.row(static_cast<std::size_t>(indices[i])).begin(), tv.cols(), out.row(i).begin());
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return table.tape->record(std::move(out), {table}, [table, idx = std::move(idx)](Tape& t, std::size_t self) {
    const NumArray& g = t.grad(self);
    NumArray& gt = t.grad(table.id);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = gt.row(static_cast<std::size_t>(idx[i]));
      const auto src = g.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var leading_rows(Var table, std::size_t n) {
  const NumArray& tv = table.value();
  require(n <= tv.rows(), "leading_rows: not enough rows");
  NumArray out = NumArray::matrix(n, tv.cols());
  std::copy_n(tv.data(), n * tv.cols(), out.data());
  return table.tape->record(std::move(out), {table}, [table](Tape& t, std::size_t self) {
    const NumArray& g = t.grad(self);
    NumArray& gt = t.grad(table.id);
    for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
  });
}

namespace {

void softmax_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

// dx = y * (dy - <dy, y>) for one softmax row.
void softmax_backward_row(std::span<const double> y, std::span<const double> dy, std::span<double> dx) {
  double dot = 0.0;
  for (std::size_t c = 0; c < y.size(); ++c) dot += dy[c] * y[c];
  for (std::size_t c = 0; c < y.size(); ++c) dx[c] += y[c] * (dy[c] - dot);
}

}  // namespace

Var row_softmax(Var x) {
  NumArray out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return x.tape->record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const NumArray& y = t.value(self);
    const NumArray& g = t.grad(self);
    NumArray& gx = t.grad(x.id);
    for (std::size_t r = 0; r < y.rows(); ++r) softmax_backward_row(y.row(r), g.row(r), gx.row(r));
  });
}

Var causal_attention(Var qkv, std::size_t num_heads) {
  const NumArray& in = qkv.value();
  const std::size_t n = in.rows();
  require(in.cols() % (3 * num_heads) == 0, "causal_attention: width must be 3 * d_model");
  const std::size_t d = in.cols() / 3, dh = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  NumArray probs = NumArray::matrix(num_heads * n, n);
  for (std::size_t h = 0; h < num_heads; ++h) {
    for (std::size_t r = 0; r < n; ++r) {
      auto row = probs.row(h * n + r);
      const double* q = in.data() + r * in.cols() + h * dh;
      for (std::size_t c = 0; c <= r; ++c) {
        const double* k = in.data() + c * in.cols() + d + h * dh;
        double s = 0.0;
        for (std::size_t j = 0; j < dh; ++j) s += q[j] * k[j];
        row[c] = s * inv_sqrt;
      }
      softmax_inplace(row.first(r + 1));
    }
  }
  return qkv.tape->record(std::move(probs), {qkv}, [qkv, num_heads, n, d, dh, inv_sqrt](Tape& t, std::size_t self) {
    const NumArray& p = t.value(self);
    const NumArray& g = t.grad(self);
    const NumArray& in = qkv.value();
    NumArray& gin = t.grad(qkv.id);
    const std::size_t w = in.cols();
    std::vector<double> ds(n);
    for (std::size_t h = 0; h < num_heads; ++h) {
      for (std::size_t r = 0; r < n; ++r) {
        std::fill(ds.begin(), ds.end(), 0.0);
        const auto pr = p.row(h * n + r).first(r + 1);
        const auto gr = g.row(h * n + r).first(r + 1);
        softmax_backward_row(pr, gr, std::span<double>(ds).first(r + 1));
        const double* q = in.data() + r * w + h * dh;
        double* gq = gin.data() + r * w + h * dh;
        for (std::size_t c = 0; c <= r; ++c) {
          const double coef = ds[c] * inv_sqrt;
          if (coef == 0.0) continue;
          const double* k = in.data() + c * w + d + h * dh;
          double* gk = gin.data() + c * w + d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) {
            gq[j] += coef * k[j];
            gk[j] += coef * q[j];
          }
        }
      }
    }
  });
}

Var attention_mix(Var probs, Var qkv, std::size_t num_heads) {
  const NumArray& p = probs.value();
  const NumArray& in = qkv.value();
  const std::size_t n = in.rows(), d = in.cols() / 3, dh = d / num_heads, w = in.cols();
  require(p.rows() == num_heads * n && p.cols() == n, "attention_mix: probability shape mismatch");
  NumArray out = NumArray::matrix(n, d);
  for (std::size_t h = 0; h < num_heads; ++h) {
    for (std::size_t r = 0; r < n; ++r) {
      double* o = out.data() + r * d + h * dh;
      for (std::size_t c = 0; c <= r; ++c) {
        const double a = p.at(h * n + r, c);
        const double* v = in.data() + c * w + 2 * d + h * dh;
        for (std::size_t j = 0; j < dh; ++j) o[j] += a * v[j];
      }
    }
  }
  return qkv.tape->record(std::move(out), {probs, qkv}, [probs, qkv, num_heads, n, d, dh, w](Tape& t, std::size_t self) {
    const NumArray& g = t.grad(self);
    const NumArray& p = probs.value();
    const NumArray& in = qkv.value();
    const bool want_p = t.requires_grad(probs.id);
    const bool want_v = t.requires_grad(qkv.id);
    NumArray* gp = want_p ? &t.grad(probs.id) : nullptr;
    NumArray* gin = want_v ? &t.grad(qkv.id) : nullptr;
    for (std::size_t h = 0; h < num_heads; ++h) {
      for (std::size_t r = 0; r < n; ++r) {
        const double* go = g.data() + r * d + h * dh;
        for (std::size_t c = 0; c <= r; ++c) {
          const double* v = in.data() + c * w + 2 * d + h * dh;
          if (want_p) {
            double s = 0.0;
            for (std::size_t j = 0; j < dh; ++j) s += go[j] * v[j];
            gp->at(h * n + r, c) += s;
          }
          if (want_v) {
            const double a = p.at(h * n + r, c);
            double* gv = gin->data() + c * w + 2 * d + h * dh;
            for (std::size_t j = 0; j < dh; ++j) gv[j] += a * go[j];
          }
        }
      }
    }
  });
}

Var head_mean(Var probs, std::size_t num_heads) {
  const NumArray& p = probs.value();
  const std::size_t n = p.cols();
  require(p.rows() == num_heads * n, "head_mean: expected stacked square blocks");
  NumArray out = NumArray::matrix(n, n);
  const double inv = 1.0 / static_cast<double>(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    for (std::size_t i = 0; i < n * n; ++i) out[i] += p[h * n * n + i];
  }
  for (double& v : out.values()) v *= inv;
  return probs.tape->record(std::move(out), {probs}, [probs, num_heads, n, inv](Tape& t, std::size_t self) {
    const NumArray& g = t.grad(self);
    NumArray& gp = t.grad(probs.id);
    for (std::size_t h = 0; h < num_heads; ++h) {
      for (std::size_t i = 0; i < n * n; ++i) gp[h * n * n + i] += inv * g[i];
    }
  });
}

Var squared_distance(const NumArray& target, Var x) {
  require(target.same_shape(x.value()), "squared_distance: shape mismatch");
  const double v = mse(target, x.value());
  return x.tape->record(scalar_array(v), {x}, [target, x](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const NumArray& xv = x.value();
    NumArray& gx = t.grad(x.id);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += 2.0 * g * (xv[i] - target[i]);
  });
}

Var sym_kl_rows(const NumArray& target, Var x, double epsilon) {
  const NumArray& xv = x.value();
  require(target.same_shape(xv), "sym_kl_rows: shape mismatch");
  const std::size_t n = xv.rows();
  require(n > 0, "sym_kl_rows: no rows");
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) total += sym_kl(target.row(r), xv.row(r), epsilon);
  total /= static_cast<double>(n);
  return x.tape->record(scalar_array(total), {x}, [target, x, epsilon](Tape& t, std::size_t self) {
    const NumArray& xv = x.value();
    const std::size_t n = xv.rows(), m = xv.cols();
    const double upstream = t.grad(self)[0] / static_cast<double>(n);
    NumArray& gx = t.grad(x.id);
    std::vector<double> g(m);
    for (std::size_t r = 0; r < n; ++r) {
      const auto p = clamp_normalize(target.row(r), epsilon);
      const auto qrow = xv.row(r);
      double s = 0.0;
      for (double v : qrow) s += std::max(v, epsilon);
      double gbar = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double q = std::max(qrow[k], epsilon) / s;
        g[k] = 0.5 * (-p[k] / q + std::log(q) + 1.0 - std::log(p[k]));
        gbar += g[k] * q;
      }
      auto out = gx.row(r);
      for (std::size_t k = 0; k < m; ++k) {
        if (qrow[k] > epsilon) out[k] += upstream * (g[k] - gbar) / s;
      }
    }
  });
}

Var next_token_cross_entropy(Var logits, std::span<const int> tokens, std::span<const std::size_t> positions) {
  const NumArray& z = logits.value();
  require(!positions.empty(), "next_token_cross_entropy: no target positions");
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  std::vector<int> tok(tokens.begin(), tokens.end());
  double loss = 0.0;
  for (std::size_t p : pos) {
    require(p >= 1 && p < tok.size() && p - 1 < z.rows(), "next_token_cross_entropy: position out of range");
    const auto row = z.row(p - 1);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    loss -= row[static_cast<std::size_t>(tok[p])] - mx - std::log(sum);
  }
  loss /= static_cast<double>(pos.size());
  return logits.tape->record(scalar_array(loss), {logits},
                             [logits, pos = std::move(pos), tok = std::move(tok)](Tape& t, std::size_t self) {
                               const NumArray& z = logits.value();
                               NumArray& gz = t.grad(logits.id);
                               const double g = t.grad(self)[0] / static_cast<double>(pos.size());
                               std::vector<double> prob(z.cols());
                               for (std::size_t p : pos) {
                                 const auto row = z.row(p - 1);
                                 std::copy(row.begin(), row.end(), prob.begin());
                                 softmax_inplace(prob);
                                 auto out = gz.row(p - 1);
                                 for (std::size_t c = 0; c < prob.size(); ++c) out[c] += g * prob[c];
                                 out[static_cast<std::size_t>(tok[p])] -= g;
                               }
                             });
}

namespace {

// log of the clamped tempered softmax, plus the clamp mask.
void tempered_log_probs(std::span<const double> z, double temperature, std::span<double> prob,
                        std::span<double> logp) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) sum += std::exp((z[c] - mx) / temperature);
  const double lse = std::log(sum);
  for (std::size_t c = 0; c < z.size(); ++c) {
    logp[c] = (z[c] - mx) / temperature - lse;
    prob[c] = std::exp(logp[c]);
    if (prob[c] < kLogClampEpsilon) logp[c] = std::log(kLogClampEpsilon);
  }
}

}  // namespace

Var soft_cross_entropy(Var logits, const NumArray& targets, double temperature) {
  const NumArray& z = logits.value();
  require(targets.same_shape(z), "soft_cross_entropy: shape mismatch");
  require(temperature > 0.0, "soft_cross_entropy: temperature must be positive");
  const std::size_t n = z.rows(), m = z.cols();
  require(n > 0, "soft_cross_entropy: no rows");
  std::vector<double> prob(m), logp(m);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    tempered_log_probs(z.row(r), temperature, prob, logp);
    const auto y = targets.row(r);
    for (std::size_t c = 0; c < m; ++c) loss -= y[c] * logp[c];
  }
  loss /= static_cast<double>(n);
  return logits.tape->record(scalar_array(loss), {logits}, [logits, targets, temperature](Tape& t, std::size_t self) {
    const NumArray& z = logits.value();
    const std::size_t n = z.rows(), m = z.cols();
    const double g = t.grad(self)[0] / static_cast<double>(n);
    NumArray& gz = t.grad(logits.id);
    std::vector<double> prob(m), logp(m);
    for (std::size_t r = 0; r < n; ++r) {
      tempered_log_probs(z.row(r), temperature, prob, logp);
      const auto y = targets.row(r);
      // Clamped entries contribute a constant, so only unclamped targets pull.
      double live_mass = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        if (prob[c] >= kLogClampEpsilon) live_mass += y[c];
      }
      auto out = gz.row(r);
      for (std::size_t c = 0; c < m; ++c) {
        const double live = prob[c] >= kLogClampEpsilon ? y[c] : 0.0;
        out[c] += g * (prob[c] * live_mass - live) / temperature;
      }
    }
  });
}

Var weighted_sum(Tape& tape, std::span<const Var> terms, std::span<const double> weights) {
  require(terms.size() == weights.size(), "weighted_sum: size mismatch");
  double v = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i].value().size() == 1, "weighted_sum: terms must be scalars");
    v += weights[i] * terms[i].scalar();
  }
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return tape.record(scalar_array(v), ts, [ts, ws](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (t.requires_grad(ts[i].id)) t.grad(ts[i].id)[0] += ws[i] * g;
    }
  });
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Var(Tape&)>& loss_fn, std::span<DiffNode* const> params,
                           double step, std::size_t max_coords, std::uint64_t seed) {
  if (!(step >= 1e-7 && step <= 1e-4)) throw InvalidArgument("grad_check: step must lie in [1e-7, 1e-4]");
  auto evaluate = [&]() {
    Tape tape;
    return loss_fn(tape).scalar();
  };

  for (DiffNode* p : params) p->zero_grad();
  double base = 0.0;
  {
    Tape tape;
    Var loss = loss_fn(tape);
    base = loss.scalar();
    tape.backward(loss);
  }
  for (int rep = 0; rep < 2; ++rep) {
    if (std::bit_cast<std::uint64_t>(evaluate()) != std::bit_cast<std::uint64_t>(base)) {
      throw ContractViolation("grad_check: loss function is not deterministic");
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i]->value.size(); ++j) coords.emplace_back(i, j);
  }
  if (coords.size() > max_coords) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_coords);
  }

  GradCheckResult result;
  for (const auto& [pi, j] : coords) {
    double& v = params[pi]->value[j];
    const double analytic = params[pi]->gradient[j];
    const double saved = v;
    v = saved + step;
    const double up = evaluate();
    v = saved - step;
    const double down = evaluate();
    v = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.coordinates;
  }
  return result;
}

}  // namespace dfsd
