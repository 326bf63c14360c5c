#include "dfsd/num_array.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "dfsd/errors.hpp"

namespace dfsd {
namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

NumArray::NumArray(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {
  if (shape_.empty() || shape_.size() > 2) throw InvalidArgument("NumArray: rank must be 1 or 2");
}

NumArray::NumArray(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty() || shape_.size() > 2) throw InvalidArgument("NumArray: rank must be 1 or 2");
  if (element_count(shape_) != data_.size()) {
    throw InvalidArgument("NumArray: shape holds " + std::to_string(element_count(shape_)) +
                          " values but " + std::to_string(data_.size()) + " were given");
  }
}

std::size_t NumArray::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
std::size_t NumArray::cols() const { return shape_.empty() ? 0 : shape_.back(); }

bool NumArray::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void NumArray::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

NumArray temp_softmax(const NumArray& logits, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("temp_softmax: temperature must be positive");
  if (!logits.all_finite()) throw InvalidArgument("temp_softmax: logits must be finite");
  NumArray out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp((v - mx) / temperature);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

double mse(const NumArray& a, const NumArray& b) {
  if (!a.same_shape(b)) throw InvalidArgument("mse: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::vector<double> clamp_normalize(std::span<const double> p, double epsilon) {
  std::vector<double> out(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : out) {
    v = std::max(v, epsilon);
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

double sym_kl(std::span<const double> p, std::span<const double> q, double epsilon) {
  if (p.size() != q.size()) throw InvalidArgument("sym_kl: length mismatch");
  if (!(epsilon > 0.0)) throw InvalidArgument("sym_kl: epsilon must be positive");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw InvalidArgument("sym_kl: negative probability");
  }
  const double sp = std::accumulate(p.begin(), p.end(), 0.0), sq = std::accumulate(q.begin(), q.end(), 0.0);
  if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9) throw InvalidArgument("sym_kl: inputs must sum to 1");
  const auto pc = clamp_normalize(p, epsilon);
  const auto qc = clamp_normalize(q, epsilon);
  // Both directions share the log ratio; summing (p - q) * log(p / q) keeps
  // the result exactly symmetric under swapping the arguments.
  double s = 0.0;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    s += (pc[i] - qc[i]) * (std::log(pc[i]) - std::log(qc[i]));
  }
  return std::max(0.0, 0.5 * s);
}

}  // namespace dfsd
