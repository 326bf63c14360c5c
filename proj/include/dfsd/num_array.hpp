#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace dfsd {

/// Dense row-major array of doubles. Everything in this project is at most
/// rank 2; a rank-1 array behaves as a single row.
class NumArray {
 public:
  NumArray() = default;
  explicit NumArray(std::vector<std::size_t> shape, double fill = 0.0);
  NumArray(std::vector<std::size_t> shape, std::vector<double> data);

  static NumArray matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return NumArray({rows, cols}, fill);
  }
  static NumArray vector(std::initializer_list<double> values) {
    return NumArray({values.size()}, std::vector<double>(values));
  }
  static NumArray vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return NumArray({n}, std::move(values));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading extent (1 for rank 1).
  std::size_t rows() const;
  /// Trailing extent.
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const NumArray& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(double v);

  friend bool operator==(const NumArray&, const NumArray&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Row-wise softmax(logits / temperature). Rank-1 input is one row.
/// Throws InvalidArgument for temperature <= 0 or non-finite logits.
NumArray temp_softmax(const NumArray& logits, double temperature);

/// Sum of squared elementwise differences. Shapes must match.
double mse(const NumArray& a, const NumArray& b);

/// Clamp every entry to at least `epsilon` and renormalize to unit sum.
std::vector<double> clamp_normalize(std::span<const double> p, double epsilon);

/// Symmetrized KL, 0.5 * (KL(p||q) + KL(q||p)), after clamp_normalize on both.
/// p and q must have equal length, non-negative entries and unit sum (1e-9).
double sym_kl(std::span<const double> p, std::span<const double> q, double epsilon = 1e-8);

inline constexpr double kLogClampEpsilon = 1e-8;

}  // namespace dfsd
