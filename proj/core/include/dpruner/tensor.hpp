#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dpruner {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles. Every numeric quantity in the library
/// (weights, activations, gradients, scores) is carried by this type.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 accessors; callers are expected to have checked rank().
  std::size_t rows() const { return shape_[0]; }
  std::size_t cols() const { return shape_[1]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double item() const;
  bool all_finite() const;

  /// Bitwise equality of shape and every element (distinguishes -0.0 and 0.0).
  bool bit_equal(const Tensor& other) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Throws ValidationError naming `op` and both shapes unless they match.
void require_same_shape(const char* op, const Tensor& a, const Tensor& b);

}  // namespace dpruner
