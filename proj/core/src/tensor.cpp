#include "dpruner/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "dpruner/errors.hpp"

namespace dpruner {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_dims(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw ValidationError("tensor shape " + shape_string(shape_) + " does not match " +
                          std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ValidationError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(data_[i]) != std::bit_cast<std::uint64_t>(other.data_[i])) return false;
  }
  return true;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

}  // namespace dpruner
