#include "sona/core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sona/core/error.hpp"

namespace sona {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, real fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) throw ArgumentError("tensor dimensions must be positive: " + shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, const std::vector<real>& data)
    : Tensor(std::move(shape), RealVector(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, RealVector data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ArgumentError("tensor dimensions must be positive: " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw ArgumentError("tensor shape " + shape_str(shape_) + " does not match " +
                        std::to_string(data_.size()) + " values");
  }
}

real Tensor::item() const {
  if (data_.size() != 1) throw ArgumentError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ArgumentError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin >= end || end > shape_[0]) {
    throw ArgumentError("bad row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") of " + shape_str(shape_));
  }
  const std::size_t row = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), RealVector(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                          data_.begin() + static_cast<std::ptrdiff_t>(end * row)));
}

void Tensor::fill(real v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  // Any NaN or Inf makes the sum of (v - v) NaN; this vectorizes, a per-element isfinite loop does not.
  real acc = 0;
  for (real v : data_) acc += v - v;
  return acc == acc;
}

Tensor stack_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ArgumentError("stack_rows of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() == 0 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1, p.shape().end())) {
      throw ArgumentError("stack_rows shape mismatch: " + shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  RealVector data;
  data.reserve(rows * shape_numel(tail));
  for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
  Shape s{rows};
  s.insert(s.end(), tail.begin(), tail.end());
  return Tensor(std::move(s), std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ArgumentError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace sona
