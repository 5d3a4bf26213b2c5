#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace sona {

// Production builds use 32-bit reals. The gradient-check build compiles the
// same sources with SONA_REAL_F64 so finite differences are meaningful.
#ifdef SONA_REAL_F64
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<std::size_t>;

/// Allocator with 64-byte alignment. Vectorized kernels split a buffer into a peeled
/// head and aligned body depending on its address, so unaligned storage could round the
/// same computation differently from one allocation to the next.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using RealVector = std::vector<real, AlignedAllocator<real>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major n-dimensional array.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = real(0));
  Tensor(Shape shape, RealVector data);
  Tensor(Shape shape, const std::vector<real>& data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor scalar(real v) { return Tensor(Shape{1}, std::vector<real>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  real* ptr() noexcept { return data_.data(); }
  const real* ptr() const noexcept { return data_.data(); }
  RealVector& storage() noexcept { return data_; }
  const RealVector& storage() const noexcept { return data_; }

  real& operator[](std::size_t i) noexcept { return data_[i]; }
  real operator[](std::size_t i) const noexcept { return data_[i]; }
  real item() const;

  /// Same data, new shape; element counts must agree.
  Tensor reshaped(Shape shape) const;
  /// Rows [begin, end) along the leading dimension.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;

  void fill(real v);
  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  RealVector data_;
};

/// Concatenate tensors along the leading dimension. Trailing shapes must match.
Tensor stack_rows(std::span<const Tensor> parts);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace sona
