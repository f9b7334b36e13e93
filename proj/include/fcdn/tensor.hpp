#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <new>
#include <vector>

#include "fcdn/errors.hpp"

namespace fcdn {

// Dimensions of a 4-D (batch, channels, rows, cols) array.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t numel() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

// 64-byte aligned storage, so vectorized kernels see the same alignment (and
// hence the same summation order) on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major (n, c, h, w) array of T. A value type: copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(check(shape)), data_(shape.numel(), fill) {}

  Tensor(Shape shape, const std::vector<T>& values) : shape_(check(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor of shape " + shape_.str() + " needs " +
                       std::to_string(shape_.numel()) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  // Pointer to the start of plane (n, c).
  T* plane(std::size_t n, std::size_t c) noexcept { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(std::size_t n, std::size_t c) const noexcept {
    return data_.data() + offset(n, c, 0, 0);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

 private:
  static Shape check(Shape s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
      throw ShapeError("tensor dims must all be >= 1, got " + s.str());
    }
    return s;
  }

  Shape shape_{};
  AlignedVector<T> data_;
};

}  // namespace fcdn
