#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace magic {

using Shape = std::vector<std::int64_t>;

/// Raised whenever an operation receives operands whose shapes it does not
/// accept. The message always carries every offending shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);

/// 64-byte aligned storage. Vectorised kernels peel loops up to the first
/// aligned address, so results depend on where a buffer starts; fixing the
/// alignment makes them a function of shapes and values only.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlignment)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlignment)); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;
std::int64_t shape_numel(const Shape& shape);

/// Dense row-major array. Images use (batch, channel, height, width).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_length();
  }

  Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) { check_length(); }

  static Tensor scalar(T v) { return Tensor(Shape{}, AlignedVector<T>{v}); }

  const Shape& shape() const { return shape_; }

  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  AlignedVector<T>& storage() { return data_; }
  const AlignedVector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    AlignedVector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  void check_length() const {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static std::int64_t checked_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
      if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
      n *= e;
    }
    return n;
  }

  Shape shape_;
  AlignedVector<T> data_;
};

/// Bit-level equality (distinguishes -0 from +0, treats identical NaN payloads as equal).
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return a.numel() == 0 ||
         std::memcmp(a.ptr(), b.ptr(), static_cast<std::size_t>(a.numel()) * sizeof(T)) == 0;
}

/// Copies sample `index` of a batched tensor into a batch-of-one tensor.
template <typename T>
Tensor<T> batch_slice(const Tensor<T>& batched, std::int64_t index) {
  if (batched.rank() < 1 || index < 0 || index >= batched.dim(0)) {
    throw ShapeError("batch_slice index " + std::to_string(index) + " out of range for " +
                     shape_str(batched.shape()));
  }
  Shape shape = batched.shape();
  const std::int64_t per = batched.numel() / shape[0];
  shape[0] = 1;
  AlignedVector<T> data(batched.ptr() + index * per, batched.ptr() + (index + 1) * per);
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Concatenates equally-shaped tensors along a new (or existing, when the
/// leading extent is 1) batch axis.
template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack_batch of zero tensors");
  Shape inner = items[0].shape();
  if (!inner.empty() && inner[0] == 1 && inner.size() == 4) inner.erase(inner.begin());
  Shape shape = inner;
  shape.insert(shape.begin(), static_cast<std::int64_t>(items.size()));
  AlignedVector<T> data;
  data.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (const auto& item : items) {
    if (item.numel() != shape_numel(inner)) {
      throw ShapeError("stack_batch shape mismatch: " + shape_str(items[0].shape()) + " vs " +
                       shape_str(item.shape()));
    }
    data.insert(data.end(), item.data().begin(), item.data().end());
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace magic
