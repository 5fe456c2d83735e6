#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fal {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces or receives NaN/Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of reals. Plain value type: copying copies the data.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), values_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (numel(shape_) != values_.size()) {
      throw ShapeError("tensor shape " + to_string(shape_) + " does not match " +
                       std::to_string(values_.size()) + " values");
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  // Negative indices count from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(shape_.size());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw ShapeError("dim index out of range for " + to_string(shape_));
    return shape_[static_cast<std::size_t>(k)];
  }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  std::vector<T>& storage() noexcept { return values_; }
  const std::vector<T>& storage() const noexcept { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  T item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return values_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != values_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    for (const T v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<T> values_;
};

/// Token ids laid out [batch, seq].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;

  TokenBatch() = default;
  TokenBatch(std::size_t b, std::size_t s, std::vector<int> v) : batch(b), seq(s), ids(std::move(v)) {
    if (ids.size() != batch * seq) throw ShapeError("token batch size mismatch");
  }
  int at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
};

}  // namespace fal
