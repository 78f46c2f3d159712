#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace condvid {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& dims) {
  if (dims.empty()) throw std::invalid_argument("tensor shape must be nonempty");
  std::size_t n = 1;
  for (std::size_t d : dims) {
    if (d == 0) throw std::invalid_argument("zero-sized tensor dimension in " + shape_string(dims));
    n *= d;
  }
  return n;
}

/// Dense row-major tensor. Every extent is positive; the payload length
/// always equals the product of the extents.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims) : dims_(std::move(dims)), data_(shape_volume(dims_), T(0)) {}

  Tensor(Shape dims, T fill) : dims_(std::move(dims)), data_(shape_volume(dims_), fill) {}

  Tensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != shape_volume(dims_))
      throw std::invalid_argument("tensor payload length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(dims_));
  }

  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
  [[nodiscard]] const Shape& dims() const noexcept { return dims_; }
  [[nodiscard]] std::size_t rank() const noexcept { return dims_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  [[nodiscard]] T* data() noexcept { return data_.data(); }
  [[nodiscard]] const T* data() const noexcept { return data_.data(); }
  [[nodiscard]] std::span<T> values() noexcept { return data_; }
  [[nodiscard]] std::span<const T> values() const noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Number of elements in one slice along axis 0.
  [[nodiscard]] std::size_t slice_size() const { return data_.size() / dims_.at(0); }

  [[nodiscard]] std::span<T> slice(std::size_t i) {
    const std::size_t n = slice_size();
    return std::span<T>(data_).subspan(i * n, n);
  }
  [[nodiscard]] std::span<const T> slice(std::size_t i) const {
    const std::size_t n = slice_size();
    return std::span<const T>(data_).subspan(i * n, n);
  }

  [[nodiscard]] Tensor reshaped(Shape dims) const {
    if (shape_volume(dims) != size())
      throw std::invalid_argument("cannot reshape " + shape_string(dims_) + " to " + shape_string(dims));
    return Tensor(std::move(dims), data_);
  }

  void reshape(Shape dims) {
    if (shape_volume(dims) != size())
      throw std::invalid_argument("cannot reshape " + shape_string(dims_) + " to " + shape_string(dims));
    dims_ = std::move(dims);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(dims_, std::move(out));
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (dims_ != o.dims_)
      throw std::invalid_argument(std::string("shape mismatch in ") + what + ": " + shape_string(dims_) +
                                  " vs " + shape_string(o.dims_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.dims_ == b.dims_ && a.data_ == b.data_; }

 private:
  Shape dims_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}

template <typename T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) {
  a -= b;
  return a;
}

template <typename T>
Tensor<T> operator*(Tensor<T> a, T s) {
  a *= s;
  return a;
}

template <typename T>
double l2_norm(const Tensor<T>& t) {
  double acc = 0.0;
  for (T v : t.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// Stacks `count` copies of a tensor along a new leading axis.
template <typename T>
Tensor<T> repeat_leading(const Tensor<T>& t, std::size_t count) {
  Shape dims{count};
  dims.insert(dims.end(), t.dims().begin(), t.dims().end());
  std::vector<T> data;
  data.reserve(count * t.size());
  for (std::size_t i = 0; i < count; ++i) data.insert(data.end(), t.values().begin(), t.values().end());
  return Tensor<T>(std::move(dims), std::move(data));
}

}  // namespace condvid
