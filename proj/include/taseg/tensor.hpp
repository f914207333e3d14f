#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "taseg/error.hpp"

namespace taseg {

#ifdef TASEG_SCALAR_FLOAT
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array. Plain value type; gradient tracking
/// lives in the tape (see autograd.hpp).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = 0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  /// Builds a 2-D tensor from nested rows: `Tensor::matrix({{1, 2}, {3, 4}})`.
  static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Scalar> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<Scalar> values) {
    return Tensor({values.size()}, std::vector<Scalar>(values));
  }

  static Tensor scalar(Scalar v) { return Tensor({}, std::vector<Scalar>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }
  const std::vector<Scalar>& values() const noexcept { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Scalar item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  /// Same data, new extents. Element count must match.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

/// Rows/cols view of a tensor with ndim >= 1: leading axes are flattened.
inline std::pair<std::size_t, std::size_t> as_rows(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  const std::size_t cols = shape.back();
  return {cols ? numel(shape) / cols : 0, cols};
}

/// Bitwise comparison (distinguishes -0.0 and +0.0, compares NaN payloads).
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto da = a.data();
  const auto db = b.data();
  return std::equal(da.begin(), da.end(), db.begin(), [](Scalar x, Scalar y) {
    return std::memcmp(&x, &y, sizeof(Scalar)) == 0;
  });
}

inline Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  Scalar m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace taseg
