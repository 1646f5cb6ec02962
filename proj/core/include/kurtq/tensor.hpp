// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kurtq/error.hpp"

namespace kurtq {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor. Every dimension is positive and the element count
/// equals the product of the dimensions. `float` is the production type;
/// `double` instantiations exist for gradient checking.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
  static BasicTensor identity(std::size_t n);
  /// Rank-2 tensor from nested rows; all rows must have equal length.
  static BasicTensor matrix(const std::vector<std::vector<T>>& rows);
  static BasicTensor vector(std::vector<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rows and columns of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  BasicTensor reshaped(Shape shape) const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

enum class ElementwiseOp { add, sub, mul };

/// Row-major matrix product with accumulation in T.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// a · bᵀ
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// aᵀ · b
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

/// Pointwise op on equal shapes. For `add` and `sub`, a rank-1 `b` whose
/// length equals the trailing dimension of a rank-2 `a` is broadcast over rows.
template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::add, a, b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::sub, a, b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::mul, a, b);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

/// Softmax over each row, with the row max subtracted first.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& a);

/// Per-row normalization to zero mean / unit variance, then `gain * x + bias`.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& a, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a);

/// [batch*seq, heads*dh] -> [(batch*heads)*seq, dh], rows grouped by (batch, head).
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads);
/// Inverse of split_heads.
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads);

template <typename T>
T max_abs(const BasicTensor<T>& a);

template <typename T>
bool all_finite(const BasicTensor<T>& a);

}  // namespace kurtq
