// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "kurtq/autodiff.hpp"
#include "kurtq/tensor.hpp"

namespace kurtq::quant {

inline constexpr int kQMax = 127;

/// Symmetric INT8 tensor: element i represents values[i] * scale.
/// Values stay in [-127, 127]; -128 is never produced.
struct QTensor {
  Shape shape;
  std::vector<std::int8_t> values;
  float scale = 1.0f;

  std::size_t numel() const noexcept { return values.size(); }
};

/// MAX_ABS scale: max|t| / 127, or 1.0 for an all-zero tensor.
float compute_scale_maxabs(const Tensor& t);

/// q_i = clamp(round_half_to_even(t_i / scale), -127, 127).
/// Throws ParameterError for a non-positive scale.
QTensor quantize(const Tensor& t, float scale);
/// quantize() with the MAX_ABS scale.
QTensor quantize_maxabs(const Tensor& t);

Tensor dequantize(const QTensor& q);

/// Forward of fake-quantization: dequantize(quantize(t, scale)) evaluated in T.
template <typename T>
BasicTensor<T> fake_quant_values(const BasicTensor<T>& t, T scale);

/// INT8 x INT8 product with exact INT32 accumulation, rescaled by
/// a.scale * b.scale in FP32.
Tensor int8_matmul(const QTensor& a, const QTensor& b);

/// Running max-abs observer for activation scales.
class ActCalibrator {
 public:
  explicit ActCalibrator(float decay = 0.99f);

  /// running_absmax <- max(decay * running_absmax, max|t|).
  void observe(const Tensor& t);
  void observe_absmax(float absmax);

  float running_absmax() const noexcept { return running_absmax_; }
  float decay() const noexcept { return decay_; }
  /// running_absmax / 127, or 1.0 while running_absmax is zero.
  float scale() const noexcept;
  bool observed() const noexcept { return observed_; }

 private:
  float running_absmax_ = 0.0f;
  float decay_;
  bool observed_ = false;
};

}  // namespace kurtq::quant

namespace kurtq::ad {

/// Fake-quantize node. Forward snaps to the INT8 grid; backward is the
/// straight-through estimator: the upstream gradient passes where
/// |t| <= 127 * scale and is zero elsewhere.
template <typename T>
Var fake_quant(BasicTape<T>& tape, Var x, T scale);

}  // namespace kurtq::ad
