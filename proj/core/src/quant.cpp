// SPDX-License-Identifier: Apache-2.0
#include "kurtq/quant.hpp"

#include <algorithm>
#include <cmath>

namespace kurtq::quant {

namespace {

void require_positive_scale(double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw ParameterError("quantization scale must be positive and finite, got " + std::to_string(scale));
  }
}

// std::nearbyint under the default rounding mode is round-half-to-even. The
// quotient is taken in double so an FP32 division cannot nudge a value across
// a rounding boundary.
template <typename T>
T snap(T v, T scale) {
  const double q = std::nearbyint(static_cast<double>(v) / static_cast<double>(scale));
  return static_cast<T>(std::clamp(q, -double(kQMax), double(kQMax)));
}

}  // namespace

float compute_scale_maxabs(const Tensor& t) {
  const float m = max_abs(t);
  return m > 0.0f ? m / static_cast<float>(kQMax) : 1.0f;
}

QTensor quantize(const Tensor& t, float scale) {
  require_positive_scale(scale);
  QTensor q{t.shape(), std::vector<std::int8_t>(t.numel()), scale};
  for (std::size_t i = 0; i < t.numel(); ++i) q.values[i] = static_cast<std::int8_t>(snap(t[i], scale));
  return q;
}

QTensor quantize_maxabs(const Tensor& t) { return quantize(t, compute_scale_maxabs(t)); }

Tensor dequantize(const QTensor& q) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.numel(); ++i) out[i] = static_cast<float>(q.values[i]) * q.scale;
  return out;
}

template <typename T>
BasicTensor<T> fake_quant_values(const BasicTensor<T>& t, T scale) {
  require_positive_scale(static_cast<double>(scale));
  BasicTensor<T> out(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = snap(t[i], scale) * scale;
  return out;
}

template BasicTensor<float> fake_quant_values(const BasicTensor<float>&, float);
template BasicTensor<double> fake_quant_values(const BasicTensor<double>&, double);

Tensor int8_matmul(const QTensor& a, const QTensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
    throw DimensionError("int8_matmul shape mismatch: " + to_string(a.shape) + " x " + to_string(b.shape));
  }
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<std::int32_t> acc(m * n, 0);
  for (std::size_t i = 0; i < m; ++i) {
    std::int32_t* row = acc.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const std::int32_t av = a.values[i * k + p];
      if (av == 0) continue;
      const std::int8_t* brow = b.values.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * static_cast<std::int32_t>(brow[j]);
    }
  }
  const float rescale = a.scale * b.scale;
  Tensor out({m, n});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]) * rescale;
  return out;
}

ActCalibrator::ActCalibrator(float decay) : decay_(decay) {
  if (!(decay > 0.0f && decay <= 1.0f)) throw ParameterError("calibrator decay must be in (0, 1]");
}

void ActCalibrator::observe(const Tensor& t) { observe_absmax(max_abs(t)); }

void ActCalibrator::observe_absmax(float absmax) {
  running_absmax_ = std::max(decay_ * running_absmax_, absmax);
  observed_ = true;
}

float ActCalibrator::scale() const noexcept {
  return running_absmax_ > 0.0f ? running_absmax_ / static_cast<float>(kQMax) : 1.0f;
}

}  // namespace kurtq::quant

namespace kurtq::ad {

template <typename T>
Var fake_quant(BasicTape<T>& tape, Var x, T scale) {
  auto out = quant::fake_quant_values(tape.value(x), scale);
  return tape.record("fake_quant", std::move(out), {x}, [x, scale](const BasicTensor<T>& g, BasicTape<T>& t) {
    const auto& in = t.value(x);
    const T limit = T(quant::kQMax) * scale;
    BasicTensor<T> d(in.shape());
    for (std::size_t i = 0; i < in.numel(); ++i) d[i] = std::abs(in[i]) <= limit ? g[i] : T(0);
    t.accumulate(x, d);
  });
}

template Var fake_quant(BasicTape<float>&, Var, float);
template Var fake_quant(BasicTape<double>&, Var, double);

}  // namespace kurtq::ad
