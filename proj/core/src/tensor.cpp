// SPDX-License-Identifier: Apache-2.0
#include "kurtq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace kurtq {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

template <typename T>
void require_rank2(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " + to_string(t.shape()));
  }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         to_string(shape_));
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::identity(std::size_t n) {
  BasicTensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.at(i, i) = T(1);
  return out;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::matrix(const std::vector<std::vector<T>>& rows) {
  if (rows.empty() || rows.front().empty()) throw DimensionError("matrix needs at least one element");
  const std::size_t c = rows.front().size();
  std::vector<T> flat;
  flat.reserve(rows.size() * c);
  for (const auto& r : rows) {
    if (r.size() != c) throw DimensionError("ragged matrix rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return BasicTensor({rows.size(), c}, std::move(flat));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::vector(std::vector<T> values) {
  const std::size_t n = values.size();
  return BasicTensor({n}, std::move(values));
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  require_rank2(*this, "rows()");
  return shape_[0];
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  require_rank2(*this, "cols()");
  return shape_[1];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return BasicTensor(std::move(shape), data_);
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      if (av == T(0)) continue;
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt shape mismatch: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn shape mismatch: " + to_string(a.shape()) + "^T x " +
                         to_string(b.shape()));
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = pa[p * m + i];
      if (av == T(0)) continue;
      T* row = po + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_rank2(a, "transpose");
  BasicTensor<T> out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto apply = [op](T x, T y) {
    switch (op) {
      case ElementwiseOp::add: return x + y;
      case ElementwiseOp::sub: return x - y;
      case ElementwiseOp::mul: return x * y;
    }
    return x;
  };
  if (a.shape() == b.shape()) {
    BasicTensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = apply(a[i], b[i]);
    return out;
  }
  const bool bias_broadcast = op != ElementwiseOp::mul && a.rank() == 2 && b.rank() == 1 &&
                              b.dim(0) == a.dim(1);
  if (!bias_broadcast) {
    throw DimensionError("elementwise shape mismatch: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  BasicTensor<T> out(a.shape());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = apply(a[i], b[i % n]);
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * factor;
  return out;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& a) {
  require_rank2(a, "softmax_rows");
  BasicTensor<T> out(a.shape());
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const T* in = a.data().data() + r * n;
    T* o = out.data().data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return out;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& a, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps) {
  require_rank2(a, "layer_norm");
  if (!(eps > T(0))) throw ParameterError("layer_norm eps must be positive");
  const std::size_t n = a.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm gain/bias " + to_string(gain.shape()) + "/" +
                         to_string(bias.shape()) + " do not match " + to_string(a.shape()));
  }
  BasicTensor<T> out(a.shape());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const T* in = a.data().data() + r * n;
    T* o = out.data().data() + r * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(n);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) o[j] = (in[j] - mean) * inv * gain[j] + bias[j];
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return out;
}

template <typename T>
T max_abs(const BasicTensor<T>& a) {
  T m = T(0);
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
bool all_finite(const BasicTensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& in, std::size_t batch, std::size_t seq, std::size_t heads) {
  if (in.rank() != 2 || in.rows() != batch * seq || heads == 0 || in.cols() % heads != 0) {
    throw DimensionError("split_heads: " + to_string(in.shape()) + " incompatible with batch=" +
                         std::to_string(batch) + " seq=" + std::to_string(seq) +
                         " heads=" + std::to_string(heads));
  }
  const std::size_t dh = in.cols() / heads;
  BasicTensor<T> out({batch * heads * seq, dh});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < seq; ++s)
        std::copy_n(in.data().data() + (b * seq + s) * in.cols() + h * dh, dh,
                    out.data().data() + ((b * heads + h) * seq + s) * dh);
  return out;
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& in, std::size_t batch, std::size_t seq, std::size_t heads) {
  if (in.rank() != 2 || in.rows() != batch * heads * seq) {
    throw DimensionError("merge_heads: " + to_string(in.shape()) + " incompatible with batch=" +
                         std::to_string(batch) + " seq=" + std::to_string(seq) +
                         " heads=" + std::to_string(heads));
  }
  const std::size_t dh = in.cols();
  BasicTensor<T> out({batch * seq, heads * dh});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < seq; ++s)
        std::copy_n(in.data().data() + ((b * heads + h) * seq + s) * dh, dh,
                    out.data().data() + (b * seq + s) * heads * dh + h * dh);
  return out;
}


#define KURTQ_INSTANTIATE(T)                                                                       \
  template class BasicTensor<T>;                                                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                        \
  template BasicTensor<T> elementwise(ElementwiseOp, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                         \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                     \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                     const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                             \
  template T max_abs(const BasicTensor<T>&);                                                       \
  template bool all_finite(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> split_heads(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t); \
  template BasicTensor<T> merge_heads(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);

KURTQ_INSTANTIATE(float)
KURTQ_INSTANTIATE(double)

#undef KURTQ_INSTANTIATE

}  // namespace kurtq
