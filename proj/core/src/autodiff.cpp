// SPDX-License-Identifier: Apache-2.0
#include "kurtq/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace kurtq::ad {

template <typename T>
Var BasicTape<T>::leaf(TensorT value) {
  nodes_.push_back(Node{"leaf", std::move(value), {}, true, {}});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var BasicTape<T>::constant(TensorT value) {
  nodes_.push_back(Node{"constant", std::move(value), {}, false, {}});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var BasicTape<T>::record(std::string_view op, TensorT value, const std::vector<Var>& inputs,
                         BackwardFn fn) {
  bool needs = false;
  for (Var in : inputs) {
    if (in.id >= nodes_.size()) throw ContractError("tape input refers to a later node");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{op, std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
  return Var{nodes_.size() - 1};
}

template <typename T>
const BasicTensor<T>& BasicTape<T>::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad = TensorT(n.value.shape());
  return n.grad;
}

template <typename T>
void BasicTape<T>::accumulate(Var v, const TensorT& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw DimensionError("gradient shape " + to_string(g.shape()) + " does not match value " +
                         to_string(n.value.shape()));
  }
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void BasicTape<T>::backward(Var loss) {
  Node& root = nodes_.at(loss.id);
  if (root.value.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + to_string(root.value.shape()));
  }
  for (auto& n : nodes_) n.grad = TensorT{};
  if (!root.requires_grad) return;
  root.grad = TensorT::ones(root.value.shape());
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // Copy: the callback may append to the gradient slots of earlier nodes only,
    // but keeping the upstream gradient stable avoids aliasing surprises.
    const TensorT upstream = n.grad;
    n.backward(upstream, *this);
  }
}

template <typename T>
std::size_t BasicTape<T>::count_ops(std::string_view op) const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [op](const Node& n) { return n.op == op; }));
}

namespace {

// c (+)= op(a) · op(b) on raw row-major blocks.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool ta,
          bool tb) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ta ? a[p * m + i] : a[i * k + p];
      if (av == T(0)) continue;
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void require_groups(const BasicTensor<T>& t, std::size_t groups, const char* what) {
  if (t.rank() != 2 || groups == 0 || t.rows() % groups != 0) {
    throw DimensionError(std::string(what) + ": " + to_string(t.shape()) + " is not divisible into " +
                         std::to_string(groups) + " row groups");
  }
}

}  // namespace

template <typename T>
Var matmul(BasicTape<T>& tape, Var a, Var b) {
  auto out = kurtq::matmul(tape.value(a), tape.value(b));
  return tape.record("matmul", std::move(out), {a, b}, [a, b](const BasicTensor<T>& g, BasicTape<T>& t) {
    if (t.requires_grad(a)) t.accumulate(a, kurtq::matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, kurtq::matmul_tn(t.value(a), g));
  });
}

namespace {

// Gradient of a broadcast operand: reduce over rows when b was a bias vector.
template <typename T>
BasicTensor<T> reduce_to(const BasicTensor<T>& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  BasicTensor<T> out(shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < g.numel(); ++i) out[i % n] += g[i];
  return out;
}

}  // namespace

template <typename T>
Var add(BasicTape<T>& tape, Var a, Var b) {
  auto out = kurtq::add(tape.value(a), tape.value(b));
  return tape.record("add", std::move(out), {a, b}, [a, b](const BasicTensor<T>& g, BasicTape<T>& t) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, reduce_to(g, t.value(b).shape()));
  });
}

template <typename T>
Var sub(BasicTape<T>& tape, Var a, Var b) {
  auto out = kurtq::sub(tape.value(a), tape.value(b));
  return tape.record("sub", std::move(out), {a, b}, [a, b](const BasicTensor<T>& g, BasicTape<T>& t) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, reduce_to(kurtq::scale(g, T(-1)), t.value(b).shape()));
  });
}

template <typename T>
Var mul(BasicTape<T>& tape, Var a, Var b) {
  auto out = kurtq::mul(tape.value(a), tape.value(b));
  return tape.record("mul", std::move(out), {a, b}, [a, b](const BasicTensor<T>& g, BasicTape<T>& t) {
    if (t.requires_grad(a)) t.accumulate(a, kurtq::mul(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, kurtq::mul(g, t.value(a)));
  });
}

template <typename T>
Var scale(BasicTape<T>& tape, Var a, T factor) {
  auto out = kurtq::scale(tape.value(a), factor);
  return tape.record("scale", std::move(out), {a}, [a, factor](const BasicTensor<T>& g, BasicTape<T>& t) {
    t.accumulate(a, kurtq::scale(g, factor));
  });
}

template <typename T>
Var relu(BasicTape<T>& tape, Var a) {
  auto out = kurtq::relu(tape.value(a));
  return tape.record("relu", std::move(out), {a}, [a](const BasicTensor<T>& g, BasicTape<T>& t) {
    const auto& x = t.value(a);
    BasicTensor<T> d(x.shape());
    // Subgradient 0 at the kink.
    for (std::size_t i = 0; i < x.numel(); ++i) d[i] = x[i] > T(0) ? g[i] : T(0);
    t.accumulate(a, d);
  });
}

template <typename T>
Var softmax_rows(BasicTape<T>& tape, Var a) {
  auto out = kurtq::softmax_rows(tape.value(a));
  BasicTensor<T> y = out;
  return tape.record("softmax", std::move(out), {a},
                     [a, y = std::move(y)](const BasicTensor<T>& g, BasicTape<T>& t) {
                       const std::size_t n = y.cols();
                       BasicTensor<T> d(y.shape());
                       for (std::size_t r = 0; r < y.rows(); ++r) {
                         T dot = T(0);
                         for (std::size_t j = 0; j < n; ++j) dot += g.at(r, j) * y.at(r, j);
                         for (std::size_t j = 0; j < n; ++j) d.at(r, j) = y.at(r, j) * (g.at(r, j) - dot);
                       }
                       t.accumulate(a, d);
                     });
}

template <typename T>
Var layer_norm(BasicTape<T>& tape, Var x, Var gain, Var bias, T eps) {
  auto out = kurtq::layer_norm(tape.value(x), tape.value(gain), tape.value(bias), eps);
  return tape.record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, eps](const BasicTensor<T>& g, BasicTape<T>& t) {
        const auto& in = t.value(x);
        const auto& gv = t.value(gain);
        const std::size_t rows = in.rows(), n = in.cols();
        BasicTensor<T> dx(in.shape()), dgain(gv.shape()), dbias(gv.shape());
        std::vector<T> xhat(n), dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean = T(0);
          for (std::size_t j = 0; j < n; ++j) mean += in.at(r, j);
          mean /= T(n);
          T var = T(0);
          for (std::size_t j = 0; j < n; ++j) var += (in.at(r, j) - mean) * (in.at(r, j) - mean);
          var /= T(n);
          const T inv = T(1) / std::sqrt(var + eps);
          T sum_d = T(0), sum_dx = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (in.at(r, j) - mean) * inv;
            dxhat[j] = g.at(r, j) * gv[j];
            dgain[j] += g.at(r, j) * xhat[j];
            dbias[j] += g.at(r, j);
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xhat[j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            dx.at(r, j) = inv / T(n) * (T(n) * dxhat[j] - sum_d - xhat[j] * sum_dx);
          }
        }
        t.accumulate(x, dx);
        t.accumulate(gain, dgain);
        t.accumulate(bias, dbias);
      });
}

template <typename T>
Var sum(BasicTape<T>& tape, Var a) {
  T total = T(0);
  for (T v : tape.value(a).data()) total += v;
  return tape.record("sum", BasicTensor<T>({1}, total), {a}, [a](const BasicTensor<T>& g, BasicTape<T>& t) {
    t.accumulate(a, BasicTensor<T>(t.value(a).shape(), g[0]));
  });
}

template <typename T>
Var embedding(BasicTape<T>& tape, Var table, const std::vector<int>& tokens) {
  const auto& tab = tape.value(table);
  if (tab.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (tokens.empty()) throw InputError("embedding needs at least one token");
  const std::size_t d = tab.cols();
  BasicTensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= tab.rows()) {
      throw InputError("token " + std::to_string(tok) + " outside vocabulary of " +
                       std::to_string(tab.rows()));
    }
    std::copy_n(tab.data().data() + static_cast<std::size_t>(tok) * d, d, out.data().data() + i * d);
  }
  return tape.record("embedding", std::move(out), {table},
                     [table, tokens](const BasicTensor<T>& g, BasicTape<T>& t) {
                       BasicTensor<T> d(t.value(table).shape());
                       const std::size_t n = d.cols();
                       for (std::size_t i = 0; i < tokens.size(); ++i) {
                         const std::size_t row = static_cast<std::size_t>(tokens[i]);
                         for (std::size_t j = 0; j < n; ++j) d.at(row, j) += g.at(i, j);
                       }
                       t.accumulate(table, d);
                     });
}

template <typename T>
Var mean_pool(BasicTape<T>& tape, Var x, std::size_t groups) {
  const auto& in = tape.value(x);
  require_groups(in, groups, "mean_pool");
  const std::size_t per = in.rows() / groups, d = in.cols();
  BasicTensor<T> out({groups, d});
  for (std::size_t r = 0; r < in.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) out.at(r / per, j) += in.at(r, j);
  for (auto& v : out.data()) v /= T(per);
  return tape.record("mean_pool", std::move(out), {x}, [x, per](const BasicTensor<T>& g, BasicTape<T>& t) {
    BasicTensor<T> d(t.value(x).shape());
    for (std::size_t r = 0; r < d.rows(); ++r)
      for (std::size_t j = 0; j < d.cols(); ++j) d.at(r, j) = g.at(r / per, j) / T(per);
    t.accumulate(x, d);
  });
}


template <typename T>
Var split_heads(BasicTape<T>& tape, Var x, std::size_t batch, std::size_t seq, std::size_t heads) {
  auto out = kurtq::split_heads(tape.value(x), batch, seq, heads);
  return tape.record("split_heads", std::move(out), {x},
                     [=](const BasicTensor<T>& g, BasicTape<T>& t) { t.accumulate(x, kurtq::merge_heads(g, batch, seq, heads)); });
}

template <typename T>
Var merge_heads(BasicTape<T>& tape, Var x, std::size_t batch, std::size_t seq, std::size_t heads) {
  auto out = kurtq::merge_heads(tape.value(x), batch, seq, heads);
  return tape.record("merge_heads", std::move(out), {x},
                     [=](const BasicTensor<T>& g, BasicTape<T>& t) { t.accumulate(x, kurtq::split_heads(g, batch, seq, heads)); });
}

template <typename T>
Var batched_matmul_nt(BasicTape<T>& tape, Var a, Var b, std::size_t groups) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_groups(av, groups, "batched_matmul_nt");
  require_groups(bv, groups, "batched_matmul_nt");
  if (av.cols() != bv.cols()) {
    throw DimensionError("batched_matmul_nt inner mismatch: " + to_string(av.shape()) + " vs " +
                         to_string(bv.shape()));
  }
  const std::size_t m = av.rows() / groups, n = bv.rows() / groups, k = av.cols();
  BasicTensor<T> out({groups * m, n});
  for (std::size_t g = 0; g < groups; ++g)
    gemm(av.data().data() + g * m * k, bv.data().data() + g * n * k, out.data().data() + g * m * n, m, k,
         n, false, true);
  return tape.record("matmul", std::move(out), {a, b}, [=](const BasicTensor<T>& gr, BasicTape<T>& t) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.requires_grad(a)) {
      BasicTensor<T> da(A.shape());
      for (std::size_t g = 0; g < groups; ++g)
        gemm(gr.data().data() + g * m * n, B.data().data() + g * n * k, da.data().data() + g * m * k, m, n,
             k, false, false);
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      BasicTensor<T> db(B.shape());
      for (std::size_t g = 0; g < groups; ++g)
        gemm(gr.data().data() + g * m * n, A.data().data() + g * m * k, db.data().data() + g * n * k, n, m,
             k, true, false);
      t.accumulate(b, db);
    }
  });
}

template <typename T>
Var batched_matmul(BasicTape<T>& tape, Var a, Var b, std::size_t groups) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_groups(av, groups, "batched_matmul");
  require_groups(bv, groups, "batched_matmul");
  const std::size_t m = av.rows() / groups, k = av.cols(), n = bv.cols();
  if (bv.rows() / groups != k) {
    throw DimensionError("batched_matmul inner mismatch: " + to_string(av.shape()) + " vs " +
                         to_string(bv.shape()));
  }
  BasicTensor<T> out({groups * m, n});
  for (std::size_t g = 0; g < groups; ++g)
    gemm(av.data().data() + g * m * k, bv.data().data() + g * k * n, out.data().data() + g * m * n, m, k,
         n, false, false);
  return tape.record("matmul", std::move(out), {a, b}, [=](const BasicTensor<T>& gr, BasicTape<T>& t) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.requires_grad(a)) {
      BasicTensor<T> da(A.shape());
      for (std::size_t g = 0; g < groups; ++g)
        gemm(gr.data().data() + g * m * n, B.data().data() + g * k * n, da.data().data() + g * m * k, m, n,
             k, false, true);
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      BasicTensor<T> db(B.shape());
      for (std::size_t g = 0; g < groups; ++g)
        gemm(A.data().data() + g * m * k, gr.data().data() + g * m * n, db.data().data() + g * k * n, k, m,
             n, true, false);
      t.accumulate(b, db);
    }
  });
}

template <typename T>
Var cross_entropy(BasicTape<T>& tape, Var logits, const std::vector<int>& labels) {
  const auto& z = tape.value(logits);
  if (z.rank() != 2 || z.rows() != labels.size()) {
    throw DimensionError("cross_entropy: logits " + to_string(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= z.cols()) {
      throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(z.cols()) + ")");
    }
  }
  auto probs = kurtq::softmax_rows(z);
  T loss = T(0);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const T mx = *std::max_element(z.data().begin() + r * z.cols(), z.data().begin() + (r + 1) * z.cols());
    T lse = T(0);
    for (std::size_t j = 0; j < z.cols(); ++j) lse += std::exp(z.at(r, j) - mx);
    loss += std::log(lse) + mx - z.at(r, static_cast<std::size_t>(labels[r]));
  }
  loss /= T(z.rows());
  return tape.record("cross_entropy", BasicTensor<T>({1}, loss), {logits},
                     [logits, labels, probs = std::move(probs)](const BasicTensor<T>& g, BasicTape<T>& t) {
                       BasicTensor<T> d = probs;
                       const T inv = g[0] / T(d.rows());
                       for (std::size_t r = 0; r < d.rows(); ++r) {
                         d.at(r, static_cast<std::size_t>(labels[r])) -= T(1);
                         for (std::size_t j = 0; j < d.cols(); ++j) d.at(r, j) *= inv;
                       }
                       t.accumulate(logits, d);
                     });
}

template <typename T>
double grad_check(const std::function<Var(BasicTape<T>&, Var)>& f, const BasicTensor<T>& x, T eps) {
  BasicTensor<T> analytic;
  {
    BasicTape<T> tape;
    Var in = tape.leaf(x);
    Var out = f(tape, in);
    tape.backward(out);
    analytic = tape.grad(in);
  }
  auto eval = [&f](const BasicTensor<T>& point) {
    BasicTape<T> tape;
    Var in = tape.leaf(point);
    Var out = f(tape, in);
    return static_cast<double>(tape.value(out)[0]);
  };
  double worst = 0.0;
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double central = (up - down) / (2.0 * static_cast<double>(eps));
    const double a = static_cast<double>(analytic[i]);
    const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

#define KURTQ_INSTANTIATE(T)                                                                     \
  template class BasicTape<T>;                                                                   \
  template Var matmul(BasicTape<T>&, Var, Var);                                                  \
  template Var add(BasicTape<T>&, Var, Var);                                                     \
  template Var sub(BasicTape<T>&, Var, Var);                                                     \
  template Var mul(BasicTape<T>&, Var, Var);                                                     \
  template Var scale(BasicTape<T>&, Var, T);                                                     \
  template Var relu(BasicTape<T>&, Var);                                                         \
  template Var softmax_rows(BasicTape<T>&, Var);                                                 \
  template Var layer_norm(BasicTape<T>&, Var, Var, Var, T);                                      \
  template Var sum(BasicTape<T>&, Var);                                                          \
  template Var embedding(BasicTape<T>&, Var, const std::vector<int>&);                           \
  template Var mean_pool(BasicTape<T>&, Var, std::size_t);                                       \
  template Var split_heads(BasicTape<T>&, Var, std::size_t, std::size_t, std::size_t);           \
  template Var merge_heads(BasicTape<T>&, Var, std::size_t, std::size_t, std::size_t);           \
  template Var batched_matmul_nt(BasicTape<T>&, Var, Var, std::size_t);                          \
  template Var batched_matmul(BasicTape<T>&, Var, Var, std::size_t);                             \
  template Var cross_entropy(BasicTape<T>&, Var, const std::vector<int>&);                       \
  template double grad_check(const std::function<Var(BasicTape<T>&, Var)>&, const BasicTensor<T>&, T);

KURTQ_INSTANTIATE(float)
KURTQ_INSTANTIATE(double)

#undef KURTQ_INSTANTIATE

}  // namespace kurtq::ad
