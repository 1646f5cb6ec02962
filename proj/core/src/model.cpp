// SPDX-License-Identifier: Apache-2.0
#include "kurtq/model.hpp"

#include <cmath>

#include "kurtq/kure.hpp"

namespace kurtq::model {

using kurtq::to_string;

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ParameterError(std::string("model.") + field + " must be positive");
  };
  positive(d_model, "d_model");
  positive(num_heads, "num_heads");
  positive(d_ff, "d_ff");
  positive(vocab, "vocab");
  positive(seq_len, "seq_len");
  positive(num_classes, "num_classes");
  if (d_model % num_heads != 0) {
    throw ParameterError("model.num_heads (" + std::to_string(num_heads) + ") must divide model.d_model (" +
                         std::to_string(d_model) + ")");
  }
}

namespace {

std::string block_prefix(std::size_t i) { return "block" + std::to_string(i) + "."; }

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  c.validate();
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.w", Shape{c.vocab, c.d_model});
  for (std::size_t i = 0; i < c.num_blocks; ++i) {
    const std::string p = block_prefix(i);
    for (const char* proj : {"query", "key", "value", "out"}) {
      out.emplace_back(p + "attn." + proj + ".w", Shape{c.d_model, c.d_model});
      out.emplace_back(p + "attn." + proj + ".b", Shape{c.d_model});
    }
    out.emplace_back(p + "ln1.gain", Shape{c.d_model});
    out.emplace_back(p + "ln1.bias", Shape{c.d_model});
    out.emplace_back(p + "ffn.fc1.w", Shape{c.d_model, c.d_ff});
    out.emplace_back(p + "ffn.fc1.b", Shape{c.d_ff});
    out.emplace_back(p + "ffn.fc2.w", Shape{c.d_ff, c.d_model});
    out.emplace_back(p + "ffn.fc2.b", Shape{c.d_model});
    out.emplace_back(p + "ln2.gain", Shape{c.d_model});
    out.emplace_back(p + "ln2.bias", Shape{c.d_model});
  }
  out.emplace_back("head.w", Shape{c.d_model, c.num_classes});
  out.emplace_back("head.b", Shape{c.num_classes});
  return out;
}

ModelParams init_params(Rng& rng, const ModelConfig& config, const Distribution& weights) {
  ModelParams params;
  for (auto& [name, shape] : parameter_layout(config)) {
    if (name.ends_with(".gain")) {
      params.add(name, Tensor::ones(shape));
    } else if (kure::is_weight_tensor(name)) {
      params.add(name, rand_tensor(rng, shape, weights));
    } else {
      params.add(name, Tensor::zeros(shape));
    }
  }
  return params;
}

std::string to_string(HeavySite site) { return site == HeavySite::ffn_fc1 ? "ffn.fc1" : "ffn.fc2"; }

std::optional<HeavySite> parse_heavy_site(std::string_view text) {
  if (text == "ffn.fc1") return HeavySite::ffn_fc1;
  if (text == "ffn.fc2") return HeavySite::ffn_fc2;
  return std::nullopt;
}

std::string heavy_tensor_name(std::size_t block, HeavySite site) {
  return block_prefix(block) + to_string(site) + ".w";
}

ModelParams generate_pretrained_like(Rng& rng, const ModelConfig& config, const PretrainedLikeSpec& spec) {
  if (!(spec.outlier_magnitude > 0.0)) throw ParameterError("outlier_magnitude must be positive");
  ModelParams params = init_params(rng, config, NormalDist{0.0, spec.weight_std});
  for (std::size_t i = 0; i < config.num_blocks; ++i) {
    Tensor& heavy = params.at(heavy_tensor_name(i, spec.heavy_site));
    heavy = rand_tensor(rng, heavy.shape(), StudentTDist{spec.heavy_dof, spec.core_scale});
    const std::size_t count = std::min(spec.outliers, heavy.numel());
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t pos = rng.below(heavy.numel());
      const double magnitude = rng.uniform(0.5 * spec.outlier_magnitude, spec.outlier_magnitude);
      heavy[pos] = static_cast<float>(rng.uniform01() < 0.5 ? -magnitude : magnitude);
    }
  }
  return params;
}

void check_params(const ModelParams& params, const ModelConfig& config) {
  const auto layout = parameter_layout(config);
  if (params.size() != layout.size()) {
    throw DimensionError("model has " + std::to_string(params.size()) + " tensors, config expects " +
                         std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, shape] = layout[i];
    if (params[i].name != name) {
      throw DimensionError("tensor " + std::to_string(i) + " is '" + params[i].name + "', expected '" + name + "'");
    }
    if (params[i].value.shape() != shape) {
      throw DimensionError("tensor '" + name + "' has shape " + to_string(params[i].value.shape()) +
                           ", config expects " + to_string(shape));
    }
  }
}

float QatState::activation_scale(const std::string& site, float absmax) {
  if (frozen_) return calibrated_scale(site);
  auto it = calibrators_.try_emplace(site, quant::ActCalibrator(decay_)).first;
  it->second.observe_absmax(absmax);
  return it->second.scale();
}

float QatState::calibrated_scale(const std::string& site) const {
  auto it = calibrators_.find(site);
  if (it == calibrators_.end() || !it->second.observed()) {
    throw StateError("activation site '" + site + "' has no calibration");
  }
  return it->second.scale();
}

std::vector<std::string> activation_sites(const ModelConfig& config) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < config.num_blocks; ++i) {
    const std::string p = block_prefix(i);
    for (const char* s : {"attn.query.in", "attn.key.in", "attn.value.in", "attn.scores.q", "attn.scores.k",
                          "attn.context.p", "attn.context.v", "attn.out.in", "ffn.fc1.in", "ffn.fc2.in"}) {
      out.push_back(p + s);
    }
  }
  out.push_back("head.in");
  return out;
}

template <typename T>
Binding<T> bind(ad::BasicTape<T>& tape, const BasicParams<T>& params, bool trainable) {
  Binding<T> b;
  b.params = &params;
  b.vars.reserve(params.size());
  for (const auto& e : params) b.vars.push_back(trainable ? tape.leaf(e.value) : tape.constant(e.value));
  return b;
}

namespace {

template <typename T>
bool qat_on(const QatState* qat) {
  return qat != nullptr && qat->enabled();
}

template <typename T>
ad::Var quant_activation(ad::BasicTape<T>& tape, ad::Var x, const std::string& site, QatState* qat) {
  if (!qat_on<T>(qat)) return x;
  const float s = qat->activation_scale(site, static_cast<float>(max_abs(tape.value(x))));
  return ad::fake_quant(tape, x, static_cast<T>(s));
}

template <typename T>
ad::Var quant_weight(ad::BasicTape<T>& tape, ad::Var w, QatState* qat) {
  if (!qat_on<T>(qat)) return w;
  const T m = max_abs(tape.value(w));
  const T s = m > T(0) ? m / T(quant::kQMax) : T(1);
  return ad::fake_quant(tape, w, s);
}

template <typename T>
ad::Var linear(ad::BasicTape<T>& tape, const Binding<T>& p, ad::Var x, const std::string& prefix,
               QatState* qat) {
  ad::Var xq = quant_activation(tape, x, prefix + ".in", qat);
  ad::Var wq = quant_weight(tape, p(prefix + ".w"), qat);
  return ad::add(tape, ad::matmul(tape, xq, wq), p(prefix + ".b"));
}

std::size_t sequence_length(std::size_t rows, std::size_t batch) {
  if (batch == 0 || rows % batch != 0) {
    throw DimensionError(std::to_string(rows) + " rows do not split into " + std::to_string(batch) + " sequences");
  }
  return rows / batch;
}

}  // namespace

template <typename T>
ad::Var attention_sublayer(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config,
                           std::size_t block, ad::Var x, std::size_t batch, QatState* qat) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 2 || xv.cols() != config.d_model) {
    throw DimensionError("attention input " + to_string(xv.shape()) + " does not have d_model=" +
                         std::to_string(config.d_model) + " columns");
  }
  const std::size_t seq = sequence_length(xv.rows(), batch);
  const std::size_t heads = config.num_heads;
  const std::size_t groups = batch * heads;
  const std::string pre = block_prefix(block) + "attn.";

  ad::Var q = linear(tape, p, x, pre + "query", qat);
  ad::Var k = linear(tape, p, x, pre + "key", qat);
  ad::Var v = linear(tape, p, x, pre + "value", qat);
  ad::Var qh = ad::split_heads(tape, q, batch, seq, heads);
  ad::Var kh = ad::split_heads(tape, k, batch, seq, heads);
  ad::Var vh = ad::split_heads(tape, v, batch, seq, heads);

  ad::Var scores = ad::batched_matmul_nt(tape, quant_activation(tape, qh, pre + "scores.q", qat),
                                         quant_activation(tape, kh, pre + "scores.k", qat), groups);
  scores = ad::scale(tape, scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(config.head_dim()))));
  ad::Var probs = ad::softmax_rows(tape, scores);
  ad::Var ctx = ad::batched_matmul(tape, quant_activation(tape, probs, pre + "context.p", qat),
                                   quant_activation(tape, vh, pre + "context.v", qat), groups);
  ad::Var merged = ad::merge_heads(tape, ctx, batch, seq, heads);
  return linear(tape, p, merged, pre + "out", qat);
}

template <typename T>
ad::Var attention_block(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config,
                        std::size_t block, ad::Var x, std::size_t batch, QatState* qat) {
  ad::Var a = attention_sublayer(tape, p, config, block, x, batch, qat);
  const std::string pre = block_prefix(block);
  return ad::layer_norm(tape, ad::add(tape, x, a), p(pre + "ln1.gain"), p(pre + "ln1.bias"),
                        static_cast<T>(kLayerNormEps));
}

template <typename T>
ad::Var ffn_sublayer(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config, std::size_t block,
                     ad::Var x, QatState* qat) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 2 || xv.cols() != config.d_model) {
    throw DimensionError("ffn input " + to_string(xv.shape()) + " does not have d_model=" +
                         std::to_string(config.d_model) + " columns");
  }
  const std::string pre = block_prefix(block) + "ffn.";
  ad::Var h = ad::relu(tape, linear(tape, p, x, pre + "fc1", qat));
  return linear(tape, p, h, pre + "fc2", qat);
}

template <typename T>
ad::Var ffn_block(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config, std::size_t block,
                  ad::Var x, QatState* qat) {
  ad::Var f = ffn_sublayer(tape, p, config, block, x, qat);
  const std::string pre = block_prefix(block);
  return ad::layer_norm(tape, ad::add(tape, x, f), p(pre + "ln2.gain"), p(pre + "ln2.bias"),
                        static_cast<T>(kLayerNormEps));
}

namespace {

std::vector<int> flatten_tokens(const ModelConfig& config, const TokenBatch& tokens) {
  if (tokens.empty() || tokens.front().empty()) throw InputError("token batch is empty");
  const std::size_t seq = tokens.front().size();
  std::vector<int> flat;
  flat.reserve(tokens.size() * seq);
  for (const auto& row : tokens) {
    if (row.size() != seq) throw InputError("token sequences in a batch must have equal length");
    for (int t : row) {
      if (t < 0 || static_cast<std::size_t>(t) >= config.vocab) {
        throw InputError("token " + std::to_string(t) + " outside vocabulary [0, " + std::to_string(config.vocab) +
                         ")");
      }
      flat.push_back(t);
    }
  }
  return flat;
}

}  // namespace

template <typename T>
ad::Var forward(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config, const TokenBatch& tokens,
                QatState* qat) {
  const std::vector<int> flat = flatten_tokens(config, tokens);
  const std::size_t batch = tokens.size();
  ad::Var x = ad::embedding(tape, p("embed.w"), flat);
  for (std::size_t i = 0; i < config.num_blocks; ++i) {
    x = attention_block(tape, p, config, i, x, batch, qat);
    x = ffn_block(tape, p, config, i, x, qat);
  }
  ad::Var pooled = ad::mean_pool(tape, x, batch);
  return linear(tape, p, pooled, "head", qat);
}

Tensor predict(const ModelParams& params, const ModelConfig& config, const TokenBatch& tokens, QatState* qat) {
  ad::Tape tape;
  auto binding = bind(tape, params, false);
  return tape.value(forward(tape, binding, config, tokens, qat));
}

QuantizedModel quantize_model(const ModelParams& params, const ModelConfig& config, const QatState& calibration) {
  check_params(params, config);
  QuantizedModel qm;
  qm.config = config;
  qm.fp32 = params;
  for (const auto& e : params) {
    if (kure::is_weight_tensor(e.name) && e.name != "embed.w") qm.weights.emplace(e.name, quant::quantize_maxabs(e.value));
  }
  for (const auto& site : activation_sites(config)) qm.activation_scales.emplace(site, calibration.calibrated_scale(site));
  return qm;
}

namespace {

struct Int8Runner {
  const QuantizedModel& m;

  float act_scale(const std::string& site) const {
    auto it = m.activation_scales.find(site);
    if (it == m.activation_scales.end()) throw StateError("activation site '" + site + "' has no calibration");
    return it->second;
  }

  Tensor linear(const Tensor& x, const std::string& prefix) const {
    auto w = m.weights.find(prefix + ".w");
    if (w == m.weights.end()) throw StateError("no INT8 weight for '" + prefix + ".w'");
    Tensor y = quant::int8_matmul(quant::quantize(x, act_scale(prefix + ".in")), w->second);
    return add(y, m.fp32.at(prefix + ".b"));
  }

  // Per group: a_g · b_gᵀ (transpose_b) or a_g · b_g, INT32 accumulation.
  static Tensor grouped(const quant::QTensor& a, const quant::QTensor& b, std::size_t groups, bool transpose_b) {
    const std::size_t m = a.shape[0] / groups, k = a.shape[1];
    const std::size_t n = transpose_b ? b.shape[0] / groups : b.shape[1];
    Tensor out({groups * m, n});
    const float rescale = a.scale * b.scale;
    for (std::size_t g = 0; g < groups; ++g) {
      const std::int8_t* ag = a.values.data() + g * m * k;
      const std::int8_t* bg = b.values.data() + g * (transpose_b ? n * k : k * n);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          std::int32_t acc = 0;
          for (std::size_t p = 0; p < k; ++p) {
            const std::int32_t bv = transpose_b ? bg[j * k + p] : bg[p * n + j];
            acc += static_cast<std::int32_t>(ag[i * k + p]) * bv;
          }
          out.at(g * m + i, j) = static_cast<float>(acc) * rescale;
        }
      }
    }
    return out;
  }

  Tensor block(const Tensor& x, std::size_t i, std::size_t batch) const {
    const ModelConfig& c = m.config;
    const std::string pre = block_prefix(i);
    const std::size_t seq = x.rows() / batch, heads = c.num_heads, groups = batch * heads;
    Tensor qh = split_heads(linear(x, pre + "attn.query"), batch, seq, heads);
    Tensor kh = split_heads(linear(x, pre + "attn.key"), batch, seq, heads);
    Tensor vh = split_heads(linear(x, pre + "attn.value"), batch, seq, heads);
    Tensor scores = grouped(quant::quantize(qh, act_scale(pre + "attn.scores.q")),
                            quant::quantize(kh, act_scale(pre + "attn.scores.k")), groups, true);
    scores = scale(scores, static_cast<float>(1.0 / std::sqrt(static_cast<double>(c.head_dim()))));
    Tensor probs = softmax_rows(scores);
    Tensor ctx = grouped(quant::quantize(probs, act_scale(pre + "attn.context.p")),
                         quant::quantize(vh, act_scale(pre + "attn.context.v")), groups, false);
    Tensor attn = linear(merge_heads(ctx, batch, seq, heads), pre + "attn.out");
    Tensor x1 = layer_norm(add(x, attn), m.fp32.at(pre + "ln1.gain"), m.fp32.at(pre + "ln1.bias"), kLayerNormEps);
    Tensor h = relu(linear(x1, pre + "ffn.fc1"));
    Tensor f = linear(h, pre + "ffn.fc2");
    return layer_norm(add(x1, f), m.fp32.at(pre + "ln2.gain"), m.fp32.at(pre + "ln2.bias"), kLayerNormEps);
  }
};

}  // namespace

Tensor predict_int8(const QuantizedModel& model, const TokenBatch& tokens) {
  const std::vector<int> flat = flatten_tokens(model.config, tokens);
  const std::size_t batch = tokens.size();
  const Tensor& table = model.fp32.at("embed.w");
  const std::size_t d = table.cols();
  Tensor x({flat.size(), d});
  for (std::size_t i = 0; i < flat.size(); ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(flat[i]) * d, d, x.data().data() + i * d);
  Int8Runner runner{model};
  for (std::size_t i = 0; i < model.config.num_blocks; ++i) x = runner.block(x, i, batch);
  const std::size_t seq = x.rows() / batch;
  Tensor pooled({batch, d});
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) pooled.at(r / seq, j) += x.at(r, j);
  for (auto& v : pooled.data()) v /= static_cast<float>(seq);
  return runner.linear(pooled, "head");
}

#define KURTQ_INSTANTIATE(T)                                                                                   \
  template Binding<T> bind(ad::BasicTape<T>&, const BasicParams<T>&, bool);                                    \
  template ad::Var attention_sublayer(ad::BasicTape<T>&, const Binding<T>&, const ModelConfig&, std::size_t,   \
                                      ad::Var, std::size_t, QatState*);                                        \
  template ad::Var attention_block(ad::BasicTape<T>&, const Binding<T>&, const ModelConfig&, std::size_t,      \
                                   ad::Var, std::size_t, QatState*);                                           \
  template ad::Var ffn_sublayer(ad::BasicTape<T>&, const Binding<T>&, const ModelConfig&, std::size_t, ad::Var, \
                                QatState*);                                                                    \
  template ad::Var ffn_block(ad::BasicTape<T>&, const Binding<T>&, const ModelConfig&, std::size_t, ad::Var,    \
                             QatState*);                                                                       \
  template ad::Var forward(ad::BasicTape<T>&, const Binding<T>&, const ModelConfig&, const TokenBatch&,         \
                           QatState*);

KURTQ_INSTANTIATE(float)
KURTQ_INSTANTIATE(double)

#undef KURTQ_INSTANTIATE

}  // namespace kurtq::model
