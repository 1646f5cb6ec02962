// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kurtq/autodiff.hpp"
#include "kurtq/params.hpp"
#include "kurtq/quant.hpp"
#include "kurtq/rng.hpp"

namespace kurtq::model {

inline constexpr float kLayerNormEps = 1e-5f;

struct ModelConfig {
  std::size_t num_blocks = 2;
  std::size_t d_model = 32;
  std::size_t num_heads = 2;
  std::size_t d_ff = 64;
  std::size_t vocab = 16;
  std::size_t seq_len = 16;
  std::size_t num_classes = 2;

  /// Throws ParameterError naming the offending field. num_blocks = 0 is
  /// accepted (embedding -> pool -> head).
  void validate() const;
  std::size_t head_dim() const { return d_model / num_heads; }
};

/// Canonical parameter names and shapes, in checkpoint order:
/// embed.w, then per block i
///   block{i}.attn.{query,key,value,out}.{w,b}, block{i}.ln1.{gain,bias},
///   block{i}.ffn.{fc1,fc2}.{w,b}, block{i}.ln2.{gain,bias},
/// then head.w, head.b.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

/// Weight matrices drawn from `weights`, biases zero, layer-norm gains one.
ModelParams init_params(Rng& rng, const ModelConfig& config, const Distribution& weights);

enum class HeavySite { ffn_fc1, ffn_fc2 };
std::string to_string(HeavySite site);
/// "ffn.fc1" / "ffn.fc2"
std::optional<HeavySite> parse_heavy_site(std::string_view text);

struct PretrainedLikeSpec {
  HeavySite heavy_site = HeavySite::ffn_fc2;
  double weight_std = 0.02;
  /// Peaked core of the planted tensors: student_t(dof) * core_scale.
  double heavy_dof = 2.5;
  double core_scale = 1e-3;
  /// Planted outliers per heavy tensor, magnitudes uniform in
  /// [outlier_magnitude / 2, outlier_magnitude] with random sign.
  std::size_t outliers = 1;
  double outlier_magnitude = 1.0;
};

/// Normal(0, weight_std) weights everywhere except one heavy-tailed tensor per
/// block at the designated FFN site: a peaked student-t core plus a few large
/// outliers, which puts its kurtosis in the thousands at desk sizes.
ModelParams generate_pretrained_like(Rng& rng, const ModelConfig& config, const PretrainedLikeSpec& spec = {});

/// Name of the planted tensor of `block`.
std::string heavy_tensor_name(std::size_t block, HeavySite site);

/// Checks names and shapes against parameter_layout(config).
void check_params(const ModelParams& params, const ModelConfig& config);

/// Fake-quantization instrumentation. Weight inputs of every matmul use a
/// per-tensor MAX_ABS scale recomputed from the current weights; activation
/// inputs use one running-max calibrator per site.
class QatState {
 public:
  QatState() = default;
  explicit QatState(bool enabled, float decay = 0.99f) : enabled_(enabled), decay_(decay) {}

  bool enabled() const noexcept { return enabled_; }
  void set_enabled(bool on) noexcept { enabled_ = on; }
  /// Frozen calibrators are read but not updated (evaluation).
  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool on) noexcept { frozen_ = on; }
  float decay() const noexcept { return decay_; }

  /// Activation scale of `site` after observing `absmax` (unless frozen).
  float activation_scale(const std::string& site, float absmax);
  /// Throws StateError if the site was never calibrated.
  float calibrated_scale(const std::string& site) const;
  bool has_site(const std::string& site) const { return calibrators_.contains(site); }
  const std::map<std::string, quant::ActCalibrator>& calibrators() const noexcept { return calibrators_; }
  void set_calibrator(const std::string& site, quant::ActCalibrator c) { calibrators_.insert_or_assign(site, c); }

 private:
  bool enabled_ = false;
  bool frozen_ = false;
  float decay_ = 0.99f;
  std::map<std::string, quant::ActCalibrator> calibrators_;
};

/// Names of the activation sites, in forward order, for a given config.
std::vector<std::string> activation_sites(const ModelConfig& config);

/// Tape handles for every parameter, in params order.
template <typename T>
struct Binding {
  const BasicParams<T>* params = nullptr;
  std::vector<ad::Var> vars;

  ad::Var operator()(std::string_view name) const { return vars[params->position(name)]; }
};

/// Adds every parameter to the tape, as differentiable leaves when
/// `trainable`, as constants otherwise.
template <typename T>
Binding<T> bind(ad::BasicTape<T>& tape, const BasicParams<T>& params, bool trainable = true);

using TokenBatch = std::vector<std::vector<int>>;

/// Attention sub-layer before the residual: multihead scaled dot-product
/// attention with output projection. `x` is [batch*seq, d_model].
template <typename T>
ad::Var attention_sublayer(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config,
                           std::size_t block, ad::Var x, std::size_t batch, QatState* qat);
/// layer_norm(x + attention_sublayer(x)) with the block's ln1 parameters.
template <typename T>
ad::Var attention_block(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config,
                        std::size_t block, ad::Var x, std::size_t batch, QatState* qat);
/// relu(x W1 + b1) W2 + b2
template <typename T>
ad::Var ffn_sublayer(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config, std::size_t block,
                     ad::Var x, QatState* qat);
/// layer_norm(x + ffn_sublayer(x)) with the block's ln2 parameters.
template <typename T>
ad::Var ffn_block(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config, std::size_t block,
                  ad::Var x, QatState* qat);

/// Embedding -> encoder blocks -> mean pool -> linear head. Returns logits
/// [batch, num_classes]. Throws InputError for out-of-vocabulary tokens or
/// ragged sequences.
template <typename T>
ad::Var forward(ad::BasicTape<T>& tape, const Binding<T>& p, const ModelConfig& config, const TokenBatch& tokens,
                QatState* qat);

/// Logits without keeping the tape.
Tensor predict(const ModelParams& params, const ModelConfig& config, const TokenBatch& tokens,
               QatState* qat = nullptr);

/// Deployment form: matmul weights as INT8 with MAX_ABS scales, activation
/// scales frozen from calibration, everything else FP32.
struct QuantizedModel {
  ModelConfig config;
  ModelParams fp32;
  std::map<std::string, quant::QTensor> weights;
  std::map<std::string, float> activation_scales;
};

/// Throws StateError if any activation site of the config lacks calibration.
QuantizedModel quantize_model(const ModelParams& params, const ModelConfig& config, const QatState& calibration);

/// Inference with int8_matmul at every matmul site.
Tensor predict_int8(const QuantizedModel& model, const TokenBatch& tokens);

}  // namespace kurtq::model
