// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kurtq/kure.hpp"
#include "kurtq/model.hpp"

namespace kurtq::pipeline {

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

enum class TaskRule {
  /// Class c counts the tokens t with t % num_classes == c; the label is the
  /// class with the largest count, ties going to the lowest class.
  majority,
  /// Two classes: label 1 iff tokens 0 and 1 both occur in the sequence.
  contains_pattern,
};

std::string to_string(TaskRule rule);
std::optional<TaskRule> parse_task_rule(std::string_view text);

struct Example {
  std::vector<int> tokens;
  int label = 0;
};

struct Dataset {
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }
};

/// Classification problem whose labels are a deterministic function of the
/// tokens, so the Bayes accuracy is 1.
class SyntheticTask {
 public:
  SyntheticTask(std::size_t vocab, std::size_t seq_len, std::size_t num_classes, TaskRule rule);
  static SyntheticTask for_model(const model::ModelConfig& config, TaskRule rule) {
    return SyntheticTask(config.vocab, config.seq_len, config.num_classes, rule);
  }

  int label(const std::vector<int>& tokens) const;
  Example sample(Rng& rng) const;
  Dataset make_dataset(Rng& rng, std::size_t n) const;

  TaskRule rule() const noexcept { return rule_; }

 private:
  std::size_t vocab_, seq_len_, num_classes_;
  TaskRule rule_;
};

struct Batch {
  model::TokenBatch tokens;
  std::vector<int> labels;
};

Batch make_batch(const SyntheticTask& task, Rng& rng, std::size_t size);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class InitKind { normal, uniform, pretrained_like };
std::string to_string(InitKind kind);
std::optional<InitKind> parse_init_kind(std::string_view text);

struct InitSpec {
  InitKind kind = InitKind::pretrained_like;
  /// std for `normal`, and for the ordinary tensors of `pretrained_like`.
  double weight_std = 0.02;
  /// Half-width for `uniform`.
  double uniform_bound = 0.05;
  model::PretrainedLikeSpec pretrained{};
};

/// Initial parameters drawn from Rng(seed).
ModelParams make_initial_params(const InitSpec& spec, const model::ModelConfig& config, std::uint64_t seed);

struct TrainConfig {
  float lr = 0.002f;
  float momentum = 0.9f;
  std::size_t batch_size = 20;
  std::size_t steps = 2000;
  float lambda = 0.5f;
  kure::PenaltyMode kure_mode = kure::PenaltyMode::target_deviation;
  double kure_target = kure::kUniformKurtosis;
  double exclusion_threshold = 100.0;
  std::vector<std::string> exclusion_patterns;
  bool qat_enabled = true;
  bool collapse_stages = true;
  std::uint64_t seed = 1;
  /// Kurtosis report and histogram cadence, in steps.
  std::size_t report_every = 100;
  /// Tensors whose histograms are captured at each report.
  std::vector<std::string> histogram_tensors{"block0.attn.key.w"};
  /// Activation-scale EMA decay for QAT calibrators.
  float act_decay = 0.99f;
  /// Batches used to calibrate activations when quantizing without QAT.
  std::size_t calibration_batches = 8;
  std::size_t eval_size = 2000;
  TaskRule task_rule = TaskRule::majority;

  /// Throws ParameterError naming the offending field.
  void validate() const;
  kure::SelectionPolicy selection_policy() const { return {exclusion_threshold, exclusion_patterns}; }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepResult {
  double task_loss = 0.0;
  /// Unweighted regularizer value over the included tensors.
  double kure_loss = 0.0;
  /// task_loss + lambda * kure_loss
  double total_loss = 0.0;
};

/// Parameters plus SGD-with-momentum state.
class Trainer {
 public:
  Trainer(ModelParams params, model::ModelConfig config);

  const ModelParams& params() const noexcept { return params_; }
  ModelParams& params() noexcept { return params_; }
  const model::ModelConfig& config() const noexcept { return config_; }
  std::size_t steps_taken() const noexcept { return step_; }

  /// One update on `batch` with loss task + lambda * KURE over the tensors
  /// `selection` marks as included. `qat` may be null (FP32 training).
  /// Throws DivergenceError on a non-finite loss, leaving parameters untouched.
  StepResult train_step(const Batch& batch, const TrainConfig& cfg, const kure::KurtosisReport& selection,
                        model::QatState* qat);

  /// Gradients of the most recent step, by parameter order.
  const std::vector<Tensor>& last_task_grads() const noexcept { return last_task_grads_; }
  const std::vector<Tensor>& last_kure_grads() const noexcept { return last_kure_grads_; }
  /// Keep per-component gradients of the next steps (costs one extra backward).
  void set_record_components(bool on) noexcept { record_components_ = on; }

 private:
  ModelParams params_;
  model::ModelConfig config_;
  std::vector<Tensor> velocity_;
  std::size_t step_ = 0;
  bool record_components_ = false;
  std::vector<Tensor> last_task_grads_;
  std::vector<Tensor> last_kure_grads_;
};

enum class Precision { fp32, int8 };

/// Fraction of correctly classified examples. int8 evaluation requires every
/// activation site of `calibration` to be calibrated (StateError otherwise).
double evaluate(const ModelParams& params, const model::ModelConfig& config, const Dataset& data,
                Precision precision, const model::QatState* calibration = nullptr);
double evaluate_int8(const model::QuantizedModel& qm, const Dataset& data);
/// Mean FP32 cross-entropy over `data`.
double evaluate_loss(const ModelParams& params, const model::ModelConfig& config, const Dataset& data);

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

enum class Stage { finetune, qat_finetune, quantize, evaluate };
std::string to_string(Stage stage);
std::optional<Stage> parse_stage(std::string_view text);
inline const std::vector<Stage> kAllStages{Stage::finetune, Stage::qat_finetune, Stage::quantize, Stage::evaluate};

struct StepLog {
  std::size_t step = 0;
  std::string stage;
  StepResult loss;
};

struct KurtosisSnapshot {
  std::size_t step = 0;
  kure::KurtosisReport report;
};

struct HistogramSnapshot {
  std::size_t step = 0;
  std::string tensor;
  kure::Histogram histogram;
};

struct RunRecord {
  std::vector<StepLog> steps;
  std::vector<KurtosisSnapshot> kurtosis;
  std::vector<HistogramSnapshot> histograms;
  std::optional<double> fp32_accuracy;
  std::optional<double> int8_accuracy;
  /// Selection used by the regularizer (empty when no training ran).
  kure::KurtosisReport selection;

  ModelParams final_params;
  model::QatState calibration;
  std::optional<model::QuantizedModel> quantized;

  double initial_target_gap() const;
  double final_target_gap() const;
  /// Serialized form (no timestamps, deterministic key order).
  std::string to_json() const;
};

/// Runs the requested stages in order on `initial`. Stages must be listed in
/// pipeline order. With collapse_stages, finetune and qat_finetune merge into
/// one QAT stage of cfg.steps steps; otherwise each gets half the budget.
RunRecord run_pipeline(const model::ModelConfig& config, const TrainConfig& cfg, ModelParams initial,
                       const std::vector<Stage>& stages);

// ---------------------------------------------------------------------------
// A/B comparison
// ---------------------------------------------------------------------------

struct ArmResult {
  std::uint64_t seed = 0;
  double fp32_accuracy = 0.0;
  double int8_accuracy = 0.0;
  double initial_gap = 0.0;
  double final_gap = 0.0;
  /// Mean |K - target| over included tensors at each report step.
  std::vector<std::pair<std::size_t, double>> gap_trajectory;
  std::vector<KurtosisSnapshot> kurtosis;
};

struct ArmSummary {
  std::string name;
  float lambda = 0.0f;
  std::vector<ArmResult> runs;

  double mean_fp32() const;
  double mean_int8() const;
  double mean_final_gap() const;
  double mean_initial_gap() const;
};

struct AbRecord {
  ArmSummary kure;      ///< QAT with selective KURE
  ArmSummary baseline;  ///< QAT only

  /// mean INT8 accuracy of the KURE arm minus the baseline arm.
  double int8_gap() const { return kure.mean_int8() - baseline.mean_int8(); }
  std::string to_json() const;
  /// arm,fp32_acc,int8_acc,gap table.
  std::string table() const;
};

/// Both arms run the collapsed QAT fine-tune from identical initial weights,
/// data streams and budgets; only lambda differs (cfg.lambda vs 0). One run
/// per seed in `seeds`.
AbRecord ab_experiment(const model::ModelConfig& config, const TrainConfig& cfg, const InitSpec& init,
                       const std::vector<std::uint64_t>& seeds);

}  // namespace kurtq::pipeline
