// SPDX-License-Identifier: Apache-2.0
#include "kurtq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace kurtq::pipeline {

using nlohmann::json;

std::string to_string(TaskRule rule) { return rule == TaskRule::majority ? "majority" : "contains_pattern"; }

std::optional<TaskRule> parse_task_rule(std::string_view text) {
  if (text == "majority") return TaskRule::majority;
  if (text == "contains_pattern") return TaskRule::contains_pattern;
  return std::nullopt;
}

SyntheticTask::SyntheticTask(std::size_t vocab, std::size_t seq_len, std::size_t num_classes, TaskRule rule)
    : vocab_(vocab), seq_len_(seq_len), num_classes_(num_classes), rule_(rule) {
  if (vocab_ < num_classes_ || num_classes_ < 2 || seq_len_ == 0) {
    throw ParameterError("task needs vocab >= num_classes >= 2 and seq_len >= 1");
  }
  if (rule_ == TaskRule::contains_pattern && num_classes_ != 2) {
    throw ParameterError("contains_pattern task needs num_classes = 2");
  }
}

int SyntheticTask::label(const std::vector<int>& tokens) const {
  if (rule_ == TaskRule::contains_pattern) {
    const bool a = std::find(tokens.begin(), tokens.end(), 0) != tokens.end();
    const bool b = std::find(tokens.begin(), tokens.end(), 1) != tokens.end();
    return a && b ? 1 : 0;
  }
  std::vector<std::size_t> counts(num_classes_, 0);
  for (int t : tokens) counts[static_cast<std::size_t>(t) % num_classes_] += 1;
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Example SyntheticTask::sample(Rng& rng) const {
  Example e;
  e.tokens.resize(seq_len_);
  for (auto& t : e.tokens) t = static_cast<int>(rng.below(vocab_));
  e.label = label(e.tokens);
  return e;
}

Dataset SyntheticTask::make_dataset(Rng& rng, std::size_t n) const {
  Dataset d;
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.examples.push_back(sample(rng));
  return d;
}

Batch make_batch(const SyntheticTask& task, Rng& rng, std::size_t size) {
  Batch b;
  for (std::size_t i = 0; i < size; ++i) {
    Example e = task.sample(rng);
    b.tokens.push_back(std::move(e.tokens));
    b.labels.push_back(e.label);
  }
  return b;
}

std::string to_string(InitKind kind) {
  switch (kind) {
    case InitKind::normal: return "normal";
    case InitKind::uniform: return "uniform";
    case InitKind::pretrained_like: return "pretrained_like";
  }
  return "?";
}

std::optional<InitKind> parse_init_kind(std::string_view text) {
  if (text == "normal") return InitKind::normal;
  if (text == "uniform") return InitKind::uniform;
  if (text == "pretrained_like") return InitKind::pretrained_like;
  return std::nullopt;
}

ModelParams make_initial_params(const InitSpec& spec, const model::ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  switch (spec.kind) {
    case InitKind::normal: return model::init_params(rng, config, NormalDist{0.0, spec.weight_std});
    case InitKind::uniform:
      return model::init_params(rng, config, UniformDist{-spec.uniform_bound, spec.uniform_bound});
    case InitKind::pretrained_like: {
      model::PretrainedLikeSpec p = spec.pretrained;
      p.weight_std = spec.weight_std;
      return model::generate_pretrained_like(rng, config, p);
    }
  }
  throw ParameterError("unknown init kind");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0f)) throw ParameterError("train.lr must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ParameterError("train.momentum must be in [0, 1)");
  if (batch_size < 1) throw ParameterError("train.batch_size must be >= 1");
  if (steps < 1) throw ParameterError("train.steps must be >= 1");
  if (!(lambda >= 0.0f)) throw ParameterError("train.lambda must be >= 0");
  if (report_every < 1) throw ParameterError("train.report_every must be >= 1");
  if (!(act_decay > 0.0f && act_decay <= 1.0f)) throw ParameterError("train.act_decay must be in (0, 1]");
  if (eval_size < 2000) throw ParameterError("train.eval_size must be >= 2000");
  if (calibration_batches < 1) throw ParameterError("train.calibration_batches must be >= 1");
}

// ---------------------------------------------------------------------------

Trainer::Trainer(ModelParams params, model::ModelConfig config)
    : params_(std::move(params)), config_(std::move(config)) {
  model::check_params(params_, config_);
  for (const auto& e : params_) velocity_.emplace_back(e.value.shape());
}

StepResult Trainer::train_step(const Batch& batch, const TrainConfig& cfg, const kure::KurtosisReport& selection,
                               model::QatState* qat) {
  ad::Tape tape;
  const auto p = model::bind(tape, params_);
  const ad::Var logits = model::forward(tape, p, config_, batch.tokens, qat);
  const ad::Var task = ad::cross_entropy(tape, logits, batch.labels);

  std::vector<ad::Var> weights;
  std::vector<bool> mask;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!kure::is_weight_tensor(params_[i].name)) continue;
    weights.push_back(p.vars[i]);
    mask.push_back(selection.is_included(params_[i].name));
  }
  const ad::Var penalty = ad::kure_penalty(tape, weights, mask, cfg.kure_mode, cfg.kure_target);

  StepResult r;
  r.task_loss = static_cast<double>(tape.value(task)[0]);
  r.kure_loss = static_cast<double>(tape.value(penalty)[0]);
  r.total_loss = r.task_loss + static_cast<double>(cfg.lambda) * r.kure_loss;
  if (!std::isfinite(r.task_loss) || !std::isfinite(r.kure_loss) || !std::isfinite(r.total_loss)) {
    throw DivergenceError(step_, r.task_loss, r.kure_loss);
  }

  const bool regularize = cfg.lambda > 0.0f && tape.requires_grad(penalty);
  if (record_components_) {
    auto collect = [&](ad::Var root, std::vector<Tensor>& out) {
      tape.backward(root);
      out.clear();
      for (auto v : p.vars) out.push_back(tape.grad(v));
    };
    collect(task, last_task_grads_);
    if (tape.requires_grad(penalty)) {
      collect(penalty, last_kure_grads_);
    } else {
      last_kure_grads_.clear();
      for (const auto& e : params_) last_kure_grads_.emplace_back(e.value.shape());
    }
  }

  const ad::Var loss = regularize ? ad::add(tape, task, ad::scale(tape, penalty, cfg.lambda)) : task;
  tape.backward(loss);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& g = tape.grad(p.vars[i]);
    auto vel = velocity_[i].data();
    auto w = params_[i].value.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      vel[k] = cfg.momentum * vel[k] + g[k];
      w[k] -= cfg.lr * vel[k];
    }
  }
  ++step_;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kEvalChunk = 100;

template <typename Predict>
double accuracy(const Dataset& data, Predict&& predict) {
  if (data.size() == 0) throw InputError("cannot evaluate on an empty dataset");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    model::TokenBatch tokens;
    for (std::size_t i = start; i < end; ++i) tokens.push_back(data.examples[i].tokens);
    const Tensor logits = predict(tokens);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      const float* row = logits.data().data() + r * logits.cols();
      const auto pred = std::max_element(row, row + logits.cols()) - row;
      if (pred == data.examples[start + r].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

double evaluate_int8(const model::QuantizedModel& qm, const Dataset& data) {
  return accuracy(data, [&](const model::TokenBatch& t) { return model::predict_int8(qm, t); });
}

double evaluate_loss(const ModelParams& params, const model::ModelConfig& config, const Dataset& data) {
  if (data.size() == 0) throw InputError("cannot evaluate on an empty dataset");
  double total = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    model::TokenBatch tokens;
    std::vector<int> labels;
    for (std::size_t i = start; i < end; ++i) {
      tokens.push_back(data.examples[i].tokens);
      labels.push_back(data.examples[i].label);
    }
    ad::Tape tape;
    const auto p = model::bind(tape, params, false);
    const ad::Var loss = ad::cross_entropy(tape, model::forward(tape, p, config, tokens, nullptr), labels);
    total += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(end - start);
  }
  return total / static_cast<double>(data.size());
}

double evaluate(const ModelParams& params, const model::ModelConfig& config, const Dataset& data,
                Precision precision, const model::QatState* calibration) {
  if (precision == Precision::fp32) {
    return accuracy(data, [&](const model::TokenBatch& t) { return model::predict(params, config, t); });
  }
  if (calibration == nullptr) throw StateError("int8 evaluation needs activation calibration");
  return evaluate_int8(model::quantize_model(params, config, *calibration), data);
}

// ---------------------------------------------------------------------------

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::finetune: return "finetune";
    case Stage::qat_finetune: return "qat_finetune";
    case Stage::quantize: return "quantize";
    case Stage::evaluate: return "evaluate";
  }
  return "?";
}

std::optional<Stage> parse_stage(std::string_view text) {
  for (Stage s : kAllStages)
    if (to_string(s) == text) return s;
  return std::nullopt;
}

namespace {

double gap_of(const std::vector<KurtosisSnapshot>& snaps, bool first) {
  if (snaps.empty()) return 0.0;
  return (first ? snaps.front() : snaps.back()).report.mean_target_gap();
}

struct Phase {
  std::string name;
  std::size_t steps;
  bool qat;
};

// Mixes the seed so the training stream differs from the held-out stream
// Rng(seed + 1) and from the initialization stream Rng(seed).
constexpr std::uint64_t kTrainStream = 0x9E3779B97F4A7C15ull;

}  // namespace

double RunRecord::initial_target_gap() const { return gap_of(kurtosis, true); }
double RunRecord::final_target_gap() const { return gap_of(kurtosis, false); }

RunRecord run_pipeline(const model::ModelConfig& config, const TrainConfig& cfg, ModelParams initial,
                       const std::vector<Stage>& stages) {
  config.validate();
  cfg.validate();
  for (std::size_t i = 1; i < stages.size(); ++i) {
    if (static_cast<int>(stages[i]) <= static_cast<int>(stages[i - 1])) {
      throw ParameterError("stages must be listed once each, in the order finetune, qat_finetune, quantize, evaluate");
    }
  }
  const auto has = [&](Stage s) { return std::find(stages.begin(), stages.end(), s) != stages.end(); };

  Trainer trainer(std::move(initial), config);
  const SyntheticTask task = SyntheticTask::for_model(config, cfg.task_rule);
  Rng train_rng(cfg.seed ^ kTrainStream);
  RunRecord rec;
  model::QatState qat(false, cfg.act_decay);

  std::vector<Phase> phases;
  const bool ft = has(Stage::finetune), qft = has(Stage::qat_finetune);
  if (ft && qft && cfg.collapse_stages) {
    phases.push_back({"finetune+qat", cfg.steps, cfg.qat_enabled});
  } else if (ft && qft) {
    phases.push_back({"finetune", cfg.steps / 2, false});
    phases.push_back({"qat_finetune", cfg.steps - cfg.steps / 2, cfg.qat_enabled});
  } else if (ft) {
    phases.push_back({"finetune", cfg.steps, false});
  } else if (qft) {
    phases.push_back({"qat_finetune", cfg.steps, cfg.qat_enabled});
  }

  auto snapshot = [&](std::size_t step) {
    rec.kurtosis.push_back({step, kure::kurtosis_report_with_selection(trainer.params(), rec.selection)});
    for (const auto& name : cfg.histogram_tensors) {
      if (trainer.params().contains(name)) {
        rec.histograms.push_back({step, name, kure::make_histogram(trainer.params().at(name))});
      }
    }
  };

  if (!phases.empty()) {
    rec.selection = kure::kurtosis_report(trainer.params(), cfg.selection_policy());
    rec.selection.lambda = cfg.lambda;
    rec.selection.mode = cfg.kure_mode;
    rec.selection.target = cfg.kure_target;
    snapshot(0);
    std::size_t step = 0;
    for (const auto& phase : phases) {
      qat.set_enabled(phase.qat);
      for (std::size_t i = 0; i < phase.steps; ++i) {
        const Batch batch = make_batch(task, train_rng, cfg.batch_size);
        const StepResult r = trainer.train_step(batch, cfg, rec.selection, phase.qat ? &qat : nullptr);
        ++step;
        rec.steps.push_back({step, phase.name, r});
        if (step % cfg.report_every == 0) snapshot(step);
      }
    }
    if (rec.kurtosis.back().step != step) snapshot(step);
  }

  if (has(Stage::quantize)) {
    bool calibrated = true;
    for (const auto& site : model::activation_sites(config)) calibrated = calibrated && qat.has_site(site);
    if (!calibrated) {
      // Post-training calibration over a few training batches.
      qat = model::QatState(true, cfg.act_decay);
      for (std::size_t b = 0; b < cfg.calibration_batches; ++b) {
        const Batch batch = make_batch(task, train_rng, cfg.batch_size);
        model::predict(trainer.params(), config, batch.tokens, &qat);
      }
    }
    qat.set_enabled(true);
    rec.quantized = model::quantize_model(trainer.params(), config, qat);
  }

  if (has(Stage::evaluate)) {
    Rng eval_rng(cfg.seed + 1);
    const Dataset held_out = task.make_dataset(eval_rng, cfg.eval_size);
    rec.fp32_accuracy = evaluate(trainer.params(), config, held_out, Precision::fp32);
    if (rec.quantized) rec.int8_accuracy = evaluate_int8(*rec.quantized, held_out);
  }

  rec.final_params = trainer.params();
  rec.calibration = qat;
  return rec;
}

namespace {

json report_json(const kure::KurtosisReport& r) {
  json tensors = json::array();
  for (const auto& e : r.entries) {
    tensors.push_back({{"name", e.name}, {"kurtosis", e.kurtosis}, {"included", e.included}});
  }
  return tensors;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::string RunRecord::to_json() const {
  json j;
  json task = json::array(), kure_l = json::array(), total = json::array(), stage = json::array();
  for (const auto& s : steps) {
    task.push_back(s.loss.task_loss);
    kure_l.push_back(s.loss.kure_loss);
    total.push_back(s.loss.total_loss);
  }
  json phases = json::array();
  for (const auto& s : steps) {
    if (phases.empty() || phases.back()["name"] != s.stage) {
      phases.push_back({{"name", s.stage}, {"first_step", s.step}, {"steps", 0}});
    }
    phases.back()["steps"] = phases.back()["steps"].get<std::size_t>() + 1;
  }
  j["steps"] = steps.size();
  j["phases"] = phases;
  j["task_loss"] = task;
  j["kure_loss"] = kure_l;
  j["total_loss"] = total;
  j["selection"] = {{"threshold", selection.threshold},
                    {"lambda", selection.lambda},
                    {"mode", kure::to_string(selection.mode)},
                    {"target", selection.target},
                    {"excluded", selection.excluded_names()}};
  json snaps = json::array();
  for (const auto& s : kurtosis) {
    snaps.push_back({{"step", s.step}, {"mean_target_gap", s.report.mean_target_gap()}, {"tensors", report_json(s.report)}});
  }
  j["kurtosis"] = snaps;
  json hists = json::array();
  for (const auto& h : histograms) {
    hists.push_back({{"step", h.step},
                     {"tensor", h.tensor},
                     {"lo", h.histogram.lo},
                     {"hi", h.histogram.hi},
                     {"counts", h.histogram.counts}});
  }
  j["histograms"] = hists;
  j["fp32_accuracy"] = optional_json(fp32_accuracy);
  j["int8_accuracy"] = optional_json(int8_accuracy);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

namespace {

template <typename F>
double mean_over(const std::vector<ArmResult>& runs, F&& f) {
  if (runs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : runs) total += f(r);
  return total / static_cast<double>(runs.size());
}

ArmResult run_arm(const model::ModelConfig& config, TrainConfig cfg, const InitSpec& init, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.collapse_stages = true;
  cfg.qat_enabled = true;
  RunRecord rec = run_pipeline(config, cfg, make_initial_params(init, config, seed), kAllStages);
  ArmResult out;
  out.seed = seed;
  out.fp32_accuracy = rec.fp32_accuracy.value_or(0.0);
  out.int8_accuracy = rec.int8_accuracy.value_or(0.0);
  out.initial_gap = rec.initial_target_gap();
  out.final_gap = rec.final_target_gap();
  for (const auto& s : rec.kurtosis) out.gap_trajectory.emplace_back(s.step, s.report.mean_target_gap());
  out.kurtosis = std::move(rec.kurtosis);
  return out;
}

json arm_json(const ArmSummary& arm) {
  json runs = json::array();
  for (const auto& r : arm.runs) {
    json traj = json::array();
    for (const auto& s : r.kurtosis) {
      traj.push_back({{"step", s.step}, {"mean_target_gap", s.report.mean_target_gap()}, {"tensors", report_json(s.report)}});
    }
    runs.push_back({{"seed", r.seed},
                    {"fp32_accuracy", r.fp32_accuracy},
                    {"int8_accuracy", r.int8_accuracy},
                    {"initial_gap", r.initial_gap},
                    {"final_gap", r.final_gap},
                    {"kurtosis_trajectory", traj}});
  }
  return {{"name", arm.name},
          {"lambda", arm.lambda},
          {"mean_fp32_accuracy", arm.mean_fp32()},
          {"mean_int8_accuracy", arm.mean_int8()},
          {"mean_initial_gap", arm.mean_initial_gap()},
          {"mean_final_gap", arm.mean_final_gap()},
          {"runs", runs}};
}

}  // namespace

double ArmSummary::mean_fp32() const { return mean_over(runs, [](const ArmResult& r) { return r.fp32_accuracy; }); }
double ArmSummary::mean_int8() const { return mean_over(runs, [](const ArmResult& r) { return r.int8_accuracy; }); }
double ArmSummary::mean_final_gap() const { return mean_over(runs, [](const ArmResult& r) { return r.final_gap; }); }
double ArmSummary::mean_initial_gap() const {
  return mean_over(runs, [](const ArmResult& r) { return r.initial_gap; });
}

std::string AbRecord::to_json() const {
  json j;
  j["arms"] = json::array({arm_json(kure), arm_json(baseline)});
  j["int8_gap"] = int8_gap();
  return j.dump(2) + "\n";
}

std::string AbRecord::table() const {
  std::ostringstream os;
  char buf[256];
  os << "arm,fp32_acc,int8_acc,gap\n";
  for (const ArmSummary* arm : {&kure, &baseline}) {
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f\n", arm->name.c_str(), arm->mean_fp32(), arm->mean_int8(),
                  arm->mean_fp32() - arm->mean_int8());
    os << buf;
  }
  return os.str();
}

AbRecord ab_experiment(const model::ModelConfig& config, const TrainConfig& cfg, const InitSpec& init,
                       const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ParameterError("ab experiment needs at least one seed");
  AbRecord rec;
  rec.kure.name = "qat+kure";
  rec.kure.lambda = cfg.lambda;
  rec.baseline.name = "qat-only";
  rec.baseline.lambda = 0.0f;
  TrainConfig base = cfg;
  base.lambda = 0.0f;
  for (auto seed : seeds) {
    rec.kure.runs.push_back(run_arm(config, cfg, init, seed));
    rec.baseline.runs.push_back(run_arm(config, base, init, seed));
  }
  return rec;
}

}  // namespace kurtq::pipeline
