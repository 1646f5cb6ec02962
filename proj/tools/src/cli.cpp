// SPDX-License-Identifier: Apache-2.0
#include "kurtq_cli/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>

#include <CLI11.hpp>

#include "kurtq/checkpoint.hpp"
#include "kurtq/kure.hpp"

namespace kurtq::cli {

namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string config, out, record, hist_dir, in;
  std::vector<std::string> stages;
  std::optional<std::uint64_t> seed;
};

struct QuantizeArgs {
  std::string in, out;
};

struct InspectArgs {
  std::string in, csv;
  double threshold = 100.0;
  std::vector<std::string> exclude;
  std::vector<std::string> hist;  // name, path pairs
};

struct AbArgs {
  std::string config, out;
  std::vector<std::uint64_t> seeds;
};

struct InitArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << content;
  if (!os.flush()) throw IoError("write to '" + path.string() + "' failed");
}

const std::string& require_config(const std::string& path) {
  if (path.empty()) throw ConfigError("a config file is required (positional or --config)");
  return path;
}

std::uint64_t parse_seed_text(const std::string& text, const char* source) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used, 10);
    if (used != text.size() || text.starts_with('-')) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string(source) + " must be a non-negative integer, got '" + text + "'");
  }
}

// Flag beats config file beats KURTQ_SEED beats the built-in default.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const CliConfig& cfg) {
  if (flag) return *flag;
  if (cfg.seed_given) return cfg.train.seed;
  if (const char* env = std::getenv("KURTQ_SEED"); env != nullptr && *env != '\0') {
    return parse_seed_text(env, "KURTQ_SEED");
  }
  return cfg.train.seed;
}

std::vector<pipeline::Stage> parse_stages(const std::vector<std::string>& names) {
  if (names.empty()) return pipeline::kAllStages;
  std::vector<pipeline::Stage> out;
  for (const auto& n : names) {
    auto s = pipeline::parse_stage(n);
    if (!s) throw ConfigError("unknown stage '" + n + "' (valid: finetune, qat_finetune, quantize, evaluate)");
    out.push_back(*s);
  }
  return out;
}

ModelParams load_fp32(const fs::path& path, const model::ModelConfig& config) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.is_quantized()) throw ConfigError("checkpoint '" + path.string() + "' is INT8; training needs FP32 weights");
  ModelParams p = ck.to_params();
  try {
    model::check_params(p, config);
  } catch (const DimensionError& e) {
    throw ConfigError("checkpoint '" + path.string() + "' does not match the model config: " + e.what());
  }
  return p;
}

std::string step_tag(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step%06zu", step);
  return buf;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  CliConfig cfg = load_config(require_config(a.config));
  cfg.train.seed = resolve_seed(a.seed, cfg);
  const auto stages = parse_stages(a.stages);
  const bool trains = std::any_of(stages.begin(), stages.end(), [](pipeline::Stage s) {
    return s == pipeline::Stage::finetune || s == pipeline::Stage::qat_finetune;
  });

  std::optional<fs::path> in = a.in.empty() ? cfg.paths.checkpoint : std::optional<fs::path>(a.in);
  if (!in && !trains) {
    throw ConfigError("--stages without finetune or qat_finetune needs an input checkpoint (--in or paths.checkpoint)");
  }
  const fs::path out_path = !a.out.empty() ? fs::path(a.out) : cfg.paths.out.value_or("model.kq");
  const fs::path record_path = !a.record.empty() ? fs::path(a.record)
                               : cfg.paths.record ? *cfg.paths.record
                                                  : fs::path(out_path).replace_extension(".run.json");
  const fs::path hist_dir = !a.hist_dir.empty() ? fs::path(a.hist_dir)
                            : cfg.paths.histogram_dir ? *cfg.paths.histogram_dir
                                                      : fs::path(out_path).replace_extension(".hist");
  if (in && fs::weakly_canonical(*in) == fs::weakly_canonical(out_path)) {
    throw ConfigError("--out must differ from the input checkpoint");
  }

  ModelParams initial = in ? load_fp32(*in, cfg.model)
                           : pipeline::make_initial_params(cfg.init, cfg.model, cfg.train.seed);
  pipeline::RunRecord rec = pipeline::run_pipeline(cfg.model, cfg.train, std::move(initial), stages);

  save_checkpoint(rec.final_params, out_path);
  write_file(record_path, rec.to_json());
  for (const auto& h : rec.histograms) {
    std::ostringstream csv;
    h.histogram.write_csv(csv);
    write_file(hist_dir / (h.tensor + "." + step_tag(h.step) + ".csv"), csv.str());
  }

  out << "seed " << cfg.train.seed << ", " << rec.steps.size() << " steps\n";
  if (!rec.steps.empty()) {
    const auto& last = rec.steps.back().loss;
    out << "final task_loss " << last.task_loss << ", kure_loss " << last.kure_loss << "\n";
    out << "excluded " << rec.selection.excluded_count() << " of " << rec.selection.entries.size()
        << " weight tensors; mean |K - target| " << rec.initial_target_gap() << " -> " << rec.final_target_gap()
        << "\n";
  }
  if (rec.fp32_accuracy) out << "fp32_accuracy " << *rec.fp32_accuracy << "\n";
  if (rec.int8_accuracy) out << "int8_accuracy " << *rec.int8_accuracy << "\n";
  out << "checkpoint " << out_path.string() << "\nrecord " << record_path.string() << "\n";
  return kOk;
}

int cmd_quantize(const QuantizeArgs& a, std::ostream& out) {
  if (fs::weakly_canonical(a.in) == fs::weakly_canonical(a.out)) {
    throw ConfigError("--out must differ from --in");
  }
  const Checkpoint ck = load_checkpoint(a.in);
  const Checkpoint q = ck.quantized();
  save_checkpoint(q, a.out);
  out << "quantized " << q.entries.size() << " tensors to INT8: " << a.out << "\n";
  return kOk;
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.in);
  const ModelParams params = ck.to_params();
  std::vector<std::pair<std::string, fs::path>> hists;
  for (std::size_t i = 0; i + 1 < a.hist.size(); i += 2) hists.emplace_back(a.hist[i], a.hist[i + 1]);
  for (const auto& [name, path] : hists) {
    if (!params.contains(name)) {
      std::string valid;
      for (const auto& n : params.names()) valid += (valid.empty() ? "" : ", ") + n;
      throw InputError("unknown tensor '" + name + "'; valid names: " + valid);
    }
  }

  const kure::KurtosisReport rep = kure::kurtosis_report(params, kure::SelectionPolicy{a.threshold, a.exclude});
  out << "name,dtype,shape,scale\n";
  for (const auto& e : ck.entries) {
    out << e.name << "," << (e.is_int8() ? "int8" : "fp32") << "," << to_string(e.shape()) << ",";
    if (e.is_int8()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(std::get<quant::QTensor>(e.data).scale));
      out << buf;
    }
    out << "\n";
  }
  out << "excluded " << rep.excluded_count() << " of " << rep.entries.size() << " weight tensors (threshold "
      << a.threshold << ")";
  for (const auto& n : rep.excluded_names()) out << "\n  " << n;
  out << "\ntotal kurtosis " << rep.total_kurtosis() << "\n";

  if (!a.csv.empty()) {
    std::ostringstream csv;
    rep.write_csv(csv);
    write_file(a.csv, csv.str());
  }
  for (const auto& [name, path] : hists) {
    std::ostringstream csv;
    kure::make_histogram(params.at(name)).write_csv(csv);
    write_file(path, csv.str());
  }
  return kOk;
}

int cmd_ab(const AbArgs& a, std::ostream& out) {
  CliConfig cfg = load_config(require_config(a.config));
  const std::vector<std::uint64_t> seeds = a.seeds.empty() ? cfg.ab_seeds : a.seeds;
  const fs::path out_path = !a.out.empty() ? fs::path(a.out) : cfg.paths.record.value_or("ab.json");
  const pipeline::AbRecord rec = pipeline::ab_experiment(cfg.model, cfg.train, cfg.init, seeds);
  write_file(out_path, rec.to_json());
  out << rec.table();
  char buf[64];
  std::snprintf(buf, sizeof buf, "int8_gap %.4f\n", rec.int8_gap());
  out << buf << "record " << out_path.string() << "\n";
  return kOk;
}

int cmd_init(const InitArgs& a, std::ostream& out) {
  CliConfig cfg = load_config(require_config(a.config));
  const std::uint64_t seed = resolve_seed(a.seed, cfg);
  const fs::path out_path = !a.out.empty() ? fs::path(a.out) : cfg.paths.out.value_or("init.kq");
  save_checkpoint(pipeline::make_initial_params(cfg.init, cfg.model, seed), out_path);
  out << "wrote " << pipeline::to_string(cfg.init.kind) << " initial weights (seed " << seed << ") to "
      << out_path.string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"kurtq: INT8 quantization-aware training with a selective kurtosis regularizer"};
  app.name("kurtq");
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "fine-tune (optionally under QAT), quantize and evaluate");
  train->add_option("config,--config", ta.config, "JSON config file");
  train->add_option("--out", ta.out, "output checkpoint");
  train->add_option("--record", ta.record, "RunRecord JSON path (default: <out>.run.json)");
  train->add_option("--hist-dir", ta.hist_dir, "histogram CSV directory (default: <out>.hist)");
  train->add_option("--in", ta.in, "initial FP32 checkpoint (default: generated from the init section)");
  train->add_option("--stages", ta.stages, "comma list of finetune,qat_finetune,quantize,evaluate")->delimiter(',');
  train->add_option("--seed", ta.seed, "seed (overrides the config and KURTQ_SEED)");

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "convert an FP32 checkpoint to INT8 with MAX_ABS scales");
  quantize->add_option("--in", qa.in, "FP32 checkpoint")->required();
  quantize->add_option("--out", qa.out, "INT8 checkpoint")->required();

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "per-tensor kurtosis report and histograms");
  inspect->add_option("--in", ia.in, "checkpoint")->required();
  inspect->add_option("--threshold", ia.threshold, "exclude tensors with kurtosis above this value");
  inspect->add_option("--exclude", ia.exclude, "name glob to exclude (repeatable)");
  inspect->add_option("--csv", ia.csv, "write the kurtosis report CSV here");
  inspect->add_option("--hist", ia.hist, "TENSOR PATH: write a 64-bin histogram CSV (repeatable)")->expected(2)->allow_extra_args(false);

  AbArgs aa;
  auto* ab = app.add_subcommand("ab", "compare QAT with selective KURE against QAT alone");
  ab->add_option("config,--config", aa.config, "JSON config file");
  ab->add_option("--out", aa.out, "comparison JSON (default: paths.record or ab.json)");
  ab->add_option("--seeds", aa.seeds, "comma list of seeds")->delimiter(',');

  InitArgs na;
  auto* init = app.add_subcommand("init", "write initial weights described by the init section");
  init->add_option("config,--config", na.config, "JSON config file");
  init->add_option("--out", na.out, "output checkpoint");
  init->add_option("--seed", na.seed, "seed (overrides the config and KURTQ_SEED)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(ta, out);
    if (*quantize) return cmd_quantize(qa, out);
    if (*inspect) return cmd_inspect(ia, out);
    if (*ab) return cmd_ab(aa, out);
    if (*init) return cmd_init(na, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}

}  // namespace kurtq::cli
