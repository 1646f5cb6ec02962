// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "kurtq_cli/cli.hpp"

namespace kurtq::cli {

using nlohmann::json;

namespace {

// Walks one JSON object, rejecting keys the reader never asked about.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("'" + display() + "' must be an object");
  }

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config key '" + qualify(key) + "'");
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& dst) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      dst = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + qualify(key) + "' has the wrong type (got " +
                        std::string(obj_.at(key).type_name()) + ")");
    }
  }

  void read_size(const std::string& key, std::size_t& dst) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError("config key '" + qualify(key) + "' must be a non-negative integer");
    }
    dst = v.get<std::size_t>();
  }

  template <typename E, typename Parse>
  void read_enum(const std::string& key, E& dst, Parse parse, const char* choices) {
    std::string text;
    read(key, text);
    if (!obj_.contains(key)) return;
    auto parsed = parse(text);
    if (!parsed) throw ConfigError("config key '" + qualify(key) + "' must be one of " + choices + ", got '" + text + "'");
    dst = *parsed;
  }

  void read_path(const std::string& key, std::optional<std::filesystem::path>& dst) {
    std::string text;
    read(key, text);
    if (obj_.contains(key)) dst = text;
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(obj_.contains(key) ? obj_.at(key) : empty, qualify(key));
  }

  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string locate(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace

CliConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    std::string what = e.what();
    if (auto pos = what.find("parse error"); pos != std::string::npos) what = what.substr(pos);
    throw ConfigError("malformed JSON at " + locate(text, e.byte == 0 ? 0 : e.byte - 1) + ": " + what);
  }

  CliConfig cfg;
  {
    Section root(doc, "");
    {
      Section m = root.child("model");
      m.read_size("num_blocks", cfg.model.num_blocks);
      m.read_size("d_model", cfg.model.d_model);
      m.read_size("num_heads", cfg.model.num_heads);
      m.read_size("d_ff", cfg.model.d_ff);
      m.read_size("vocab", cfg.model.vocab);
      m.read_size("seq_len", cfg.model.seq_len);
      m.read_size("num_classes", cfg.model.num_classes);
    }
    {
      auto& t = cfg.train;
      Section s = root.child("train");
      s.read("lr", t.lr);
      s.read("momentum", t.momentum);
      s.read_size("batch_size", t.batch_size);
      s.read_size("steps", t.steps);
      s.read("lambda", t.lambda);
      s.read_enum("kure_mode", t.kure_mode, kure::parse_penalty_mode, "plain_sum, target_deviation");
      s.read("kure_target", t.kure_target);
      // null disables threshold-based exclusion (naive KURE).
      json threshold;
      s.read("exclusion_threshold", threshold);
      if (s.has("exclusion_threshold")) {
        if (threshold.is_null()) {
          t.exclusion_threshold = std::numeric_limits<double>::infinity();
        } else if (threshold.is_number()) {
          t.exclusion_threshold = threshold.get<double>();
        } else {
          throw ConfigError("config key 'train.exclusion_threshold' must be a number or null");
        }
      }
      s.read("exclusion_patterns", t.exclusion_patterns);
      s.read("qat_enabled", t.qat_enabled);
      s.read("collapse_stages", t.collapse_stages);
      cfg.seed_given = s.has("seed");
      s.read("seed", t.seed);
      s.read_size("report_every", t.report_every);
      s.read("histogram_tensors", t.histogram_tensors);
      s.read("act_decay", t.act_decay);
      s.read_size("calibration_batches", t.calibration_batches);
      s.read_size("eval_size", t.eval_size);
      s.read_enum("task_rule", t.task_rule, pipeline::parse_task_rule, "majority, contains_pattern");
    }
    {
      auto& i = cfg.init;
      Section s = root.child("init");
      s.read_enum("kind", i.kind, pipeline::parse_init_kind, "normal, uniform, pretrained_like");
      s.read("weight_std", i.weight_std);
      s.read("uniform_bound", i.uniform_bound);
      s.read_enum("heavy_site", i.pretrained.heavy_site, model::parse_heavy_site, "ffn.fc1, ffn.fc2");
      s.read("heavy_dof", i.pretrained.heavy_dof);
      s.read("core_scale", i.pretrained.core_scale);
      s.read_size("outliers", i.pretrained.outliers);
      s.read("outlier_magnitude", i.pretrained.outlier_magnitude);
    }
    {
      Section s = root.child("paths");
      s.read_path("checkpoint", cfg.paths.checkpoint);
      s.read_path("out", cfg.paths.out);
      s.read_path("record", cfg.paths.record);
      s.read_path("histogram_dir", cfg.paths.histogram_dir);
    }
    {
      Section s = root.child("ab");
      s.read("seeds", cfg.ab_seeds);
    }
  }

  // Semantic validation, with errors phrased in terms of config keys.
  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (cfg.train.task_rule == pipeline::TaskRule::contains_pattern && cfg.model.num_classes != 2) {
    throw ConfigError("train.task_rule contains_pattern needs model.num_classes = 2");
  }
  if (cfg.model.vocab < cfg.model.num_classes) throw ConfigError("model.vocab must be >= model.num_classes");
  if (!(cfg.init.weight_std > 0.0)) throw ConfigError("init.weight_std must be positive");
  if (!(cfg.init.uniform_bound > 0.0)) throw ConfigError("init.uniform_bound must be positive");
  if (!(cfg.init.pretrained.heavy_dof > 0.0)) throw ConfigError("init.heavy_dof must be positive");
  if (!(cfg.init.pretrained.core_scale > 0.0)) throw ConfigError("init.core_scale must be positive");
  if (!(cfg.init.pretrained.outlier_magnitude > 0.0)) throw ConfigError("init.outlier_magnitude must be positive");
  if (cfg.ab_seeds.empty()) throw ConfigError("ab.seeds must not be empty");
  return cfg;
}

CliConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace kurtq::cli
