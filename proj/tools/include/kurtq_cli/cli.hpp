// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Kept in a library so tests can drive it in-process.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kurtq/model.hpp"
#include "kurtq/pipeline.hpp"

namespace kurtq::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,       ///< bad arguments or configuration
  kNumeric = 2,     ///< training diverged
  kIo = 3,          ///< unreadable/unwritable file or malformed checkpoint
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct PathsConfig {
  std::optional<std::filesystem::path> checkpoint;  ///< initial weights; generated when absent
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> record;
  std::optional<std::filesystem::path> histogram_dir;
};

struct CliConfig {
  model::ModelConfig model;
  pipeline::TrainConfig train;
  pipeline::InitSpec init;
  PathsConfig paths;
  std::vector<std::uint64_t> ab_seeds{1, 2, 3, 4, 5};
  bool seed_given = false;  ///< train.seed present in the file
};

/// Parses and fully validates a config document. Throws ConfigError naming
/// the offending key (or the line/column of a syntax error).
CliConfig parse_config(const std::string& text);
CliConfig load_config(const std::filesystem::path& path);

/// Runs one command; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kurtq::cli
