// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kurtq {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid numeric parameter (non-positive scale, bad distribution, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Tensor with too few elements for a statistic.
class DegenerateTensorError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar node.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad user input such as an out-of-vocabulary token.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong state (int8 evaluation without calibration).
class StateError : public Error {
 public:
  using Error::Error;
};

/// File could not be read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint. `offset()` is the byte position where reading failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, double task_loss, double kure_loss)
      : Error("training diverged at step " + std::to_string(step) +
              ": task_loss=" + std::to_string(task_loss) +
              " kure_loss=" + std::to_string(kure_loss)),
        step_(step),
        task_loss_(task_loss),
        kure_loss_(kure_loss) {}
  std::size_t step() const noexcept { return step_; }
  double task_loss() const noexcept { return task_loss_; }
  double kure_loss() const noexcept { return kure_loss_; }

 private:
  std::size_t step_;
  double task_loss_;
  double kure_loss_;
};

}  // namespace kurtq
