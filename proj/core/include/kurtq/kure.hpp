// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kurtq/autodiff.hpp"
#include "kurtq/params.hpp"
#include "kurtq/tensor.hpp"

namespace kurtq::kure {

inline constexpr double kDefaultEps = 1e-12;
/// Kurtosis of the continuous uniform distribution.
inline constexpr double kUniformKurtosis = 1.8;

enum class PenaltyMode { plain_sum, target_deviation };

std::string to_string(PenaltyMode mode);
/// Parses "plain_sum" / "target_deviation"; nullopt otherwise.
std::optional<PenaltyMode> parse_penalty_mode(std::string_view text);

/// Population statistics of a tensor, accumulated in double.
struct Stats {
  std::size_t numel = 0;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double m2 = 0.0;  ///< central moments, divide-by-n
  double m3 = 0.0;
  double m4 = 0.0;
  /// All elements equal; kurtosis is reported as 0.
  bool degenerate = false;
};

/// Throws DegenerateTensorError for fewer than two elements.
template <typename T>
Stats tensor_stats(const BasicTensor<T>& t);

/// K = m4 / (m2 + eps)^2 with population moments. Constant tensors give 0.
template <typename T>
T kurtosis(const BasicTensor<T>& t, double eps = kDefaultEps);

/// dK/dt. Sums to ~0 (translation invariance) and is orthogonal to t for
/// centred t (scale invariance). Constant tensors get a zero gradient.
template <typename T>
BasicTensor<T> kurtosis_grad(const BasicTensor<T>& t, double eps = kDefaultEps);

/// Scalar penalty over the included tensors:
///   plain_sum:        sum_j K(T_j)
///   target_deviation: sum_j (K(T_j) - target)^2
/// Throws ContractError when the mask length differs from the tensor count.
template <typename T>
double penalty_value(const std::vector<const BasicTensor<T>*>& tensors, const std::vector<bool>& included,
                     PenaltyMode mode, double target = kUniformKurtosis, double eps = kDefaultEps);

struct ReportEntry {
  std::string name;
  Stats stats;
  double kurtosis = 0.0;
  bool included = true;
};

/// Per-tensor kurtosis of the weight matrices of a model, plus the
/// selection that decides which ones the regularizer sees.
struct KurtosisReport {
  std::vector<ReportEntry> entries;
  double lambda = 0.0;
  PenaltyMode mode = PenaltyMode::target_deviation;
  double target = kUniformKurtosis;
  double threshold = 100.0;

  std::size_t excluded_count() const;
  std::vector<std::string> excluded_names() const;
  std::vector<std::string> included_names() const;
  bool is_included(std::string_view name) const;
  /// Mean |K - target| over included entries; 0 when none are included.
  double mean_target_gap() const;
  /// Sum of K over every entry, regardless of inclusion.
  double total_kurtosis() const;

  /// CSV with header name,numel,min,max,mean,std,kurtosis,included and
  /// values printed with 9 significant digits.
  void write_csv(std::ostream& os) const;
};

struct SelectionPolicy {
  /// Tensors with K above this are excluded.
  double threshold = 100.0;
  /// fnmatch-style globs; matching tensors are excluded.
  std::vector<std::string> exclusion_patterns;
};

/// True for tensors the report covers: weight matrices named `*.w`.
bool is_weight_tensor(std::string_view name);

bool matches_any(std::string_view name, const std::vector<std::string>& patterns);

/// Entry per weight tensor; included = not degenerate, K <= threshold and
/// no exclusion pattern matches.
KurtosisReport kurtosis_report(const ModelParams& model, const SelectionPolicy& policy);

/// Same statistics, with inclusion flags copied from `selection` by name.
KurtosisReport kurtosis_report_with_selection(const ModelParams& model, const KurtosisReport& selection);

/// Equal-width histogram spanning [min, max] of a tensor; the last bin is
/// closed so every element is counted. A constant tensor spans value +/- 0.5.
struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;

  double bin_left(std::size_t i) const;
  double bin_right(std::size_t i) const;
  std::size_t total() const;
  /// CSV with header bin_left,bin_right,count.
  void write_csv(std::ostream& os) const;
};

inline constexpr std::size_t kHistogramBins = 64;

Histogram make_histogram(const Tensor& t, std::size_t bins = kHistogramBins);

}  // namespace kurtq::kure

namespace kurtq::ad {

/// Kurtosis of a tensor as a scalar tape node.
template <typename T>
Var kurtosis(BasicTape<T>& tape, Var x, double eps = kure::kDefaultEps);

/// Regularizer node. Only tensors whose mask entry is true become inputs of
/// the node, so excluded tensors receive no regularizer gradient at all.
template <typename T>
Var kure_penalty(BasicTape<T>& tape, const std::vector<Var>& tensors, const std::vector<bool>& included,
                 kure::PenaltyMode mode, double target = kure::kUniformKurtosis,
                 double eps = kure::kDefaultEps);

}  // namespace kurtq::ad
