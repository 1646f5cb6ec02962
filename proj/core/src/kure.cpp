// SPDX-License-Identifier: Apache-2.0
#include "kurtq/kure.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace kurtq::kure {

std::string to_string(PenaltyMode mode) {
  return mode == PenaltyMode::plain_sum ? "plain_sum" : "target_deviation";
}

std::optional<PenaltyMode> parse_penalty_mode(std::string_view text) {
  if (text == "plain_sum") return PenaltyMode::plain_sum;
  if (text == "target_deviation") return PenaltyMode::target_deviation;
  return std::nullopt;
}

template <typename T>
Stats tensor_stats(const BasicTensor<T>& t) {
  if (t.numel() < 2) {
    throw DegenerateTensorError("kurtosis needs at least 2 elements, got " + std::to_string(t.numel()));
  }
  Stats s;
  s.numel = t.numel();
  const auto data = t.data();
  double total = 0.0;
  s.min = s.max = static_cast<double>(data[0]);
  for (T v : data) {
    const double x = static_cast<double>(v);
    total += x;
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
  }
  const double n = static_cast<double>(s.numel);
  s.mean = total / n;
  s.degenerate = s.min == s.max;
  if (s.degenerate) return s;
  for (T v : data) {
    const double d = static_cast<double>(v) - s.mean;
    const double d2 = d * d;
    s.m2 += d2;
    s.m3 += d2 * d;
    s.m4 += d2 * d2;
  }
  s.m2 /= n;
  s.m3 /= n;
  s.m4 /= n;
  return s;
}

namespace {

double kurtosis_from(const Stats& s, double eps) {
  if (s.degenerate) return 0.0;
  const double denom = s.m2 + eps;
  return s.m4 / (denom * denom);
}

}  // namespace

template <typename T>
T kurtosis(const BasicTensor<T>& t, double eps) {
  return static_cast<T>(kurtosis_from(tensor_stats(t), eps));
}

template <typename T>
BasicTensor<T> kurtosis_grad(const BasicTensor<T>& t, double eps) {
  const Stats s = tensor_stats(t);
  BasicTensor<T> out(t.shape());
  if (s.degenerate) return out;
  const double n = static_cast<double>(s.numel);
  const double denom = s.m2 + eps;
  const double inv2 = 1.0 / (denom * denom);
  const double inv3 = inv2 / denom;
  // dm4/dx_i = 4/n (d_i^3 - m3), dm2/dx_i = 2/n d_i
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double d = static_cast<double>(t[i]) - s.mean;
    const double dm4 = 4.0 / n * (d * d * d - s.m3);
    const double dm2 = 2.0 / n * d;
    out[i] = static_cast<T>(dm4 * inv2 - 2.0 * s.m4 * inv3 * dm2);
  }
  return out;
}

template <typename T>
double penalty_value(const std::vector<const BasicTensor<T>*>& tensors, const std::vector<bool>& included,
                     PenaltyMode mode, double target, double eps) {
  if (tensors.size() != included.size()) {
    throw ContractError("kure mask has " + std::to_string(included.size()) + " entries for " +
                        std::to_string(tensors.size()) + " tensors");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!included[i]) continue;
    const double k = static_cast<double>(kurtosis(*tensors[i], eps));
    total += mode == PenaltyMode::plain_sum ? k : (k - target) * (k - target);
  }
  return total;
}

std::size_t KurtosisReport::excluded_count() const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [](const ReportEntry& e) { return !e.included; }));
}

std::vector<std::string> KurtosisReport::excluded_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.included) out.push_back(e.name);
  return out;
}

std::vector<std::string> KurtosisReport::included_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (e.included) out.push_back(e.name);
  return out;
}

bool KurtosisReport::is_included(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return e.included;
  return false;
}

double KurtosisReport::mean_target_gap() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& e : entries) {
    if (!e.included) continue;
    total += std::abs(e.kurtosis - target);
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

double KurtosisReport::total_kurtosis() const {
  double total = 0.0;
  for (const auto& e : entries) total += e.kurtosis;
  return total;
}

void KurtosisReport::write_csv(std::ostream& os) const {
  os << "name,numel,min,max,mean,std,kurtosis,included\n";
  char buf[512];
  for (const auto& e : entries) {
    const auto f = [](double v) { return static_cast<double>(static_cast<float>(v)); };
    std::snprintf(buf, sizeof buf, "%s,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%s\n", e.name.c_str(), e.stats.numel,
                  f(e.stats.min), f(e.stats.max), f(e.stats.mean), f(std::sqrt(e.stats.m2)), f(e.kurtosis),
                  e.included ? "true" : "false");
    os << buf;
  }
}

bool is_weight_tensor(std::string_view name) { return name.size() > 2 && name.ends_with(".w"); }

bool matches_any(std::string_view name, const std::vector<std::string>& patterns) {
  const std::string s(name);
  return std::any_of(patterns.begin(), patterns.end(),
                     [&s](const std::string& p) { return ::fnmatch(p.c_str(), s.c_str(), 0) == 0; });
}

KurtosisReport kurtosis_report(const ModelParams& model, const SelectionPolicy& policy) {
  KurtosisReport report;
  report.threshold = policy.threshold;
  for (const auto& [name, value] : model) {
    if (!is_weight_tensor(name) || value.numel() < 2) continue;
    ReportEntry e;
    e.name = name;
    e.stats = tensor_stats(value);
    e.kurtosis = kurtosis_from(e.stats, kDefaultEps);
    e.included = !e.stats.degenerate && e.kurtosis <= policy.threshold &&
                 !matches_any(name, policy.exclusion_patterns);
    report.entries.push_back(std::move(e));
  }
  return report;
}

KurtosisReport kurtosis_report_with_selection(const ModelParams& model, const KurtosisReport& selection) {
  KurtosisReport report = kurtosis_report(model, SelectionPolicy{selection.threshold, {}});
  report.lambda = selection.lambda;
  report.mode = selection.mode;
  report.target = selection.target;
  for (auto& e : report.entries) e.included = selection.is_included(e.name);
  return report;
}

double Histogram::bin_left(std::size_t i) const {
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(counts.size());
}

double Histogram::bin_right(std::size_t i) const {
  return i + 1 == counts.size() ? hi : bin_left(i + 1);
}

std::size_t Histogram::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

void Histogram::write_csv(std::ostream& os) const {
  os << "bin_left,bin_right,count\n";
  char buf[128];
  for (std::size_t i = 0; i < counts.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%zu\n", bin_left(i), bin_right(i), counts[i]);
    os << buf;
  }
}

Histogram make_histogram(const Tensor& t, std::size_t bins) {
  if (bins == 0) throw ParameterError("histogram needs at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  auto [mn, mx] = std::minmax_element(t.data().begin(), t.data().end());
  h.lo = static_cast<double>(*mn);
  h.hi = static_cast<double>(*mx);
  if (h.lo == h.hi) {
    h.lo -= 0.5;
    h.hi += 0.5;
  }
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (float v : t.data()) {
    auto idx = static_cast<std::size_t>((static_cast<double>(v) - h.lo) / width);
    h.counts[std::min(idx, bins - 1)] += 1;
  }
  return h;
}

template Stats tensor_stats(const BasicTensor<float>&);
template Stats tensor_stats(const BasicTensor<double>&);
template float kurtosis(const BasicTensor<float>&, double);
template double kurtosis(const BasicTensor<double>&, double);
template BasicTensor<float> kurtosis_grad(const BasicTensor<float>&, double);
template BasicTensor<double> kurtosis_grad(const BasicTensor<double>&, double);
template double penalty_value(const std::vector<const BasicTensor<float>*>&, const std::vector<bool>&,
                              PenaltyMode, double, double);
template double penalty_value(const std::vector<const BasicTensor<double>*>&, const std::vector<bool>&,
                              PenaltyMode, double, double);

}  // namespace kurtq::kure

namespace kurtq::ad {

template <typename T>
Var kurtosis(BasicTape<T>& tape, Var x, double eps) {
  const T k = kure::kurtosis(tape.value(x), eps);
  return tape.record("kurtosis", BasicTensor<T>({1}, k), {x}, [x, eps](const BasicTensor<T>& g, BasicTape<T>& t) {
    t.accumulate(x, kurtq::scale(kure::kurtosis_grad(t.value(x), eps), g[0]));
  });
}

template <typename T>
Var kure_penalty(BasicTape<T>& tape, const std::vector<Var>& tensors, const std::vector<bool>& included,
                 kure::PenaltyMode mode, double target, double eps) {
  if (tensors.size() != included.size()) {
    throw ContractError("kure mask has " + std::to_string(included.size()) + " entries for " +
                        std::to_string(tensors.size()) + " tensors");
  }
  std::vector<Var> inputs;
  std::vector<double> coeff;  // dPenalty/dK_j
  double total = 0.0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!included[i]) continue;
    const double k = static_cast<double>(kure::kurtosis(tape.value(tensors[i]), eps));
    if (mode == kure::PenaltyMode::plain_sum) {
      total += k;
      coeff.push_back(1.0);
    } else {
      total += (k - target) * (k - target);
      coeff.push_back(2.0 * (k - target));
    }
    inputs.push_back(tensors[i]);
  }
  return tape.record("kure_penalty", BasicTensor<T>({1}, static_cast<T>(total)), inputs,
                     [inputs, coeff, eps](const BasicTensor<T>& g, BasicTape<T>& t) {
                       for (std::size_t j = 0; j < inputs.size(); ++j) {
                         if (!t.requires_grad(inputs[j])) continue;
                         const T c = static_cast<T>(coeff[j] * static_cast<double>(g[0]));
                         t.accumulate(inputs[j], kurtq::scale(kure::kurtosis_grad(t.value(inputs[j]), eps), c));
                       }
                     });
}

template Var kurtosis(BasicTape<float>&, Var, double);
template Var kurtosis(BasicTape<double>&, Var, double);
template Var kure_penalty(BasicTape<float>&, const std::vector<Var>&, const std::vector<bool>&, kure::PenaltyMode,
                          double, double);
template Var kure_penalty(BasicTape<double>&, const std::vector<Var>&, const std::vector<bool>&,
                          kure::PenaltyMode, double, double);

}  // namespace kurtq::ad
