// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kurtq/tensor.hpp"

namespace kurtq {

template <typename T>
struct BasicNamedTensor {
  std::string name;
  BasicTensor<T> value;
};

/// Ordered collection of uniquely named tensors. Insertion order is the
/// canonical order used by checkpoints and reports.
template <typename T>
class BasicParams {
 public:
  using Entry = BasicNamedTensor<T>;

  void add(std::string name, BasicTensor<T> value) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value)});
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  const BasicTensor<T>& at(std::string_view name) const { return entries_[position(name)].value; }
  BasicTensor<T>& at(std::string_view name) { return entries_[position(name)].value; }

  std::size_t position(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InputError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  template <typename U>
  BasicParams<U> cast() const {
    BasicParams<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  bool operator==(const BasicParams& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name || !(entries_[i].value == other.entries_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ModelParams = BasicParams<float>;
using ModelParamsD = BasicParams<double>;

}  // namespace kurtq
