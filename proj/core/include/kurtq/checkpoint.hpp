// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kurtq/params.hpp"
#include "kurtq/quant.hpp"

namespace kurtq {

/// On-disk model file, little-endian, no padding:
///
///   "KQCK" | u32 version=1 | u32 tensor_count
///   per tensor: u32 name_len | name (UTF-8) | u8 dtype (0=FP32, 1=INT8)
///               | u8 rank | rank x u64 dims | [INT8: f32 scale] | row-major data
struct Checkpoint {
  struct Entry {
    std::string name;
    std::variant<Tensor, quant::QTensor> data;

    bool is_int8() const { return std::holds_alternative<quant::QTensor>(data); }
    const Shape& shape() const;
  };

  std::vector<Entry> entries;

  static Checkpoint from_params(const ModelParams& params);
  /// True when every tensor is stored as INT8.
  bool is_quantized() const;
  /// Every FP32 tensor re-encoded as INT8 with its MAX_ABS scale.
  /// Throws StateError when the checkpoint already holds INT8 tensors.
  Checkpoint quantized() const;
  /// FP32 view of all tensors; INT8 entries are dequantized.
  ModelParams to_params() const;
  const Entry* find(std::string_view name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError with the byte offset of the first bad field. Nothing is
/// returned on failure.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Throws IoError on I/O failure.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kurtq
