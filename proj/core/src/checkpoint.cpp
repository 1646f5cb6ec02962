// SPDX-License-Identifier: Apache-2.0
#include "kurtq/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace kurtq {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'K', 'Q', 'C', 'K'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeI8 = 1;

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(V));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename V>
  V get(const char* what) {
    V v;
    std::memcpy(&v, take(sizeof(V), what), sizeof(V));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > in_.size() - pos_) {
      throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const Shape& Checkpoint::Entry::shape() const {
  return std::visit(
      [](const auto& t) -> const Shape& {
        if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Tensor>) {
          return t.shape();
        } else {
          return t.shape;
        }
      },
      data);
}

Checkpoint Checkpoint::from_params(const ModelParams& params) {
  Checkpoint c;
  for (const auto& e : params) c.entries.push_back(Entry{e.name, e.value});
  return c;
}

bool Checkpoint::is_quantized() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const Entry& e) { return e.is_int8(); });
}

Checkpoint Checkpoint::quantized() const {
  Checkpoint out;
  for (const auto& e : entries) {
    if (e.is_int8()) throw StateError("checkpoint is already quantized ('" + e.name + "' is INT8)");
    out.entries.push_back(Entry{e.name, quant::quantize_maxabs(std::get<Tensor>(e.data))});
  }
  return out;
}

ModelParams Checkpoint::to_params() const {
  ModelParams p;
  for (const auto& e : entries) {
    p.add(e.name, e.is_int8() ? quant::dequantize(std::get<quant::QTensor>(e.data)) : std::get<Tensor>(e.data));
  }
  return p;
}

const Checkpoint::Entry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    const Shape& shape = e.shape();
    w.put<std::uint8_t>(e.is_int8() ? kDtypeI8 : kDtypeF32);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) w.put<std::uint64_t>(d);
    if (e.is_int8()) {
      const auto& q = std::get<quant::QTensor>(e.data);
      w.put<float>(q.scale);
      w.bytes(q.values.data(), q.values.size());
    } else {
      const auto& t = std::get<Tensor>(e.data);
      w.bytes(t.data().data(), t.numel() * sizeof(float));
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("name length");
    const auto* name_bytes = r.take(name_len, "name");
    std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != kDtypeF32 && dtype != kDtypeI8) {
      throw FormatError("unknown dtype " + std::to_string(dtype) + " for '" + name + "'", dtype_at);
    }
    const std::size_t rank_at = r.pos();
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0", rank_at);
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      const std::size_t dim_at = r.pos();
      d = r.get<std::uint64_t>("dimension");
      if (d == 0 || d > (std::size_t{1} << 40) || numel > (std::size_t{1} << 40) / d) {
        throw FormatError("invalid dimension for '" + name + "'", dim_at);
      }
      numel *= d;
    }
    if (dtype == kDtypeI8) {
      const std::size_t scale_at = r.pos();
      const auto scale = r.get<float>("scale");
      if (!(scale > 0.0f) || !std::isfinite(scale)) {
        throw FormatError("non-positive scale for '" + name + "'", scale_at);
      }
      const std::size_t data_at = r.pos();
      const auto* p = r.take(numel, "INT8 data");
      quant::QTensor q{shape, std::vector<std::int8_t>(numel), scale};
      std::memcpy(q.values.data(), p, numel);
      for (std::size_t k = 0; k < numel; ++k) {
        if (q.values[k] == -128) throw FormatError("INT8 value -128 in '" + name + "'", data_at + k);
      }
      ckpt.entries.push_back(Checkpoint::Entry{std::move(name), std::move(q)});
    } else {
      const auto* p = r.take(numel * sizeof(float), "FP32 data");
      std::vector<float> values(numel);
      std::memcpy(values.data(), p, numel * sizeof(float));
      ckpt.entries.push_back(Checkpoint::Entry{std::move(name), Tensor(shape, std::move(values))});
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after last tensor", r.pos());
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  save_checkpoint(Checkpoint::from_params(params), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace kurtq
