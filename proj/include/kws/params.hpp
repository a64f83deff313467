// Copyright 2026 The prosodic-kws Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Named parameter registry and the binary checkpoint format.
//
// Checkpoint layout (all integers little-endian):
//
//   bytes 0..7   magic "KWSCKPT1"
//   u32          format version (currently 1)
//   u32          metadata length M, followed by M bytes of UTF-8 JSON
//   u32          entry count N, followed by N entries:
//                  u32 path length, path bytes (UTF-8)
//                  u32 rank, rank x u32 extents
//                  prod(extents) x IEEE-754 binary32, little-endian
//
// Entries appear in registration order. Optimizer moments are stored as
// ordinary entries under "optim.m/<path>" and "optim.v/<path>".

#pragma once

#include "kws/random.hpp"
#include "kws/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace kws {

class VersioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string path;
    Tensor<T> tensor;
  };

  Tensor<T> add(const std::string& path, Shape shape, std::vector<T> values) {
    if (index_.count(path)) throw std::logic_error("duplicate parameter path " + path);
    Tensor<T> t = Tensor<T>::parameter(std::move(shape), std::move(values));
    index_[path] = entries_.size();
    entries_.push_back({path, t});
    return t;
  }

  // Uniform in ±sqrt(6 / (fan_in + fan_out)).
  Tensor<T> glorot(const std::string& path, Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(numel(shape));
    for (T& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
    return add(path, std::move(shape), std::move(v));
  }

  Tensor<T> constant(const std::string& path, Shape shape, T value) {
    std::vector<T> v(numel(shape), value);
    return add(path, std::move(shape), std::move(v));
  }

  Tensor<T> zeros(const std::string& path, Shape shape) { return constant(path, std::move(shape), T(0)); }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  const Tensor<T>* find(const std::string& path) const {
    auto it = index_.find(path);
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct CheckpointEntry {
  std::string path;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& path) const {
    for (const auto& e : entries)
      if (e.path == path) return &e;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw VersioningError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline constexpr char kCheckpointMagic[] = "KWSCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(detail::kCheckpointMagic, 8);
  detail::put_u32(out, detail::kCheckpointVersion);
  const std::string meta = ckpt.metadata.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    if (numel(e.shape) != e.values.size()) throw ShapeError("checkpoint entry " + e.path + " has inconsistent shape");
    detail::put_u32(out, static_cast<std::uint32_t>(e.path.size()));
    out += e.path;
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : e.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(out, bits);
    }
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, detail::kCheckpointMagic, 8) != 0) {
    throw VersioningError("not a checkpoint file (bad magic)");
  }
  std::size_t pos = 8;
  const std::uint32_t version = detail::get_u32(bytes, pos);
  if (version != detail::kCheckpointVersion) {
    throw VersioningError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint32_t meta_len = detail::get_u32(bytes, pos);
  if (pos + meta_len > bytes.size()) throw VersioningError("checkpoint truncated");
  ckpt.metadata = nlohmann::json::parse(bytes.substr(pos, meta_len));
  pos += meta_len;
  const std::uint32_t count = detail::get_u32(bytes, pos);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t len = detail::get_u32(bytes, pos);
    if (pos + len > bytes.size()) throw VersioningError("checkpoint truncated");
    e.path = bytes.substr(pos, len);
    pos += len;
    const std::uint32_t rank = detail::get_u32(bytes, pos);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(detail::get_u32(bytes, pos));
    e.values.resize(numel(e.shape));
    for (float& f : e.values) {
      const std::uint32_t bits = detail::get_u32(bytes, pos);
      std::memcpy(&f, &bits, 4);
    }
    ckpt.entries.push_back(std::move(e));
  }
  if (pos != bytes.size()) throw VersioningError("trailing bytes after checkpoint entries");
  return ckpt;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("failed writing " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

template <typename T>
void append_parameters(Checkpoint& ckpt, const ParameterSet<T>& params, const std::string& prefix = "") {
  for (const auto& e : params.entries()) {
    CheckpointEntry ce{prefix + e.path, e.tensor.shape(), {}};
    ce.values.assign(e.tensor.data().begin(), e.tensor.data().end());
    ckpt.entries.push_back(std::move(ce));
  }
}

// Copies every parameter from the checkpoint. Entries outside `ignore_prefix`
// that the parameter set does not know, and parameters absent from the
// checkpoint, are versioning errors.
template <typename T>
void load_parameters(const Checkpoint& ckpt, ParameterSet<T>& params, const std::string& ignore_prefix = "optim.") {
  std::map<std::string, const CheckpointEntry*> by_path;
  for (const auto& e : ckpt.entries) {
    if (!ignore_prefix.empty() && e.path.rfind(ignore_prefix, 0) == 0) continue;
    by_path[e.path] = &e;
  }
  for (auto& p : params.entries()) {
    auto it = by_path.find(p.path);
    if (it == by_path.end()) throw VersioningError("checkpoint lacks parameter " + p.path);
    if (it->second->shape != p.tensor.shape()) {
      throw VersioningError("parameter " + p.path + " has shape " + to_string(it->second->shape) +
                            " in checkpoint, model expects " + to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
    by_path.erase(it);
  }
  if (!by_path.empty()) throw VersioningError("checkpoint has unknown parameter " + by_path.begin()->first);
}

}  // namespace kws
