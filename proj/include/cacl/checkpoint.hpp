#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cacl/io.hpp"
#include "cacl/nn.hpp"

// Checkpoint container: a one-line magic header, an 8-byte little-endian
// manifest length, the JSON manifest (names, shapes, offsets, metadata), and
// the concatenated little-endian float payloads in manifest order. Identical
// state serializes to identical bytes.
namespace cacl {

inline constexpr char kCheckpointMagic[] = "CACLCKPT1\n";
inline constexpr int kCheckpointSchema = 1;

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <class R>
void put_real_le(std::string& out, R v) {
  static_assert(sizeof(R) == 4 || sizeof(R) == 8);
  if constexpr (sizeof(R) == 8) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64_le(out, bits);
  } else {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
}

template <class R>
R get_real_le(const unsigned char* p) {
  if constexpr (sizeof(R) == 8) {
    std::uint64_t bits = get_u64_le(p);
    R v;
    std::memcpy(&v, &bits, 8);
    return v;
  } else {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    R v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
}

}  // namespace detail

// named sections, each a registry saved under its prefix
template <class R>
using CheckpointSections = std::vector<std::pair<std::string, const ParamRegistry<R>*>>;

template <class R>
void save_checkpoint(const std::string& path, const CheckpointSections<R>& sections,
                     const nlohmann::json& meta) {
  nlohmann::json manifest;
  manifest["schema"] = kCheckpointSchema;
  manifest["precision"] = sizeof(R) == 8 ? "f64" : "f32";
  manifest["meta"] = meta;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;  // element offset into the payload
  for (const auto& [prefix, reg] : sections) {
    for (const auto& [name, p] : reg->entries()) {
      nlohmann::json t;
      t["name"] = prefix + "." + name;
      t["shape"] = p.shape();
      t["offset"] = offset;
      t["count"] = static_cast<std::uint64_t>(p.numel());
      tensors.push_back(std::move(t));
      offset += static_cast<std::uint64_t>(p.numel());
    }
  }
  manifest["tensors"] = std::move(tensors);

  std::string blob = kCheckpointMagic;
  const std::string mjson = manifest.dump();
  detail::put_u64_le(blob, mjson.size());
  blob += mjson;
  blob.reserve(blob.size() + offset * sizeof(R));
  for (const auto& [prefix, reg] : sections)
    for (const auto& [name, p] : reg->entries())
      for (R v : p.data()) detail::put_real_le(blob, v);

  CsvWriter::write_text_file(path, blob);
}

struct CheckpointFile {
  nlohmann::json manifest;
  std::string raw;          // whole file
  std::size_t payload_pos;  // byte offset where payloads start
};

inline CheckpointFile open_checkpoint(const std::string& path) {
  CheckpointFile f;
  f.raw = read_text_file(path);
  const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (f.raw.size() < magic_len + 8 ||
      f.raw.compare(0, magic_len, kCheckpointMagic) != 0)
    throw DataError("not a checkpoint file: " + path);
  const auto* base = reinterpret_cast<const unsigned char*>(f.raw.data());
  const std::uint64_t mlen = detail::get_u64_le(base + magic_len);
  if (magic_len + 8 + mlen > f.raw.size())
    throw DataError("truncated checkpoint manifest: " + path);
  try {
    f.manifest = nlohmann::json::parse(f.raw.substr(magic_len + 8, mlen));
  } catch (const std::exception& e) {
    throw DataError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  if (f.manifest.value("schema", -1) != kCheckpointSchema)
    throw DataError("unsupported checkpoint schema in " + path);
  f.payload_pos = magic_len + 8 + mlen;
  return f;
}

// copies payloads into matching registry entries; every registry tensor must
// be present in the file with an identical shape
template <class R>
void load_checkpoint_into(const CheckpointFile& f,
                          const std::vector<std::pair<std::string, ParamRegistry<R>*>>& sections) {
  const std::string want_precision = sizeof(R) == 8 ? "f64" : "f32";
  if (f.manifest.value("precision", "") != want_precision)
    throw DataError("checkpoint precision is " +
                    f.manifest.value("precision", std::string("?")) + ", expected " +
                    want_precision);
  std::map<std::string, const nlohmann::json*> index;
  for (const auto& t : f.manifest.at("tensors")) index[t.at("name")] = &t;
  const auto* base = reinterpret_cast<const unsigned char*>(f.raw.data());
  for (auto& [prefix, reg] : sections) {
    for (auto& [name, p] : reg->entries()) {
      const std::string full = prefix + "." + name;
      auto it = index.find(full);
      if (it == index.end()) throw DataError("checkpoint is missing tensor: " + full);
      const auto& t = *it->second;
      const auto shape = t.at("shape").get<std::vector<int>>();
      if (shape != p.shape())
        throw DataError("checkpoint tensor " + full + " has shape " + shape_str(shape) +
                        ", expected " + shape_str(p.shape()));
      const std::uint64_t offset = t.at("offset").get<std::uint64_t>();
      const std::uint64_t count = t.at("count").get<std::uint64_t>();
      if (count != static_cast<std::uint64_t>(p.numel()))
        throw DataError("checkpoint tensor " + full + " has inconsistent element count");
      const std::size_t pos = f.payload_pos + offset * sizeof(R);
      if (pos + count * sizeof(R) > f.raw.size())
        throw DataError("checkpoint payload truncated at tensor " + full);
      Tensor<R> handle = p;  // shared node, safe to mutate through a copy
      auto& data = handle.mutable_data();
      for (std::uint64_t i = 0; i < count; ++i)
        data[i] = detail::get_real_le<R>(base + pos + i * sizeof(R));
    }
  }
}

}  // namespace cacl
