#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "oddkit/common.hpp"
#include "oddkit/tensor.hpp"

namespace oddkit {

// Flat binary tensor maps. Layout, all little-endian:
//   magic "ODKT", u32 version, u32 entry count,
//   per entry: u16 path length, path bytes, u8 rank, u32 dims..., f32 data.
// Floats are stored as 32-bit regardless of the in-memory scalar type, which
// makes the format the float32 source of truth for resumable training.

using TensorMap = std::map<std::string, Tensor<float>>;

inline constexpr char kCheckpointMagic[4] = {'O', 'D', 'K', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  // this code targets little-endian hosts; enforced by the build
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint stream truncated");
  return v;
}

}  // namespace detail

inline void write_tensor_map(std::ostream& os, const TensorMap& tensors) {
  os.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [path, t] : tensors) {
    if (path.size() > 0xFFFF) throw ValidationError("parameter path too long: " + path);
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(path.size()));
    os.write(path.data(), static_cast<std::streamsize>(path.size()));
    if (t.rank() > 0xFF) throw ValidationError("tensor rank too large for " + path);
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!os) throw IoError("checkpoint write failed");
}

inline TensorMap read_tensor_map(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("not a checkpoint stream (bad magic)");
  auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  auto count = detail::read_le<std::uint32_t>(is);
  TensorMap tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto len = detail::read_le<std::uint16_t>(is);
    std::string path(len, '\0');
    is.read(path.data(), len);
    auto rank = detail::read_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint32_t>(is);
    Tensor<float> t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is) throw IoError("checkpoint stream truncated in " + path);
    if (tensors.count(path)) throw IoError("duplicate tensor path " + path);
    tensors.emplace(std::move(path), std::move(t));
  }
  return tensors;
}

inline void save_tensor_map(const std::string& path, const TensorMap& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_tensor_map(os, tensors);
}

inline TensorMap load_tensor_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  return read_tensor_map(is);
}

}  // namespace oddkit
