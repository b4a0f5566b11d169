#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "unitoken/autodiff/layers.hpp"

namespace unitoken {

enum class DType : std::uint32_t { f32 = 0, u8 = 1, u64 = 2 };

struct CheckpointEntry {
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;  // little-endian payload

  std::uint64_t elements() const;
};

/// Named-tensor container ("UTKC" files). Entries are kept sorted by name so
/// serialization is canonical: save → load → save reproduces the same bytes.
///
/// Layout: "UTKC", u32 version, u32 entry count, then per entry
/// (u32 name length, name, u32 dtype, u32 rank, u64 dims[rank], u64 offset,
/// u64 length), then the payload region, then a CRC32 of everything before
/// it. Offsets are relative to the payload region.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const std::map<std::string, CheckpointEntry>& entries() const { return entries_; }
  const CheckpointEntry& entry(const std::string& name) const;

  void put_f32(const std::string& name, const Matrix<float>& m);
  void put_u64(const std::string& name, const std::vector<std::uint64_t>& values);
  void put_text(const std::string& name, const std::string& text);

  Matrix<float> get_f32(const std::string& name) const;
  std::vector<std::uint64_t> get_u64(const std::string& name) const;
  std::string get_text(const std::string& name) const;

  /// Stores every tensor under its name as fp32.
  template <typename Scalar>
  void put_tensors(const NamedTensors<Scalar>& tensors) {
    for (const auto& [name, t] : tensors) put_f32(name, t->value().template cast<float>());
  }

  /// Copies stored values into `tensors`; every name must be present with a
  /// matching shape.
  template <typename Scalar>
  void get_tensors(const NamedTensors<Scalar>& tensors) const {
    for (const auto& [name, t] : tensors) {
      Matrix<float> m = get_f32(name);
      if (m.rows() != t->value().rows() || m.cols() != t->value().cols()) {
        throw UsageError("checkpoint tensor '" + name + "' has a different shape");
      }
      t->value() = m.template cast<Scalar>();
    }
  }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, CheckpointEntry> entries_;
};

/// zlib CRC32.
std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

}  // namespace unitoken
