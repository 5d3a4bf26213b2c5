#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "sona/core/tensor.hpp"

namespace sona::data {

/// Named tensors and UTF-8 metadata strings, kept in insertion order.
///
/// On disk: "SONA", u32 version (1), u32 entry count, then per entry a u8 name length, the
/// name, a u8 kind (0 = f32 tensor, 1 = utf8 text), a u8 ndim, ndim u32 dims, and either the
/// row-major f32 payload or a u32 length followed by the text bytes. Little-endian throughout.
class Archive {
 public:
  using Value = std::variant<Tensor, std::string>;
  struct Entry {
    std::string name;
    Value value;
  };

  void add(std::string name, Tensor tensor);
  void add(std::string name, std::string text);

  bool contains(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  const std::string& text(const std::string& name) const;

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  const Entry* find(const std::string& name) const;
  std::vector<Entry> entries_;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

std::vector<std::uint8_t> encode_archive(const Archive& archive);
Archive decode_archive(const std::vector<std::uint8_t>& bytes);

/// Writes through a temporary sibling file and renames it into place.
void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

/// Atomic write of raw bytes (temporary sibling + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

/// Integer-valued tensor helpers; values must be exactly representable in f32.
Tensor ints_to_tensor(const std::vector<std::int32_t>& values);
std::vector<std::int32_t> tensor_to_ints(const Tensor& t);

}  // namespace sona::data
