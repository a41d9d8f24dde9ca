#pragma once

// Binary checkpoint container.
//
//   "SLMT" | u32 version | u64 config digest | u32 entry count
//   per entry: u32 name length | name | u8 dtype | u32 rank | u64 dims[rank] | payload
//
// All integers and payloads are little-endian. Entries keep insertion order.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slmt/autodiff.hpp"

namespace slmt {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f32;
  ad::Shape shape;
  std::vector<std::uint8_t> bytes;

  template <typename T>
  std::vector<T> values() const;
  std::string text() const { return std::string(bytes.begin(), bytes.end()); }
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint64_t config_digest = 0;
  std::vector<CheckpointEntry> entries;

  template <typename T>
  void put(const std::string& name, ad::Shape shape, std::span<const T> values);
  void put_text(const std::string& name, const std::string& text);

  const CheckpointEntry* find(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint parse(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace slmt
