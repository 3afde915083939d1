#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fedssl {

/// 64-bit FNV-1a over raw bytes, rendered as 16 hex digits.
std::string fnv1a_hex(std::span<const std::byte> bytes);

template <typename T>
std::string checksum_of(std::span<const T> values) {
  return fnv1a_hex(std::as_bytes(values));
}

// Flat little-endian tensor files. The element count is implied by the size.
void write_binary(const std::filesystem::path& path, std::span<const std::byte> bytes);
std::vector<std::byte> read_binary(const std::filesystem::path& path);

template <typename T>
void write_array(const std::filesystem::path& path, std::span<const T> values) {
  write_binary(path, std::as_bytes(values));
}

template <typename T>
std::vector<T> read_array(const std::filesystem::path& path) {
  auto bytes = read_binary(path);
  std::vector<T> out(bytes.size() / sizeof(T));
  std::memcpy(out.data(), bytes.data(), out.size() * sizeof(T));
  return out;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace fedssl
