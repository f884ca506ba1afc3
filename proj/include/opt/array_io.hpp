#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace opt::io {

namespace fs = std::filesystem;

// Dense float32 array stored as raw little-endian bytes in `<stem>.f32`, with a
// JSON sidecar `<stem>.json` carrying shape, CRC-32 checksum and free-form
// metadata (fps, frame counts, ...).
struct FloatArray {
  std::vector<int64_t> shape;
  std::vector<float> data;
  nlohmann::json meta = nlohmann::json::object();

  int64_t numel() const;
};

uint32_t crc32(std::span<const std::byte> bytes);
uint32_t crc32_of_floats(std::span<const float> values);
std::string crc32_hex(uint32_t crc);

// Writes `<stem>.f32` and `<stem>.json`; `stem` has no extension.
void write_array(const fs::path& stem, const FloatArray& array);
// Verifies the checksum and size against the sidecar.
FloatArray read_array(const fs::path& stem);

std::string file_crc32_hex(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace opt::io
