#include "opt/array_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <zlib.h>

#include "opt/error.hpp"

namespace opt::io {

static_assert(std::endian::native == std::endian::little, "array files are little-endian");

int64_t FloatArray::numel() const {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

uint32_t crc32(std::span<const std::byte> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces.
  constexpr size_t kPiece = 1u << 30;
  size_t off = 0;
  while (off < bytes.size()) {
    size_t n = std::min(kPiece, bytes.size() - off);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), static_cast<uInt>(n));
    off += n;
  }
  return static_cast<uint32_t>(crc);
}

uint32_t crc32_of_floats(std::span<const float> values) { return crc32(std::as_bytes(values)); }

std::string crc32_hex(uint32_t crc) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

void write_array(const fs::path& stem, const FloatArray& array) {
  require(array.numel() == static_cast<int64_t>(array.data.size()),
          "array shape does not match data length");
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  auto bin = fs::path(stem.string() + ".f32");
  {
    std::ofstream out(bin, std::ios::binary);
    if (!out) throw IoError("cannot write " + bin.string());
    out.write(reinterpret_cast<const char*>(array.data.data()),
              static_cast<std::streamsize>(array.data.size() * sizeof(float)));
  }
  nlohmann::json side = array.meta;
  side["shape"] = array.shape;
  side["dtype"] = "float32";
  side["checksum"] = crc32_hex(crc32_of_floats(array.data));
  write_text(fs::path(stem.string() + ".json"), side.dump(2) + "\n");
}

FloatArray read_array(const fs::path& stem) {
  auto side_path = fs::path(stem.string() + ".json");
  auto bin = fs::path(stem.string() + ".f32");
  if (!fs::exists(side_path) || !fs::exists(bin)) throw IoError("missing array " + stem.string());
  nlohmann::json side = nlohmann::json::parse(read_text(side_path));
  FloatArray a;
  a.shape = side.at("shape").get<std::vector<int64_t>>();
  if (side.value("dtype", "float32") != "float32") throw IoError("unsupported dtype in " + side_path.string());
  auto n = a.numel();
  if (static_cast<int64_t>(fs::file_size(bin)) != n * static_cast<int64_t>(sizeof(float)))
    throw IoError("size mismatch for " + bin.string());
  a.data.resize(static_cast<size_t>(n));
  std::ifstream in(bin, std::ios::binary);
  in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (crc32_hex(crc32_of_floats(a.data)) != side.at("checksum").get<std::string>())
    throw IoError("checksum mismatch for " + bin.string());
  side.erase("shape");
  side.erase("dtype");
  side.erase("checksum");
  a.meta = std::move(side);
  return a;
}

std::string file_crc32_hex(const fs::path& path) {
  std::string bytes = read_text(path);
  return crc32_hex(crc32(std::as_bytes(std::span(bytes.data(), bytes.size()))));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace opt::io
