#include "opt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "opt/array_io.hpp"
#include "opt/error.hpp"
#include "opt/nn_common.hpp"

namespace opt {

namespace {
constexpr char kMagic[8] = {'O', 'P', 'T', 'C', 'K', 'P', 'T', '\0'};

uint32_t blob_crc(const std::string& blob) {
  return io::crc32(std::as_bytes(std::span<const char>(blob.data(), blob.size())));
}
}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header = {{"module", module},
                           {"version", version},
                           {"step", step},
                           {"config_checksum", config_checksum},
                           {"meta", meta},
                           {"blob_size", blob.size()},
                           {"blob_crc32", io::crc32_hex(blob_crc(blob))}};
  const std::string h = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // write-then-rename so a crashed run never leaves a truncated checkpoint behind
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    uint64_t len = h.size();
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path, const std::string& module, int version) {
  if (!std::filesystem::exists(path)) throw MissingPrerequisite(module, "checkpoint not found at " + path.string());
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, 8) != 0 || len > (1U << 24))
    throw ValidationError("not a checkpoint file: " + path.string());
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  nlohmann::json header = nlohmann::json::parse(h);
  Checkpoint c;
  c.module = header.at("module").get<std::string>();
  c.version = header.at("version").get<int>();
  c.step = header.at("step").get<int64_t>();
  c.config_checksum = header.at("config_checksum").get<std::string>();
  c.meta = header.at("meta");
  if (c.module != module)
    throw ValidationError("checkpoint " + path.string() + " holds module '" + c.module + "', expected '" + module + "'");
  if (c.version != version)
    throw ValidationError("checkpoint " + path.string() + " has version " + std::to_string(c.version) +
                          ", expected " + std::to_string(version));
  auto size = header.at("blob_size").get<size_t>();
  c.blob.resize(size);
  in.read(c.blob.data(), static_cast<std::streamsize>(size));
  if (!in || io::crc32_hex(blob_crc(c.blob)) != header.at("blob_crc32").get<std::string>())
    throw ValidationError("checkpoint blob corrupt: " + path.string());
  return c;
}

Checkpoint make_checkpoint(const std::string& module, torch::nn::Module& m, int64_t step,
                           const std::string& config_checksum, nlohmann::json meta) {
  Checkpoint c;
  c.module = module;
  c.version = kCheckpointVersion;
  c.step = step;
  c.config_checksum = config_checksum;
  c.meta = std::move(meta);
  c.blob = nn::module_bytes(m);
  return c;
}

void restore(const Checkpoint& ckpt, torch::nn::Module& m) { nn::load_module_bytes(m, ckpt.blob); }

}  // namespace opt
