#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

namespace opt {

// File layout: "OPTCKPT\0" | u64 header length | JSON header | parameter blob.
// The header records module name, format version, training step, the CRC-32
// of the config that produced it, free-form metadata (architecture settings)
// and the blob's size and CRC-32.
struct Checkpoint {
  std::string module;
  int version = 1;
  int64_t step = 0;
  std::string config_checksum;
  nlohmann::json meta = nlohmann::json::object();
  std::string blob;

  void save(const std::filesystem::path& path) const;
  // Throws MissingPrerequisite when the file is absent (named by `module`), and
  // ValidationError on a module-name or version mismatch or a corrupt blob.
  static Checkpoint load(const std::filesystem::path& path, const std::string& module, int version);
};

inline constexpr int kCheckpointVersion = 1;

Checkpoint make_checkpoint(const std::string& module, torch::nn::Module& m, int64_t step,
                           const std::string& config_checksum, nlohmann::json meta);
void restore(const Checkpoint& ckpt, torch::nn::Module& m);

}  // namespace opt
