#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "opt/aem.hpp"
#include "opt/afdm.hpp"
#include "opt/landmark_detector.hpp"
#include "opt/nn_common.hpp"
#include "opt/synthdata.hpp"
#include "opt/videogen.hpp"

namespace opt {

struct AblationConfig {
  std::vector<uint64_t> seeds{0, 1, 2};
  int pairs = 24;  // cross-identity (audio speaker, source speaker) pairs per seed

  void validate() const;
  nlohmann::json to_json() const;
  static AblationConfig from_json(const nlohmann::json& j);
};

// Everything a command needs. Parsed from a JSON document; unknown keys at any
// level are rejected, and the whole config is validated before any stage runs.
struct RunConfig {
  std::filesystem::path data_dir = "data";  // corpus root; OPT_DATA_DIR overrides
  std::filesystem::path out_dir = "runs";   // checkpoints, logs, generated clips, reports
  uint64_t seed = 0;
  synth::CorpusSpec corpus;
  nn::LrSchedule optimizer;
  afdm::AfdmConfig afdm;
  aem::FaceEmbedConfig face_embed;
  aem::AemConfig aem;
  vg::VgConfig vg;
  detector::DetectorConfig detector;
  AblationConfig ablation;
  double fix_pose_tolerance_deg = 5.0;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  // CRC-32 (hex) of the canonical JSON dump.
  std::string checksum() const;

  std::filesystem::path checkpoint_dir() const { return out_dir / "checkpoints"; }
  std::filesystem::path log_dir() const { return out_dir / "logs"; }
};

// Reads `path` (empty → defaults), then applies OPT_DATA_DIR if set.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace opt
