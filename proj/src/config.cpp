#include "opt/config.hpp"

#include <cstdlib>
#include <fstream>

#include <zlib.h>

#include "opt/config_reader.hpp"
#include "opt/error.hpp"

namespace opt {

void AblationConfig::validate() const {
  require(seeds.size() >= 3, "ablation.seeds must list at least 3 seeds");
  require(pairs >= 1, "ablation.pairs must be >= 1");
}

nlohmann::json AblationConfig::to_json() const { return {{"seeds", seeds}, {"pairs", pairs}}; }

AblationConfig AblationConfig::from_json(const nlohmann::json& j) {
  AblationConfig c;
  config::KeyReader r(j, "ablation");
  r.get("seeds", c.seeds);
  r.get("pairs", c.pairs);
  r.finish();
  c.validate();
  return c;
}

void RunConfig::validate() const {
  require(!data_dir.empty(), "data_dir must not be empty");
  require(!out_dir.empty(), "out_dir must not be empty");
  require(fix_pose_tolerance_deg > 0.0, "fix_pose_tolerance_deg must be positive");
  corpus.validate();
  optimizer.validate();
  afdm.validate();
  face_embed.validate();
  aem.validate();
  vg.validate();
  detector.validate();
  ablation.validate();
}

nlohmann::json RunConfig::to_json() const {
  return {{"data_dir", data_dir.string()},
          {"out_dir", out_dir.string()},
          {"seed", seed},
          {"corpus", corpus.to_json()},
          {"optimizer", optimizer.to_json()},
          {"afdm", afdm.to_json()},
          {"face_embed", face_embed.to_json()},
          {"aem", aem.to_json()},
          {"vg", vg.to_json()},
          {"detector", detector.to_json()},
          {"ablation", ablation.to_json()},
          {"fix_pose_tolerance_deg", fix_pose_tolerance_deg}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  config::KeyReader r(j, "config");
  std::string s;
  if (r.get("data_dir", s)) c.data_dir = s;
  if (r.get("out_dir", s)) c.out_dir = s;
  r.get("seed", c.seed);
  if (auto* p = r.sub("corpus")) c.corpus = synth::CorpusSpec::from_json(*p);
  if (auto* p = r.sub("optimizer")) c.optimizer = nn::LrSchedule::from_json(*p);
  if (auto* p = r.sub("afdm")) c.afdm = afdm::AfdmConfig::from_json(*p);
  if (auto* p = r.sub("face_embed")) c.face_embed = aem::FaceEmbedConfig::from_json(*p);
  if (auto* p = r.sub("aem")) c.aem = aem::AemConfig::from_json(*p);
  if (auto* p = r.sub("vg")) c.vg = vg::VgConfig::from_json(*p);
  if (auto* p = r.sub("detector")) c.detector = detector::DetectorConfig::from_json(*p);
  if (auto* p = r.sub("ablation")) c.ablation = AblationConfig::from_json(*p);
  r.get("fix_pose_tolerance_deg", c.fix_pose_tolerance_deg);
  r.finish();
  c.validate();
  return c;
}

std::string RunConfig::checksum() const {
  auto s = to_json().dump();
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot read config file " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("config " + path.string() + ": " + e.what());
    }
    c = RunConfig::from_json(j);
  }
  if (const char* env = std::getenv("OPT_DATA_DIR"); env && *env) c.data_dir = env;
  c.validate();
  return c;
}

}  // namespace opt
