#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "opt/aem.hpp"
#include "opt/afdm.hpp"
#include "opt/audio_frontend.hpp"
#include "opt/config.hpp"
#include "opt/face3d.hpp"
#include "opt/landmark_detector.hpp"
#include "opt/metrics.hpp"
#include "opt/synthdata.hpp"
#include "opt/videogen.hpp"

namespace opt::pipeline {

namespace fs = std::filesystem;

// Exclusive advisory lock on <dir>/.opt.lock for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

fs::path checkpoint_path(const RunConfig& cfg, const std::string& module);

// ---------------------------------------------------------------------------
// Stage commands

synth::Corpus cmd_synth_data(const RunConfig& cfg);

// stage ∈ {afdm, aem, vg}. aem also trains the face embedding; vg also trains
// the landmark detector used to read pose back out of generated frames.
void cmd_train(const std::string& stage, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Generation

struct Models {
  afdm::Afdm afdm{nullptr};
  aem::FaceEmbed embed{nullptr};
  aem::AemModel aem{nullptr};
  vg::Generator gen{nullptr};
  detector::Detector det{nullptr};
};
// Throws MissingPrerequisite naming the first absent checkpoint.
Models load_models(const RunConfig& cfg);

struct SourceFit {
  face3d::Landmarks2D landmarks;  // detected on the source image
  face3d::FitResult fit;          // α, β and pose of the source face
};
SourceFit fit_source(detector::Detector& det, const face3d::MorphableBasis& basis, const FrameImage& src);

// Pose of a frame read back through the detector, with α held at `alpha` and,
// when given, β held at `beta`.
face3d::HeadPose fitted_pose(detector::Detector& det, const face3d::MorphableBasis& basis,
                             const face3d::IdentityCoeffs& alpha, const FrameImage& frame,
                             const std::optional<face3d::ExpressionCoeffs>& beta = std::nullopt);

struct GeneratedClip {
  std::vector<FrameImage> frames;
  std::vector<face3d::Landmarks2D> landmarks;  // projection of (α_src, β̂, pose)
  std::vector<face3d::ExpressionCoeffs> beta;
  std::vector<face3d::HeadPose> poses;
  SourceFit source;
};

// One frame per 40 ms of audio. `pose_track` empty → "fix" mode (source pose on
// every frame); otherwise it must hold at least as many poses as frames.
GeneratedClip generate_clip(Models& models, const face3d::MorphableBasis& basis, const FrameImage& src,
                            const audio::WaveBuffer& wave, const std::vector<face3d::HeadPose>& pose_track);

struct GenerateRequest {
  fs::path src_image;
  fs::path driving_wav;
  std::string pose_source = "fix";  // a corpus clip id or "fix"
  fs::path out_dir;
  bool mux = false;
};
// Writes frames/NNNNNN.png, landmarks.csv and video.json under out_dir.
GeneratedClip cmd_generate(const RunConfig& cfg, const GenerateRequest& req);

// ---------------------------------------------------------------------------
// Evaluation

// `generated` is one clip directory (with video.json) or a directory of them.
// Each clip is compared with the corpus clip named by video.json's
// "reference_clip" (or "clip_id" for corpus clips themselves).
metrics::MetricsReport cmd_evaluate(const RunConfig& cfg, const fs::path& generated, const fs::path& corpus_root,
                                    const fs::path& out, bool mouth_only);

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string variant;  // "baseline-entangled", "w/o L_ldmk", "full"
  std::vector<double> csim, lmd, ssim;  // one entry per seed
  double median_csim = 0.0, median_lmd = 0.0, median_ssim = 0.0;
};
struct AblationReport {
  std::vector<uint64_t> seeds;
  std::vector<AblationRow> rows;
  nlohmann::json to_json() const;
  std::string table() const;
  const AblationRow& row(const std::string& variant) const;
};

AblationReport cmd_ablate(const RunConfig& cfg);

double median(std::vector<double> v);

}  // namespace opt::pipeline
