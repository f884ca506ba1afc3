#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "opt/face3d.hpp"
#include "opt/image.hpp"

namespace opt::metrics {

inline constexpr int kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr int kMouthFirst = 48;  // points 48..67

// Rec. 601 luma.
Eigen::MatrixXd to_gray(const FrameImage& img);

// Mean local SSIM over all 8×8 windows at stride 1, with population (1/N)
// window statistics. Computed with summed-area tables.
double ssim(const FrameImage& a, const FrameImage& b);
double ssim_gray(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Mean over frames and points of the Euclidean point distance, in pixels.
double lmd(const std::vector<face3d::Landmarks2D>& pred, const std::vector<face3d::Landmarks2D>& gt,
           bool mouth_only = false);

// Dot product of two unit-norm embeddings.
double csim(const std::vector<float>& e1, const std::vector<float>& e2);

struct ClipMetrics {
  std::string clip_id;
  int frames = 0;
  double ssim = 0.0;
  double lmd = 0.0;
  double csim = 0.0;
};

struct MetricsReport {
  std::vector<ClipMetrics> clips;
  int clip_count = 0;
  int frame_count = 0;
  double ssim = 0.0;
  double lmd = 0.0;
  double csim = 0.0;
  bool mouth_only = false;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  void write_csv(const std::filesystem::path& path) const;
};

// Aggregates are unweighted means of the per-clip values.
MetricsReport aggregate(std::vector<ClipMetrics> clips, bool mouth_only, nlohmann::json config);

// `embed_fn` maps a frame to a unit-norm embedding. Each generated frame is
// compared with the ground-truth frame of the same index.
using EmbedFn = std::function<std::vector<float>(const FrameImage&)>;
ClipMetrics evaluate_clip(const std::string& clip_id, const std::vector<FrameImage>& generated,
                          const std::vector<FrameImage>& ground_truth,
                          const std::vector<face3d::Landmarks2D>& generated_landmarks,
                          const std::vector<face3d::Landmarks2D>& gt_landmarks, const EmbedFn& embed_fn,
                          bool mouth_only = false);

}  // namespace opt::metrics
