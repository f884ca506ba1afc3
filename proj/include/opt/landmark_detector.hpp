#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "opt/checkpoint.hpp"
#include "opt/dataset.hpp"
#include "opt/face3d.hpp"
#include "opt/image.hpp"
#include "opt/nn_common.hpp"

namespace opt::detector {

// Regresses the 68 landmark positions from a frame. Used to read pose back out
// of generated frames; trained on corpus frames with blur and colour augmentation.
struct DetectorConfig {
  std::vector<int64_t> widths{24, 48, 64, 96};
  int64_t hidden = 256;
  double blur_prob = 0.5;
  // Own learning rate; the run schedule's decay ratio still applies.
  double lr = 1e-3;
  int steps = 2000;
  int batch = 32;
  int log_every = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static DetectorConfig from_json(const nlohmann::json& j);
};

struct DetectorImpl : torch::nn::Module {
  DetectorImpl(const DetectorConfig& cfg, int image_size);
  // [B,3,H,W] → [B,68,2] pixel coordinates
  torch::Tensor forward(const torch::Tensor& images);

  DetectorConfig cfg;
  int image_size;
  torch::nn::Sequential features{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Detector);

// 3×3 box blur applied `passes` times, edges handled by excluding padding.
torch::Tensor box_blur(const torch::Tensor& images, int passes);

Detector train_detector(const data::CorpusData& data, const DetectorConfig& cfg, const nn::LrSchedule& schedule,
                        uint64_t seed, nn::JsonlLog* log);

std::vector<face3d::Landmarks2D> detect(Detector& det, const torch::Tensor& images);  // [T,3,H,W]
face3d::Landmarks2D detect(Detector& det, const FrameImage& image);

// Mean point error in pixels over held-out frames.
double evaluate_detector(Detector& det, const data::CorpusData& data);

Checkpoint save_detector(Detector& det, int64_t step, const std::string& config_checksum);
Detector load_detector(const Checkpoint& ckpt);

}  // namespace opt::detector
