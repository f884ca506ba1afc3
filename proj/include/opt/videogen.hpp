#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "opt/checkpoint.hpp"
#include "opt/dataset.hpp"
#include "opt/face3d.hpp"
#include "opt/image.hpp"
#include "opt/nn_common.hpp"

namespace opt::vg {

inline constexpr int64_t kStyleDim = face3d::kExpressionDim + 6 + 3;  // β, two rotation columns, T
inline constexpr double kAdainEps = 1e-5;
inline constexpr double kPatchFloor = 1e-7;

struct VgConfig {
  std::vector<int64_t> widths{16, 32, 64};  // encoder stages; the decoder mirrors them
  int res_blocks = 4;
  bool coord_channels = true;  // x/y ramps appended to the source image
  int64_t disc_width = 32;
  std::vector<int64_t> perceptual_widths{8, 16, 32, 32, 32};
  std::vector<int> perceptual_layers{1, 2, 3};
  uint64_t perceptual_seed = 1234;
  double w_rec = 1.0;
  double w_gan = 0.1;
  double w_per = 1.0;
  int steps = 3000;
  int batch = 8;
  int log_every = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static VgConfig from_json(const nlohmann::json& j);
};

// β, the first two columns of R, then T. beta [B,64], rotation [B,3,3], translation [B,3] → [B,73]
torch::Tensor style_vector(const torch::Tensor& beta, const torch::Tensor& rotation, const torch::Tensor& translation);

// Per channel: normalize over space, then scale by γ and shift by δ. x [B,C,H,W], gamma/delta [B,C].
torch::Tensor adain_inject(const torch::Tensor& x, const torch::Tensor& gamma, const torch::Tensor& delta,
                           double eps = kAdainEps);

struct AdaInImpl : torch::nn::Module {
  AdaInImpl(int64_t channels, int64_t style_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& style);

  int64_t channels;
  torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(AdaIn);

struct ResBlockImpl : torch::nn::Module {
  explicit ResBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResBlock);

struct GeneratorImpl : torch::nn::Module {
  GeneratorImpl(const VgConfig& cfg, int image_size);
  // src [B,3,H,W] in [0,1], style [B,73] → [B,3,H,W] in [0,1]
  torch::Tensor forward(const torch::Tensor& src, const torch::Tensor& style);

  VgConfig cfg;
  int image_size;
  torch::nn::Sequential encoder{nullptr};
  std::vector<ResBlock> blocks;
  std::vector<AdaIn> norms;
  torch::nn::Sequential decoder{nullptr};
};
TORCH_MODULE(Generator);

// Unconditional patch discriminator: 3 stride-2 convolutions then two stride-1
// 4×4 convolutions; a 64×64 input gives a 6×6 map of probabilities.
struct DiscriminatorImpl : torch::nn::Module {
  DiscriminatorImpl(int64_t width, int image_size);
  torch::Tensor forward(const torch::Tensor& img);  // [B,1,h,w] in (0,1)

  int image_size;
  torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(Discriminator);

// Frozen, seeded, randomly initialized 5-stage pyramid (conv 3×3, ReLU, 2×2 average pool).
struct PerceptualNetImpl : torch::nn::Module {
  PerceptualNetImpl(const std::vector<int64_t>& widths, uint64_t seed);
  // Activations after each stage (index 0 = stage 1).
  std::vector<torch::Tensor> forward(const torch::Tensor& img);

  torch::nn::ModuleList stages{nullptr};
};
TORCH_MODULE(PerceptualNet);

// ‖I − I_G‖₂ per image, [B].
torch::Tensor rec_loss(const torch::Tensor& gt, const torch::Tensor& gen);
// mean log d_real + mean log(1 − d_fake), maps clamped to [1e−7, 1 − 1e−7].
torch::Tensor gan_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);
// Non-saturating generator surrogate −mean log d_fake.
torch::Tensor gan_generator_loss(const torch::Tensor& d_fake);

using FeatureExtractor = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;
// Σ over `layers` (1-based) of ‖φ_i(gen) − φ_i(gt)‖₁; `per_element` divides each
// term by its element count.
torch::Tensor perceptual_loss(const torch::Tensor& gen, const torch::Tensor& gt, const FeatureExtractor& extractor,
                              const std::vector<int>& layers, bool per_element = false);

struct VgModels {
  Generator gen{nullptr};
  Discriminator disc{nullptr};
};

VgModels train_generator(const data::CorpusData& data, const VgConfig& cfg, const nn::LrSchedule& schedule,
                         uint64_t seed, nn::JsonlLog* log);

FrameImage generate_frame(Generator& gen, const FrameImage& src, const face3d::ExpressionCoeffs& beta,
                          const face3d::HeadPose& pose);
// Batched form: src [3,H,W]; beta [T,64]; rotation [T,3,3]; translation [T,3] → [T,3,H,W]
torch::Tensor generate_frames(Generator& gen, const torch::Tensor& src, const torch::Tensor& beta,
                              const torch::Tensor& rotation, const torch::Tensor& translation);

torch::Tensor discriminate(Discriminator& disc, const FrameImage& img);

Checkpoint save_generator(Generator& gen, int64_t step, const std::string& config_checksum);
Generator load_generator(const Checkpoint& ckpt);
Checkpoint save_discriminator(Discriminator& disc, int64_t step, const std::string& config_checksum);
Discriminator load_discriminator(const Checkpoint& ckpt);

}  // namespace opt::vg
