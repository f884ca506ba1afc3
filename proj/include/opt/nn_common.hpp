#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace opt::nn {

// Seeds torch and pins it to one intra-op thread so runs are reproducible.
void seed_everything(uint64_t seed);

// Adam learning-rate schedule: `initial` until `decay_step`, `decayed` afterwards.
struct LrSchedule {
  double initial = 1e-4;
  double decayed = 2e-5;
  int64_t decay_step = 20000;

  double at(int64_t step) const { return step < decay_step ? initial : decayed; }
  void validate() const;
  nlohmann::json to_json() const;
  static LrSchedule from_json(const nlohmann::json& j);
};

void set_learning_rate(torch::optim::Adam& opt, double lr);

// Squeeze-and-excitation channel gate.
struct SqueezeExciteImpl : torch::nn::Module {
  SqueezeExciteImpl(int64_t channels, int64_t reduction = 4);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SqueezeExcite);

struct SeResBlockImpl : torch::nn::Module {
  SeResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  SqueezeExcite se{nullptr};
  torch::nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(SeResBlock);

// Stem, one SE-residual block per stage (stride 2 each), global pool, linear head.
struct SeResEncoderImpl : torch::nn::Module {
  SeResEncoderImpl(int64_t in_ch, const std::vector<int64_t>& widths, int64_t out_dim);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::Conv2d stem{nullptr};
  torch::nn::BatchNorm2d stem_bn{nullptr};
  torch::nn::Sequential stages{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(SeResEncoder);

// Serialized parameters and buffers of a module.
std::string module_bytes(torch::nn::Module& m);
void load_module_bytes(torch::nn::Module& m, const std::string& bytes);

int64_t parameter_count(torch::nn::Module& m);

// Line-delimited JSON training log.
class JsonlLog {
 public:
  JsonlLog() = default;
  explicit JsonlLog(const std::filesystem::path& path);
  void write(const nlohmann::json& record);
  bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
};

// Colour jitter used for identity-robust training: per-channel gain and offset.
torch::Tensor colour_jitter(const torch::Tensor& images, std::mt19937_64& rng, double gain = 0.25,
                            double offset = 0.1);

}  // namespace opt::nn
