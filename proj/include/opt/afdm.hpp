#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "opt/checkpoint.hpp"
#include "opt/dataset.hpp"
#include "opt/nn_common.hpp"

namespace opt::afdm {

struct AfdmConfig {
  int context = 5;
  int64_t content_dim = 128;
  int64_t identity_dim = 64;
  std::vector<int64_t> widths{16, 24, 32, 48};
  double w_con = 1.0;
  double w_cls = 1.0;
  // Hinge on different-content pairs; without it L_con alone is minimized by a constant encoder.
  double w_neg = 1.0;
  double neg_margin = 16.0;
  int steps = 3000;
  int batch = 32;
  int log_every = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static AfdmConfig from_json(const nlohmann::json& j);
};

struct AfdmImpl : torch::nn::Module {
  AfdmImpl(const AfdmConfig& cfg, int n_speakers);

  // windows: [B, 1, 16, 16·context]
  torch::Tensor content(const torch::Tensor& windows);
  // Returns (embedding [B, D_i], logits [B, N]).
  std::pair<torch::Tensor, torch::Tensor> identity(const torch::Tensor& windows);

  AfdmConfig cfg;
  int n_speakers;
  nn::SeResEncoder e_con{nullptr}, e_id{nullptr};
  torch::nn::Linear classifier{nullptr};
};
TORCH_MODULE(Afdm);

// ‖a − b‖₁ over the last dimension.
torch::Tensor content_loss(const torch::Tensor& a, const torch::Tensor& b);
// −log max(q[label], 1e−12) for probability rows q [B, N].
torch::Tensor identity_loss(const torch::Tensor& q, const torch::Tensor& labels);
// Same quantity from logits, computed stably.
torch::Tensor identity_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& labels);

// Scalar reference forms with full precondition checks.
double content_loss(const std::vector<double>& a, const std::vector<double>& b);
double identity_loss(const std::vector<double>& q, int label);

inline constexpr double kProbabilityFloor = 1e-12;

Afdm train_afdm(const data::CorpusData& data, const AfdmConfig& cfg, const nn::LrSchedule& schedule, uint64_t seed,
                nn::JsonlLog* log);

// Inference over a whole clip: [T,16,16] → [T, D_c].
torch::Tensor content_features(Afdm& model, const torch::Tensor& mel_clip);

struct AfdmReport {
  double identity_accuracy = 0.0;  // held-out windows
  double content_auc = 0.0;        // same-content cross-speaker vs different-content distances
  int windows = 0;
  int64_t same_pairs = 0;
  int64_t diff_pairs = 0;
  nlohmann::json to_json() const;
};
AfdmReport evaluate_afdm(Afdm& model, const data::CorpusData& data);

// Probability that a random negative score exceeds a random positive score (ties count half).
double auc_lower_is_positive(std::vector<double> positives, std::vector<double> negatives);

Checkpoint save_afdm(Afdm& model, int64_t step, const std::string& config_checksum);
Afdm load_afdm(const Checkpoint& ckpt);

}  // namespace opt::afdm
