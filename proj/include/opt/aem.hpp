#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "opt/afdm.hpp"
#include "opt/checkpoint.hpp"
#include "opt/dataset.hpp"
#include "opt/face3d.hpp"
#include "opt/image.hpp"
#include "opt/nn_common.hpp"

namespace opt::aem {

// ---------------------------------------------------------------------------
// Face embedding (source feature F_src)

struct FaceEmbedConfig {
  int64_t dim = 64;
  std::vector<int64_t> widths{16, 32, 48, 64};
  double logit_scale = 10.0;
  int steps = 800;
  int batch = 48;
  int log_every = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static FaceEmbedConfig from_json(const nlohmann::json& j);
};

struct FaceEmbedImpl : torch::nn::Module {
  FaceEmbedImpl(const FaceEmbedConfig& cfg, int n_speakers, int image_size);
  // images [B,3,H,W] in [0,1] → unit-norm [B, dim]
  torch::Tensor forward(const torch::Tensor& images);
  torch::Tensor logits(const torch::Tensor& embedding);

  FaceEmbedConfig cfg;
  int n_speakers;
  int image_size;
  torch::nn::Sequential features{nullptr};
  torch::nn::Linear proj{nullptr}, classifier{nullptr};
};
TORCH_MODULE(FaceEmbed);

std::vector<float> face_embedding(FaceEmbed& net, const FrameImage& image);

FaceEmbed train_face_embed(const data::CorpusData& data, const FaceEmbedConfig& cfg, const nn::LrSchedule& schedule,
                           uint64_t seed, nn::JsonlLog* log);
// Fraction of (anchor, same-identity, other-identity) held-out triplets where the
// same-identity cosine similarity is the larger one.
double triplet_accuracy(FaceEmbed& net, const data::CorpusData& data, int triplets, uint64_t seed);

Checkpoint save_face_embed(FaceEmbed& net, int64_t step, const std::string& config_checksum);
FaceEmbed load_face_embed(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Differentiable landmark projection of the morphable model

struct LandmarkModel {
  torch::Tensor mean;       // [K,3]
  torch::Tensor identity;   // [K,3,80]
  torch::Tensor expression; // [K,3,64]
  torch::Tensor weights;    // [K]
  face3d::Camera camera;

  static LandmarkModel from_basis(const face3d::MorphableBasis& basis, const face3d::Camera& camera,
                                  torch::ScalarType dtype = torch::kFloat);
  // alpha [N,80], beta [N,64], rotation [N,3,3], translation [N,3] → [N,K,2] pixels
  torch::Tensor project(const torch::Tensor& alpha, const torch::Tensor& beta, const torch::Tensor& rotation,
                        const torch::Tensor& translation) const;
  // Weighted landmark loss per frame, [N].
  torch::Tensor loss(const torch::Tensor& pred_points, const torch::Tensor& gt_points) const;
};

// ---------------------------------------------------------------------------
// Audio-to-expression regressor

struct AemConfig {
  int64_t channels = 128;
  int64_t hidden = 128;
  double lambda_ldmk = 0.01;
  double bound = face3d::kDefaultCoeffBound;
  int steps = 1500;
  int batch = 8;
  int log_every = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static AemConfig from_json(const nlohmann::json& j);
};

struct AemImpl : torch::nn::Module {
  AemImpl(const AemConfig& cfg, int64_t content_dim, int64_t src_dim);
  // content [B,T,D_c], src [B,D_s] → β̂ [B,T,64] bounded by cfg.bound
  torch::Tensor forward(const torch::Tensor& content, const torch::Tensor& src);

  AemConfig cfg;
  int64_t content_dim, src_dim;
  torch::nn::Conv1d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Aem);

// AEM plus, for the entangled ablation, the jointly trained audio encoder that
// replaces AFDM's content encoder.
struct AemModelImpl : torch::nn::Module {
  AemModelImpl(const AemConfig& cfg, int64_t content_dim, int64_t src_dim, bool entangled, int context,
               const std::vector<int64_t>& encoder_widths);

  bool is_entangled() const { return !encoder.is_empty(); }
  // Per-frame content features of one clip: [T,16,16] → [T,D_c].
  torch::Tensor content(const torch::Tensor& mel_clip, afdm::Afdm* afdm_model);

  Aem aem{nullptr};
  nn::SeResEncoder encoder{nullptr};
  int context;
  std::vector<int64_t> encoder_widths;
};
TORCH_MODULE(AemModel);

// mean over frames of ‖β̂ − β‖₁ + λ·landmark_loss(project(α, β̂, R, T), gt_landmarks)
struct AemLossTerms {
  torch::Tensor total, l1, ldmk;
};
AemLossTerms aem_loss(const torch::Tensor& pred, const torch::Tensor& gt_beta, const torch::Tensor& gt_landmarks,
                      const torch::Tensor& alpha, const torch::Tensor& rotation, const torch::Tensor& translation,
                      const LandmarkModel& lm, double lambda_ldmk);

// Reference evaluation of the same loss through the face3d kernel, in double precision.
double aem_loss_reference(const std::vector<face3d::ExpressionCoeffs>& pred,
                          const std::vector<face3d::ExpressionCoeffs>& gt_beta,
                          const std::vector<face3d::Landmarks2D>& gt_landmarks, const face3d::MorphableBasis& basis,
                          const face3d::IdentityCoeffs& alpha, const std::vector<face3d::HeadPose>& poses,
                          const face3d::Camera& camera, double lambda_ldmk);

// When `afdm_model` is null the model is trained in entangled mode: a fresh
// SE-ResNet audio encoder is optimized jointly with the regressor on the AEM loss only.
AemModel train_aem(const data::CorpusData& data, afdm::Afdm* afdm_model, FaceEmbed& embed, const AemConfig& cfg,
                   const afdm::AfdmConfig& encoder_cfg, const nn::LrSchedule& schedule, uint64_t seed,
                   nn::JsonlLog* log);

// T content vectors and one source embedding → T expression vectors.
std::vector<face3d::ExpressionCoeffs> predict_expression(AemModel& model, const torch::Tensor& content,
                                                         const std::vector<float>& src);

struct AemReport {
  double mean_abs_error = 0.0;  // coefficient units, held-out frames
  double lmd = 0.0;             // px, gt α and pose, all 68 points
  double lmd_mouth = 0.0;       // px, points 48–67
  int frames = 0;
  nlohmann::json to_json() const;
};
AemReport evaluate_aem(AemModel& model, afdm::Afdm* afdm_model, FaceEmbed& embed, const data::CorpusData& data);

Checkpoint save_aem(AemModel& model, int64_t step, const std::string& config_checksum);
AemModel load_aem(const Checkpoint& ckpt);

}  // namespace opt::aem
