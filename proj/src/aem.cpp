#include "opt/aem.hpp"

#include <cmath>
#include <numeric>

#include "opt/config_reader.hpp"
#include "opt/error.hpp"

namespace opt::aem {

// ---------------------------------------------------------------------------
// Face embedding

void FaceEmbedConfig::validate() const {
  require(dim > 0, "face_embed.dim must be positive");
  require(!widths.empty() && widths.size() <= 5, "face_embed.widths must list 1 to 5 widths");
  require(logit_scale > 0, "face_embed.logit_scale must be positive");
  require(steps >= 0 && batch >= 2 && log_every >= 1, "face_embed: steps >= 0, batch >= 2, log_every >= 1");
}

nlohmann::json FaceEmbedConfig::to_json() const {
  return {{"dim", dim}, {"widths", widths}, {"logit_scale", logit_scale},
          {"steps", steps}, {"batch", batch}, {"log_every", log_every}};
}

FaceEmbedConfig FaceEmbedConfig::from_json(const nlohmann::json& j) {
  FaceEmbedConfig c;
  config::KeyReader r(j, "face_embed");
  r.get("dim", c.dim);
  r.get("widths", c.widths);
  r.get("logit_scale", c.logit_scale);
  r.get("steps", c.steps);
  r.get("batch", c.batch);
  r.get("log_every", c.log_every);
  r.finish();
  c.validate();
  return c;
}

FaceEmbedImpl::FaceEmbedImpl(const FaceEmbedConfig& c, int n, int size) : cfg(c), n_speakers(n), image_size(size) {
  using namespace torch::nn;
  features = Sequential();
  int64_t prev = 3;
  int spatial = size;
  for (auto w : cfg.widths) {
    features->push_back(Conv2d(Conv2dOptions(prev, w, 3).stride(2).padding(1).bias(false)));
    features->push_back(BatchNorm2d(w));
    features->push_back(Functional(torch::relu));
    prev = w;
    spatial = (spatial + 1) / 2;
  }
  features = register_module("features", features);
  proj = register_module("proj", Linear(prev * spatial * spatial, cfg.dim));
  classifier = register_module("classifier", Linear(LinearOptions(cfg.dim, n).bias(false)));
}

torch::Tensor FaceEmbedImpl::forward(const torch::Tensor& images) {
  require(images.dim() == 4 && images.size(1) == 3 && images.size(2) == image_size && images.size(3) == image_size,
          "face_embedding: expected images of shape [B,3," + std::to_string(image_size) + "," +
              std::to_string(image_size) + "]");
  auto x = features->forward(images * 2.0 - 1.0);
  return torch::nn::functional::normalize(proj(x.flatten(1)), torch::nn::functional::NormalizeFuncOptions().dim(1));
}

torch::Tensor FaceEmbedImpl::logits(const torch::Tensor& embedding) {
  auto w = torch::nn::functional::normalize(classifier->weight, torch::nn::functional::NormalizeFuncOptions().dim(1));
  return cfg.logit_scale * torch::matmul(embedding, w.t());
}

std::vector<float> face_embedding(FaceEmbed& net, const FrameImage& image) {
  torch::NoGradGuard ng;
  net->eval();
  auto e = net->forward(to_tensor(image).unsqueeze(0)).squeeze(0).contiguous();
  return {e.data_ptr<float>(), e.data_ptr<float>() + e.numel()};
}

FaceEmbed train_face_embed(const data::CorpusData& data, const FaceEmbedConfig& cfg, const nn::LrSchedule& schedule,
                           uint64_t seed, nn::JsonlLog* log) {
  cfg.validate();
  require(data.frames.defined(), "face_embed: corpus frames not loaded");
  nn::seed_everything(seed);
  FaceEmbed net(cfg, data.n_speakers, data.image_size);
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(schedule.at(0)));
  const auto train = data.clips(false);
  std::mt19937_64 rng(seed * 104729 + 3);
  std::uniform_int_distribution<size_t> pick_clip(0, train.size() - 1);
  std::uniform_int_distribution<int> pick_frame(0, data.frames_per_clip - 1);
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = schedule.at(step);
    nn::set_learning_rate(opt, lr);
    std::vector<torch::Tensor> imgs;
    std::vector<int64_t> labels;
    for (int b = 0; b < cfg.batch; ++b) {
      int c = train[pick_clip(rng)];
      imgs.push_back(data.frames[c][pick_frame(rng)]);
      labels.push_back(data.speaker[static_cast<size_t>(c)]);
    }
    auto x = nn::colour_jitter(torch::stack(imgs), rng);
    auto logits = net->logits(net->forward(x));
    auto loss = torch::nn::functional::cross_entropy(logits, torch::tensor(labels, torch::kLong));
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      log->write({{"stage", "face_embed"}, {"step", step}, {"L_cls", loss.item<double>()}, {"lr", lr}});
  }
  net->eval();
  return net;
}

double triplet_accuracy(FaceEmbed& net, const data::CorpusData& data, int triplets, uint64_t seed) {
  require(data.frames.defined(), "face_embed: corpus frames not loaded");
  torch::NoGradGuard ng;
  net->eval();
  auto pool = data.clips(true);
  if (pool.empty()) pool = data.clips(false);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
  std::uniform_int_distribution<int> frame(0, data.frames_per_clip - 1);
  std::vector<torch::Tensor> a, p, n;
  for (int t = 0; t < triplets; ++t) {
    int c = pool[pick(rng)];
    int cp, cn;
    int guard = 0;
    do cp = pool[pick(rng)];
    while ((data.speaker[static_cast<size_t>(cp)] != data.speaker[static_cast<size_t>(c)] || cp == c) && ++guard < 10000);
    do cn = pool[pick(rng)];
    while (data.speaker[static_cast<size_t>(cn)] == data.speaker[static_cast<size_t>(c)]);
    a.push_back(data.frames[c][frame(rng)]);
    p.push_back(data.frames[cp][frame(rng)]);
    n.push_back(data.frames[cn][frame(rng)]);
  }
  auto ea = net->forward(torch::stack(a)), ep = net->forward(torch::stack(p)), en = net->forward(torch::stack(n));
  auto wins = ((ea * ep).sum(1) > (ea * en).sum(1)).sum().item<int64_t>();
  return static_cast<double>(wins) / triplets;
}

Checkpoint save_face_embed(FaceEmbed& net, int64_t step, const std::string& config_checksum) {
  nlohmann::json meta = {{"config", net->cfg.to_json()}, {"n_speakers", net->n_speakers}, {"image_size", net->image_size}};
  return make_checkpoint("face_embed", *net, step, config_checksum, meta);
}

FaceEmbed load_face_embed(const Checkpoint& ckpt) {
  FaceEmbed net(FaceEmbedConfig::from_json(ckpt.meta.at("config")), ckpt.meta.at("n_speakers").get<int>(),
                ckpt.meta.at("image_size").get<int>());
  restore(ckpt, *net);
  net->eval();
  return net;
}

// ---------------------------------------------------------------------------
// Landmark model

LandmarkModel LandmarkModel::from_basis(const face3d::MorphableBasis& basis, const face3d::Camera& camera,
                                        torch::ScalarType dtype) {
  const int K = basis.landmark_count();
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  LandmarkModel m;
  m.mean = torch::empty({K, 3}, opts);
  m.identity = torch::empty({K, 3, basis.identity_dim()}, opts);
  m.expression = torch::empty({K, 3, basis.expression_dim()}, opts);
  m.weights = torch::empty({K}, opts);
  auto mean = m.mean.accessor<double, 2>();
  auto id = m.identity.accessor<double, 3>();
  auto ex = m.expression.accessor<double, 3>();
  for (int k = 0; k < K; ++k) {
    int v = basis.landmark_indices[static_cast<size_t>(k)];
    m.weights[k] = basis.landmark_weights[static_cast<size_t>(k)];
    for (int a = 0; a < 3; ++a) {
      mean[k][a] = basis.mean_shape(v, a);
      for (int d = 0; d < basis.identity_dim(); ++d) id[k][a][d] = basis.identity_basis(3 * v + a, d);
      for (int d = 0; d < basis.expression_dim(); ++d) ex[k][a][d] = basis.expression_basis(3 * v + a, d);
    }
  }
  m.mean = m.mean.to(dtype);
  m.identity = m.identity.to(dtype);
  m.expression = m.expression.to(dtype);
  m.weights = m.weights.to(dtype);
  m.camera = camera;
  return m;
}

torch::Tensor LandmarkModel::project(const torch::Tensor& alpha, const torch::Tensor& beta, const torch::Tensor& rotation,
                                     const torch::Tensor& translation) const {
  // shape [N,K,3] = S̄ + B_id α + B_exp β
  auto shape = mean.unsqueeze(0) + torch::einsum("kad,nd->nka", {identity, alpha}) +
               torch::einsum("kad,nd->nka", {expression, beta});
  auto posed = torch::matmul(shape, rotation.transpose(1, 2)) + translation.unsqueeze(1);
  auto x = posed.select(2, 0) * camera.scale + camera.principal.x();
  auto y = -posed.select(2, 1) * camera.scale + camera.principal.y();
  return torch::stack({x, y}, 2);
}

torch::Tensor LandmarkModel::loss(const torch::Tensor& pred_points, const torch::Tensor& gt_points) const {
  require(pred_points.sizes() == gt_points.sizes(), "landmark loss: shape mismatch");
  auto d2 = (pred_points - gt_points).pow(2).sum(2);  // [N,K]
  return (d2 * weights.unsqueeze(0)).sum(1) / static_cast<double>(weights.size(0));
}

// ---------------------------------------------------------------------------
// AEM

void AemConfig::validate() const {
  require(channels > 0 && hidden > 0, "aem: layer sizes must be positive");
  require(lambda_ldmk >= 0, "aem.lambda_ldmk must be non-negative");
  require(bound > 0, "aem.bound must be positive");
  require(steps >= 0 && batch >= 1 && log_every >= 1, "aem: steps >= 0, batch >= 1, log_every >= 1");
}

nlohmann::json AemConfig::to_json() const {
  return {{"channels", channels}, {"hidden", hidden}, {"lambda_ldmk", lambda_ldmk}, {"bound", bound},
          {"steps", steps},       {"batch", batch},   {"log_every", log_every}};
}

AemConfig AemConfig::from_json(const nlohmann::json& j) {
  AemConfig c;
  config::KeyReader r(j, "aem");
  r.get("channels", c.channels);
  r.get("hidden", c.hidden);
  r.get("lambda_ldmk", c.lambda_ldmk);
  r.get("bound", c.bound);
  r.get("steps", c.steps);
  r.get("batch", c.batch);
  r.get("log_every", c.log_every);
  r.finish();
  c.validate();
  return c;
}

AemImpl::AemImpl(const AemConfig& c, int64_t cd, int64_t sd) : cfg(c), content_dim(cd), src_dim(sd) {
  using namespace torch::nn;
  conv1 = register_module("conv1", Conv1d(Conv1dOptions(cd, cfg.channels, 3).padding(1)));
  conv2 = register_module("conv2", Conv1d(Conv1dOptions(cfg.channels, cfg.channels, 3).padding(1)));
  fc1 = register_module("fc1", Linear(cfg.channels + sd, cfg.hidden));
  fc2 = register_module("fc2", Linear(cfg.hidden, face3d::kExpressionDim));
}

torch::Tensor AemImpl::forward(const torch::Tensor& content, const torch::Tensor& src) {
  require(content.dim() == 3 && content.size(2) == content_dim, "aem: content must be [B,T," +
                                                                     std::to_string(content_dim) + "]");
  require(src.dim() == 2 && src.size(0) == content.size(0) && src.size(1) == src_dim, "aem: source must be [B," +
                                                                                          std::to_string(src_dim) + "]");
  auto h = torch::relu(conv1(content.transpose(1, 2)));
  h = torch::relu(conv2(h)).transpose(1, 2);  // [B,T,C]
  auto s = src.unsqueeze(1).expand({-1, h.size(1), -1});
  h = torch::relu(fc1(torch::cat({h, s}, 2)));
  return cfg.bound * torch::tanh(fc2(h));
}

AemModelImpl::AemModelImpl(const AemConfig& cfg, int64_t content_dim, int64_t src_dim, bool entangled, int ctx,
                           const std::vector<int64_t>& widths)
    : context(ctx), encoder_widths(widths) {
  aem = register_module("aem", Aem(cfg, content_dim, src_dim));
  if (entangled) encoder = register_module("encoder", nn::SeResEncoder(1, widths, content_dim));
}

torch::Tensor AemModelImpl::content(const torch::Tensor& mel_clip, afdm::Afdm* afdm_model) {
  if (is_entangled()) {
    std::vector<int> frames(static_cast<size_t>(mel_clip.size(0)));
    std::iota(frames.begin(), frames.end(), 0);
    return encoder->forward(data::mel_windows(mel_clip, frames, context));
  }
  if (afdm_model == nullptr) throw MissingPrerequisite("afdm", "AEM needs AFDM content features");
  return afdm::content_features(*afdm_model, mel_clip);
}

AemLossTerms aem_loss(const torch::Tensor& pred, const torch::Tensor& gt_beta, const torch::Tensor& gt_landmarks,
                      const torch::Tensor& alpha, const torch::Tensor& rotation, const torch::Tensor& translation,
                      const LandmarkModel& lm, double lambda_ldmk) {
  require(pred.sizes() == gt_beta.sizes(), "aem_loss: prediction and ground truth lengths differ");
  auto p = pred.reshape({-1, face3d::kExpressionDim});
  auto g = gt_beta.reshape({-1, face3d::kExpressionDim});
  const int64_t n = p.size(0);
  require(gt_landmarks.numel() == n * lm.weights.size(0) * 2, "aem_loss: landmark sequence length mismatch");
  AemLossTerms t;
  t.l1 = (p - g).abs().sum(1).mean();
  if (lambda_ldmk > 0.0) {
    auto pts = lm.project(alpha.reshape({n, -1}), p, rotation.reshape({n, 3, 3}), translation.reshape({n, 3}));
    t.ldmk = lm.loss(pts, gt_landmarks.reshape({n, -1, 2})).mean();
  } else {
    t.ldmk = torch::zeros({}, p.options());
  }
  t.total = t.l1 + lambda_ldmk * t.ldmk;
  return t;
}

double aem_loss_reference(const std::vector<face3d::ExpressionCoeffs>& pred,
                          const std::vector<face3d::ExpressionCoeffs>& gt_beta,
                          const std::vector<face3d::Landmarks2D>& gt_landmarks, const face3d::MorphableBasis& basis,
                          const face3d::IdentityCoeffs& alpha, const std::vector<face3d::HeadPose>& poses,
                          const face3d::Camera& camera, double lambda_ldmk) {
  require(pred.size() == gt_beta.size() && pred.size() == gt_landmarks.size() && pred.size() == poses.size(),
          "aem_loss: prediction and ground truth lengths differ");
  require(!pred.empty(), "aem_loss: empty sequence");
  double total = 0.0;
  for (size_t f = 0; f < pred.size(); ++f) {
    total += (pred[f].values - gt_beta[f].values).cwiseAbs().sum();
    if (lambda_ldmk > 0.0) {
      auto lm = face3d::render_landmarks(basis, alpha, pred[f], poses[f], camera);
      total += lambda_ldmk * face3d::landmark_loss(lm, gt_landmarks[f], basis.landmark_weights);
    }
  }
  return total / static_cast<double>(pred.size());
}

namespace {

// Embeddings of every frame in the corpus, [C,T,D].
torch::Tensor embed_all_frames(FaceEmbed& embed, const data::CorpusData& data) {
  require(data.frames.defined(), "aem: corpus frames not loaded");
  torch::NoGradGuard ng;
  embed->eval();
  std::vector<torch::Tensor> out;
  for (int c = 0; c < data.clip_count(); ++c) out.push_back(embed->forward(data.frames[c]));
  return torch::stack(out);
}

// Deterministic evaluation source: frame 0 of the speaker's first training clip.
int reference_clip(const data::CorpusData& data, int speaker) {
  for (int c : data.clips(false))
    if (data.speaker[static_cast<size_t>(c)] == speaker) return c;
  for (int c = 0; c < data.clip_count(); ++c)
    if (data.speaker[static_cast<size_t>(c)] == speaker) return c;
  throw ValidationError("aem: speaker without clips");
}

}  // namespace

AemModel train_aem(const data::CorpusData& data, afdm::Afdm* afdm_model, FaceEmbed& embed, const AemConfig& cfg,
                   const afdm::AfdmConfig& encoder_cfg, const nn::LrSchedule& schedule, uint64_t seed,
                   nn::JsonlLog* log) {
  cfg.validate();
  nn::seed_everything(seed);
  const bool entangled = afdm_model == nullptr;
  const int64_t content_dim = entangled ? encoder_cfg.content_dim : (*afdm_model)->cfg.content_dim;
  const int context = entangled ? encoder_cfg.context : (*afdm_model)->cfg.context;
  AemModel model(cfg, content_dim, embed->cfg.dim, entangled, context, encoder_cfg.widths);
  model->train();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(schedule.at(0)));

  const auto emb = embed_all_frames(embed, data);
  torch::Tensor content_all;
  if (!entangled) {
    std::vector<torch::Tensor> cs;
    for (int c = 0; c < data.clip_count(); ++c) cs.push_back(afdm::content_features(*afdm_model, data.mel[c]));
    content_all = torch::stack(cs);
  }
  const auto camera = face3d::Camera::for_image(data.image_size);
  const auto lm = LandmarkModel::from_basis(data.basis, camera);
  const auto train = data.clips(false);
  std::vector<std::vector<int>> same_speaker(static_cast<size_t>(data.n_speakers));
  for (int c : train) same_speaker[static_cast<size_t>(data.speaker[static_cast<size_t>(c)])].push_back(c);

  std::mt19937_64 rng(seed * 15485863 + 11);
  std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
  std::uniform_int_distribution<int> frame(0, data.frames_per_clip - 1);
  const int T = data.frames_per_clip;
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = schedule.at(step);
    nn::set_learning_rate(opt, lr);
    std::vector<int64_t> clips;
    std::vector<torch::Tensor> srcs, contents;
    for (int b = 0; b < cfg.batch; ++b) {
      int c = train[pick(rng)];
      const auto& pool = same_speaker[static_cast<size_t>(data.speaker[static_cast<size_t>(c)])];
      int o = pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)];
      if (pool.size() > 1)
        while (o == c) o = pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)];
      clips.push_back(c);
      srcs.push_back(emb[o][frame(rng)]);
      if (entangled) contents.push_back(model->content(data.mel[c], nullptr));
    }
    auto idx = torch::tensor(clips, torch::kLong);
    auto content = entangled ? torch::stack(contents) : content_all.index_select(0, idx);
    auto pred = model->aem->forward(content, torch::stack(srcs));
    auto [rot, trans] = data::split_pose(data.pose.index_select(0, idx));
    auto alpha = data.alpha.index_select(0, torch::tensor(
                                                [&] {
                                                  std::vector<int64_t> s;
                                                  for (auto c : clips) s.push_back(data.speaker[static_cast<size_t>(c)]);
                                                  return s;
                                                }(),
                                                torch::kLong))
                     .unsqueeze(1)
                     .expand({-1, T, -1});
    auto terms = aem_loss(pred, data.beta.index_select(0, idx), data.landmarks.index_select(0, idx), alpha, rot, trans,
                          lm, cfg.lambda_ldmk);
    opt.zero_grad();
    terms.total.backward();
    opt.step();
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      log->write({{"stage", entangled ? "aem_entangled" : "aem"},
                  {"step", step},
                  {"L1", terms.l1.item<double>()},
                  {"L_ldmk", terms.ldmk.item<double>()},
                  {"lambda_ldmk", cfg.lambda_ldmk},
                  {"lr", lr}});
    }
  }
  model->eval();
  return model;
}

std::vector<face3d::ExpressionCoeffs> predict_expression(AemModel& model, const torch::Tensor& content,
                                                         const std::vector<float>& src) {
  torch::NoGradGuard ng;
  model->eval();
  require(content.dim() == 2 && content.size(0) > 0, "predict_expression: content sequence must be non-empty [T,D_c]");
  auto s = torch::tensor(src).unsqueeze(0);
  auto out = model->aem->forward(content.unsqueeze(0), s).squeeze(0).to(torch::kDouble).contiguous();
  std::vector<face3d::ExpressionCoeffs> seq(static_cast<size_t>(out.size(0)));
  auto a = out.accessor<double, 2>();
  for (size_t f = 0; f < seq.size(); ++f)
    for (int k = 0; k < face3d::kExpressionDim; ++k) seq[f].values(k) = a[static_cast<int64_t>(f)][k];
  return seq;
}

nlohmann::json AemReport::to_json() const {
  return {{"mean_abs_error", mean_abs_error}, {"lmd", lmd}, {"lmd_mouth", lmd_mouth}, {"frames", frames}};
}

AemReport evaluate_aem(AemModel& model, afdm::Afdm* afdm_model, FaceEmbed& embed, const data::CorpusData& data) {
  torch::NoGradGuard ng;
  model->eval();
  embed->eval();
  require(data.frames.defined(), "aem: corpus frames not loaded");
  auto test = data.clips(true);
  if (test.empty()) test = data.clips(false);
  const auto lm = LandmarkModel::from_basis(data.basis, face3d::Camera::for_image(data.image_size));
  const int T = data.frames_per_clip;
  AemReport rep;
  double abs_sum = 0.0, lmd_sum = 0.0, mouth_sum = 0.0;
  for (int c : test) {
    const int s = data.speaker[static_cast<size_t>(c)];
    auto src = embed->forward(data.frames[reference_clip(data, s)][0].unsqueeze(0));
    auto content = model->content(data.mel[c], afdm_model);
    auto pred = model->aem->forward(content.unsqueeze(0), src).squeeze(0);
    abs_sum += (pred - data.beta[c]).abs().mean().item<double>() * T;
    auto [rot, trans] = data::split_pose(data.pose[c]);
    auto pts = lm.project(data.alpha[s].unsqueeze(0).expand({T, -1}), pred, rot, trans);
    auto dist = (pts - data.landmarks[c]).pow(2).sum(2).sqrt();  // [T,K]
    lmd_sum += dist.mean().item<double>() * T;
    mouth_sum += dist.narrow(1, 48, 20).mean().item<double>() * T;
    rep.frames += T;
  }
  rep.mean_abs_error = abs_sum / rep.frames;
  rep.lmd = lmd_sum / rep.frames;
  rep.lmd_mouth = mouth_sum / rep.frames;
  return rep;
}

Checkpoint save_aem(AemModel& model, int64_t step, const std::string& config_checksum) {
  nlohmann::json meta = {{"config", model->aem->cfg.to_json()},
                         {"content_dim", model->aem->content_dim},
                         {"src_dim", model->aem->src_dim},
                         {"entangled", model->is_entangled()},
                         {"context", model->context},
                         {"encoder_widths", model->encoder_widths}};
  return make_checkpoint("aem", *model, step, config_checksum, meta);
}

AemModel load_aem(const Checkpoint& ckpt) {
  const auto& m = ckpt.meta;
  AemModel model(AemConfig::from_json(m.at("config")), m.at("content_dim").get<int64_t>(),
                 m.at("src_dim").get<int64_t>(), m.at("entangled").get<bool>(), m.at("context").get<int>(),
                 m.at("encoder_widths").get<std::vector<int64_t>>());
  restore(ckpt, *model);
  model->eval();
  return model;
}

}  // namespace opt::aem
