#include "opt/landmark_detector.hpp"

#include <random>

#include "opt/config_reader.hpp"
#include "opt/error.hpp"

namespace opt::detector {

void DetectorConfig::validate() const {
  require(!widths.empty(), "detector.widths must not be empty");
  for (auto w : widths) require(w > 0, "detector.widths must be positive");
  require(hidden > 0, "detector.hidden must be positive");
  require(blur_prob >= 0.0 && blur_prob <= 1.0, "detector.blur_prob must lie in [0,1]");
  require(lr > 0.0, "detector.lr must be positive");
  require(steps >= 0 && batch >= 1 && log_every >= 1, "detector: steps >= 0, batch >= 1, log_every >= 1");
}

nlohmann::json DetectorConfig::to_json() const {
  return {{"widths", widths}, {"hidden", hidden},     {"blur_prob", blur_prob}, {"lr", lr},
          {"steps", steps},   {"batch", batch},       {"log_every", log_every}};
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  DetectorConfig c;
  config::KeyReader r(j, "detector");
  r.get("widths", c.widths);
  r.get("hidden", c.hidden);
  r.get("blur_prob", c.blur_prob);
  r.get("lr", c.lr);
  r.get("steps", c.steps);
  r.get("batch", c.batch);
  r.get("log_every", c.log_every);
  r.finish();
  c.validate();
  return c;
}

DetectorImpl::DetectorImpl(const DetectorConfig& c, int size) : cfg(c), image_size(size) {
  cfg.validate();
  using namespace torch::nn;
  features = Sequential();
  int64_t prev = 3;
  int spatial = size;
  for (auto w : cfg.widths) {
    features->push_back(Conv2d(Conv2dOptions(prev, w, 3).padding(1)));
    features->push_back(BatchNorm2d(w));
    features->push_back(Functional(torch::relu));
    features->push_back(Conv2d(Conv2dOptions(w, w, 3).stride(2).padding(1)));
    features->push_back(BatchNorm2d(w));
    features->push_back(Functional(torch::relu));
    prev = w;
    spatial = (spatial + 1) / 2;
  }
  features = register_module("features", features);
  fc1 = register_module("fc1", Linear(prev * spatial * spatial, cfg.hidden));
  fc2 = register_module("fc2", Linear(cfg.hidden, 2 * face3d::kLandmarkCount));
}

torch::Tensor DetectorImpl::forward(const torch::Tensor& images) {
  require(images.dim() == 4 && images.size(1) == 3 && images.size(2) == image_size && images.size(3) == image_size,
          "detector: images must be [B,3," + std::to_string(image_size) + "," + std::to_string(image_size) + "]");
  auto h = features->forward(images * 2.0 - 1.0).flatten(1);
  auto out = fc2(torch::relu(fc1(h))).view({images.size(0), face3d::kLandmarkCount, 2});
  const double half = image_size / 2.0;
  return out * half + half;
}

torch::Tensor box_blur(const torch::Tensor& images, int passes) {
  auto x = images;
  for (int i = 0; i < passes; ++i)
    x = torch::avg_pool2d(x, {3, 3}, {1, 1}, {1, 1}, /*ceil_mode=*/false, /*count_include_pad=*/false);
  return x;
}

Detector train_detector(const data::CorpusData& data, const DetectorConfig& cfg, const nn::LrSchedule& schedule,
                        uint64_t seed, nn::JsonlLog* log) {
  cfg.validate();
  require(data.frames.defined(), "detector: corpus frames not loaded");
  nn::seed_everything(seed);
  Detector det(cfg, data.image_size);
  det->train();
  torch::optim::Adam opt(det->parameters(), torch::optim::AdamOptions(cfg.lr));
  const auto train = data.clips(false);
  std::mt19937_64 rng(seed * 7919 + 11);
  std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
  std::uniform_int_distribution<int> frame(0, data.frames_per_clip - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = cfg.lr * schedule.at(step) / schedule.initial;
    nn::set_learning_rate(opt, lr);
    std::vector<torch::Tensor> imgs, pts;
    for (int b = 0; b < cfg.batch; ++b) {
      int c = train[pick(rng)];
      int f = frame(rng);
      auto img = data.frames[c][f].unsqueeze(0);
      if (u(rng) < cfg.blur_prob) img = box_blur(img, 1 + static_cast<int>(u(rng) * 2.0));
      imgs.push_back(img.squeeze(0));
      pts.push_back(data.landmarks[c][f]);
    }
    auto x = nn::colour_jitter(torch::stack(imgs), rng);
    auto loss = (det->forward(x) - torch::stack(pts)).pow(2).sum(2).mean();
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      log->write({{"stage", "detector"}, {"step", step}, {"L_pts", loss.item<double>()}, {"lr", lr}});
  }
  det->eval();
  return det;
}

std::vector<face3d::Landmarks2D> detect(Detector& det, const torch::Tensor& images) {
  torch::NoGradGuard ng;
  det->eval();
  auto p = det->forward(images).to(torch::kDouble).contiguous();
  std::vector<face3d::Landmarks2D> out(static_cast<size_t>(p.size(0)));
  auto acc = p.accessor<double, 3>();
  for (int64_t t = 0; t < p.size(0); ++t) {
    out[static_cast<size_t>(t)].points.resize(face3d::kLandmarkCount, 2);
    for (int k = 0; k < face3d::kLandmarkCount; ++k)
      for (int d = 0; d < 2; ++d) out[static_cast<size_t>(t)].points(k, d) = acc[t][k][d];
  }
  return out;
}

face3d::Landmarks2D detect(Detector& det, const FrameImage& image) {
  return detect(det, to_tensor(image).unsqueeze(0)).front();
}

double evaluate_detector(Detector& det, const data::CorpusData& data) {
  require(data.frames.defined(), "detector: corpus frames not loaded");
  torch::NoGradGuard ng;
  det->eval();
  auto test = data.clips(true);
  if (test.empty()) test = data.clips(false);
  double total = 0.0;
  int64_t n = 0;
  for (int c : test) {
    auto d = (det->forward(data.frames[c]) - data.landmarks[c]).pow(2).sum(2).sqrt();
    total += d.sum().item<double>();
    n += d.numel();
  }
  return total / static_cast<double>(n);
}

Checkpoint save_detector(Detector& det, int64_t step, const std::string& config_checksum) {
  return make_checkpoint("detector", *det, step, config_checksum,
                         {{"config", det->cfg.to_json()}, {"image_size", det->image_size}});
}

Detector load_detector(const Checkpoint& ckpt) {
  Detector d(DetectorConfig::from_json(ckpt.meta.at("config")), ckpt.meta.at("image_size").get<int>());
  restore(ckpt, *d);
  d->eval();
  return d;
}

}  // namespace opt::detector
