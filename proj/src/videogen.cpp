#include "opt/videogen.hpp"

#include <random>

#include "opt/config_reader.hpp"
#include "opt/error.hpp"

namespace opt::vg {

void VgConfig::validate() const {
  require(widths.size() == 3, "vg.widths must list exactly 3 encoder widths (3 downsamplings)");
  for (auto w : widths) require(w > 0, "vg.widths must be positive");
  require(res_blocks >= 1, "vg.res_blocks must be >= 1");
  require(disc_width > 0, "vg.disc_width must be positive");
  require(perceptual_widths.size() == 5, "vg.perceptual_widths must list 5 stage widths");
  for (int l : perceptual_layers) require(l >= 1 && l <= 5, "vg.perceptual_layers must lie in 1..5");
  require(w_rec >= 0 && w_gan >= 0 && w_per >= 0, "vg: loss weights must be non-negative");
  require(steps >= 0 && batch >= 1 && log_every >= 1, "vg: steps >= 0, batch >= 1, log_every >= 1");
}

nlohmann::json VgConfig::to_json() const {
  return {{"widths", widths},
          {"res_blocks", res_blocks},
          {"coord_channels", coord_channels},
          {"disc_width", disc_width},
          {"perceptual_widths", perceptual_widths},
          {"perceptual_layers", perceptual_layers},
          {"perceptual_seed", perceptual_seed},
          {"w_rec", w_rec},
          {"w_gan", w_gan},
          {"w_per", w_per},
          {"steps", steps},
          {"batch", batch},
          {"log_every", log_every}};
}

VgConfig VgConfig::from_json(const nlohmann::json& j) {
  VgConfig c;
  config::KeyReader r(j, "vg");
  r.get("widths", c.widths);
  r.get("res_blocks", c.res_blocks);
  r.get("coord_channels", c.coord_channels);
  r.get("disc_width", c.disc_width);
  r.get("perceptual_widths", c.perceptual_widths);
  r.get("perceptual_layers", c.perceptual_layers);
  r.get("perceptual_seed", c.perceptual_seed);
  r.get("w_rec", c.w_rec);
  r.get("w_gan", c.w_gan);
  r.get("w_per", c.w_per);
  r.get("steps", c.steps);
  r.get("batch", c.batch);
  r.get("log_every", c.log_every);
  r.finish();
  c.validate();
  return c;
}

torch::Tensor style_vector(const torch::Tensor& beta, const torch::Tensor& rotation, const torch::Tensor& translation) {
  require(beta.dim() == 2 && beta.size(1) == face3d::kExpressionDim, "style: beta must be [B,64]");
  require(rotation.dim() == 3 && translation.dim() == 2, "style: rotation [B,3,3], translation [B,3]");
  auto cols = rotation.narrow(2, 0, 2).transpose(1, 2).reshape({rotation.size(0), 6});
  return torch::cat({beta, cols, translation}, 1);
}

torch::Tensor adain_inject(const torch::Tensor& x, const torch::Tensor& gamma, const torch::Tensor& delta, double eps) {
  require(x.dim() == 4, "adain: feature map must be [B,C,H,W]");
  require(gamma.sizes() == delta.sizes() && gamma.dim() == 2 && gamma.size(0) == x.size(0) && gamma.size(1) == x.size(1),
          "adain: style channels do not match the feature map");
  auto mean = x.mean({2, 3}, true);
  auto var = (x - mean).pow(2).mean({2, 3}, true);
  auto norm = (x - mean) / torch::sqrt(var + eps);
  return norm * gamma.unsqueeze(-1).unsqueeze(-1) + delta.unsqueeze(-1).unsqueeze(-1);
}

AdaInImpl::AdaInImpl(int64_t c, int64_t style_dim) : channels(c) {
  proj = register_module("proj", torch::nn::Linear(style_dim, 2 * c));
  torch::NoGradGuard ng;
  proj->weight.mul_(0.1);
  proj->bias.zero_();
  proj->bias.narrow(0, 0, c).fill_(1.0);
}

torch::Tensor AdaInImpl::forward(const torch::Tensor& x, const torch::Tensor& style) {
  require(x.size(1) == channels, "adain: channel mismatch");
  auto gd = proj(style);
  return adain_inject(x, gd.narrow(1, 0, channels), gd.narrow(1, channels, channels));
}

ResBlockImpl::ResBlockImpl(int64_t c) {
  using namespace torch::nn;
  conv1 = register_module("conv1", Conv2d(Conv2dOptions(c, c, 3).padding(1)));
  conv2 = register_module("conv2", Conv2d(Conv2dOptions(c, c, 3).padding(1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) { return x + conv2(torch::relu(conv1(x))); }

GeneratorImpl::GeneratorImpl(const VgConfig& c, int size) : cfg(c), image_size(size) {
  cfg.validate();
  require(size % 8 == 0, "vg: image size must be a multiple of 8");
  using namespace torch::nn;
  const int64_t in_ch = cfg.coord_channels ? 5 : 3;
  const auto& w = cfg.widths;
  encoder = Sequential(Conv2d(Conv2dOptions(in_ch, w[0], 7).padding(3)), Functional(torch::relu),
                       Conv2d(Conv2dOptions(w[0], w[1], 4).stride(2).padding(1)), Functional(torch::relu),
                       Conv2d(Conv2dOptions(w[1], w[2], 4).stride(2).padding(1)), Functional(torch::relu),
                       Conv2d(Conv2dOptions(w[2], w[2], 4).stride(2).padding(1)), Functional(torch::relu));
  encoder = register_module("encoder", encoder);
  for (int i = 0; i < cfg.res_blocks; ++i) {
    blocks.push_back(register_module("block" + std::to_string(i), ResBlock(w[2])));
    norms.push_back(register_module("adain" + std::to_string(i), AdaIn(w[2], kStyleDim)));
  }
  decoder = Sequential();
  auto up = [&](int64_t a, int64_t b) {
    decoder->push_back(Upsample(UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    decoder->push_back(Conv2d(Conv2dOptions(a, b, 3).padding(1)));
    decoder->push_back(Functional(torch::relu));
  };
  up(w[2], w[2]);
  up(w[2], w[1]);
  up(w[1], w[0]);
  decoder->push_back(Conv2d(Conv2dOptions(w[0], 3, 7).padding(3)));
  decoder->push_back(Functional(torch::sigmoid));
  decoder = register_module("decoder", decoder);
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& src, const torch::Tensor& style) {
  require(src.dim() == 4 && src.size(1) == 3 && src.size(2) == image_size && src.size(3) == image_size,
          "generator: source must be [B,3," + std::to_string(image_size) + "," + std::to_string(image_size) + "]");
  require(style.dim() == 2 && style.size(0) == src.size(0) && style.size(1) == kStyleDim, "generator: style must be [B,73]");
  auto x = src * 2.0 - 1.0;
  if (cfg.coord_channels) {
    auto r = torch::linspace(-1.0, 1.0, image_size, src.options());
    auto yy = r.view({1, 1, -1, 1}).expand({src.size(0), 1, image_size, image_size});
    auto xx = r.view({1, 1, 1, -1}).expand({src.size(0), 1, image_size, image_size});
    x = torch::cat({x, xx, yy}, 1);
  }
  auto h = encoder->forward(x);
  for (size_t i = 0; i < blocks.size(); ++i) h = torch::relu(norms[i]->forward(blocks[i]->forward(h), style));
  return decoder->forward(h);
}

DiscriminatorImpl::DiscriminatorImpl(int64_t d, int size) : image_size(size) {
  using namespace torch::nn;
  auto lrelu = Functional([](const torch::Tensor& t) { return torch::leaky_relu(t, 0.2); });
  net = Sequential(Conv2d(Conv2dOptions(3, d, 4).stride(2).padding(1)), lrelu,
                   Conv2d(Conv2dOptions(d, 2 * d, 4).stride(2).padding(1)), lrelu,
                   Conv2d(Conv2dOptions(2 * d, 4 * d, 4).stride(2).padding(1)), lrelu,
                   Conv2d(Conv2dOptions(4 * d, 4 * d, 4).stride(1).padding(1)), lrelu,
                   Conv2d(Conv2dOptions(4 * d, 1, 4).stride(1).padding(1)));
  net = register_module("net", net);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& img) {
  require(img.dim() == 4 && img.size(1) == 3 && img.size(2) == image_size && img.size(3) == image_size,
          "discriminator: image must be [B,3," + std::to_string(image_size) + "," + std::to_string(image_size) + "]");
  return torch::sigmoid(net->forward(img * 2.0 - 1.0));
}

PerceptualNetImpl::PerceptualNetImpl(const std::vector<int64_t>& widths, uint64_t seed) {
  using namespace torch::nn;
  // Initialize under a private generator state so the pyramid is identical
  // whatever the caller's global seed is.
  torch::Tensor saved;
  {
    auto gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    saved = gen.get_state();
  }
  torch::manual_seed(seed);
  stages = ModuleList();
  int64_t prev = 3;
  for (auto w : widths) {
    stages->push_back(Conv2d(Conv2dOptions(prev, w, 3).padding(1)));
    prev = w;
  }
  stages = register_module("stages", stages);
  {
    auto gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    gen.set_state(saved);
  }
  for (auto& p : parameters()) p.set_requires_grad(false);
  eval();
}

std::vector<torch::Tensor> PerceptualNetImpl::forward(const torch::Tensor& img) {
  std::vector<torch::Tensor> out;
  auto x = img * 2.0 - 1.0;
  for (const auto& m : *stages) {
    x = torch::avg_pool2d(torch::relu(m->as<torch::nn::Conv2d>()->forward(x)), 2);
    out.push_back(x);
  }
  return out;
}

torch::Tensor rec_loss(const torch::Tensor& gt, const torch::Tensor& gen) {
  require(gt.sizes() == gen.sizes(), "rec_loss: shape mismatch");
  auto d = (gt - gen).reshape({gt.dim() == 4 ? gt.size(0) : 1, -1});
  return d.pow(2).sum(1).sqrt();
}

torch::Tensor gan_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  require(d_real.sizes() == d_fake.sizes(), "gan_loss: patch maps differ in shape");
  auto r = d_real.clamp(kPatchFloor, 1.0 - kPatchFloor);
  auto f = d_fake.clamp(kPatchFloor, 1.0 - kPatchFloor);
  return torch::log(r).mean() + torch::log(1.0 - f).mean();
}

torch::Tensor gan_generator_loss(const torch::Tensor& d_fake) {
  return -torch::log(d_fake.clamp(kPatchFloor, 1.0 - kPatchFloor)).mean();
}

torch::Tensor perceptual_loss(const torch::Tensor& gen, const torch::Tensor& gt, const FeatureExtractor& extractor,
                              const std::vector<int>& layers, bool per_element) {
  require(gen.sizes() == gt.sizes(), "perceptual_loss: shape mismatch");
  auto fg = extractor(gen);
  auto ft = extractor(gt);
  auto total = torch::zeros({}, gen.options());
  for (int l : layers) {
    require(l >= 1 && static_cast<size_t>(l) <= fg.size(), "perceptual_loss: layer index out of range");
    auto d = (fg[static_cast<size_t>(l - 1)] - ft[static_cast<size_t>(l - 1)]).abs();
    total = total + (per_element ? d.mean() : d.sum());
  }
  return total;
}

VgModels train_generator(const data::CorpusData& data, const VgConfig& cfg, const nn::LrSchedule& schedule,
                         uint64_t seed, nn::JsonlLog* log) {
  cfg.validate();
  require(data.frames.defined(), "vg: corpus frames not loaded");
  nn::seed_everything(seed);
  VgModels m{Generator(cfg, data.image_size), Discriminator(cfg.disc_width, data.image_size)};
  PerceptualNet per(cfg.perceptual_widths, cfg.perceptual_seed);
  FeatureExtractor phi = [&](const torch::Tensor& x) { return per->forward(x); };
  m.gen->train();
  m.disc->train();
  torch::optim::Adam opt_g(m.gen->parameters(), torch::optim::AdamOptions(schedule.at(0)).betas({0.5, 0.999}));
  torch::optim::Adam opt_d(m.disc->parameters(), torch::optim::AdamOptions(schedule.at(0)).betas({0.5, 0.999}));

  const auto train = data.clips(false);
  std::vector<std::vector<int>> by_speaker(static_cast<size_t>(data.n_speakers));
  for (int c : train) by_speaker[static_cast<size_t>(data.speaker[static_cast<size_t>(c)])].push_back(c);
  std::mt19937_64 rng(seed * 2654435761ULL + 5);
  std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
  std::uniform_int_distribution<int> frame(0, data.frames_per_clip - 1);

  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = schedule.at(step);
    nn::set_learning_rate(opt_g, lr);
    nn::set_learning_rate(opt_d, lr);
    std::vector<torch::Tensor> src, tgt, beta, pose;
    for (int b = 0; b < cfg.batch; ++b) {
      int c = train[pick(rng)];
      int f = frame(rng);
      const auto& pool = by_speaker[static_cast<size_t>(data.speaker[static_cast<size_t>(c)])];
      int o = pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)];
      src.push_back(data.frames[o][frame(rng)]);
      tgt.push_back(data.frames[c][f]);
      beta.push_back(data.beta[c][f]);
      pose.push_back(data.pose[c][f]);
    }
    auto s = torch::stack(src), t = torch::stack(tgt);
    auto [rot, trans] = data::split_pose(torch::stack(pose));
    auto style = style_vector(torch::stack(beta), rot, trans);
    auto fake = m.gen->forward(s, style);

    // the discriminator ascends the GAN objective, so descend its negative
    auto d_loss = -gan_loss(m.disc->forward(t), m.disc->forward(fake.detach()));
    opt_d.zero_grad();
    d_loss.backward();
    opt_d.step();

    auto l_rec = rec_loss(t, fake).mean();
    auto l_gan = gan_generator_loss(m.disc->forward(fake));
    auto l_per = perceptual_loss(fake, t, phi, cfg.perceptual_layers, true);
    auto g_loss = cfg.w_rec * l_rec + cfg.w_gan * l_gan + cfg.w_per * l_per;
    opt_g.zero_grad();
    g_loss.backward();
    opt_g.step();

    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      log->write({{"stage", "vg"},
                  {"step", step},
                  {"L_rec", l_rec.item<double>()},
                  {"L_GAN", l_gan.item<double>()},
                  {"L_per", l_per.item<double>()},
                  {"L_D", d_loss.item<double>()},
                  {"lr", lr}});
    }
  }
  m.gen->eval();
  m.disc->eval();
  return m;
}

torch::Tensor generate_frames(Generator& gen, const torch::Tensor& src, const torch::Tensor& beta,
                              const torch::Tensor& rotation, const torch::Tensor& translation) {
  torch::NoGradGuard ng;
  gen->eval();
  const int64_t n = beta.size(0);
  auto style = style_vector(beta, rotation, translation);
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < n; i += 16) {
    int64_t k = std::min<int64_t>(16, n - i);
    out.push_back(gen->forward(src.unsqueeze(0).expand({k, -1, -1, -1}), style.narrow(0, i, k)));
  }
  return torch::cat(out);
}

FrameImage generate_frame(Generator& gen, const FrameImage& src, const face3d::ExpressionCoeffs& beta,
                          const face3d::HeadPose& pose) {
  require(src.height == gen->image_size && src.width == gen->image_size, "generate_frame: source size mismatch");
  auto b = torch::from_blob(const_cast<double*>(beta.values.data()), {1, face3d::kExpressionDim}, torch::kDouble)
               .to(torch::kFloat);
  auto p = data::poses_to_tensor({pose});
  auto [rot, trans] = data::split_pose(p);
  return from_tensor(generate_frames(gen, to_tensor(src), b, rot, trans)[0]);
}

torch::Tensor discriminate(Discriminator& disc, const FrameImage& img) {
  torch::NoGradGuard ng;
  disc->eval();
  return disc->forward(to_tensor(img).unsqueeze(0)).squeeze(0).squeeze(0);
}

Checkpoint save_generator(Generator& gen, int64_t step, const std::string& config_checksum) {
  return make_checkpoint("vg_generator", *gen, step, config_checksum,
                         {{"config", gen->cfg.to_json()}, {"image_size", gen->image_size}});
}

Generator load_generator(const Checkpoint& ckpt) {
  Generator g(VgConfig::from_json(ckpt.meta.at("config")), ckpt.meta.at("image_size").get<int>());
  restore(ckpt, *g);
  g->eval();
  return g;
}

Checkpoint save_discriminator(Discriminator& disc, int64_t step, const std::string& config_checksum) {
  int64_t width = disc->net->ptr(0)->as<torch::nn::Conv2d>()->options.out_channels();
  return make_checkpoint("vg_discriminator", *disc, step, config_checksum,
                         {{"disc_width", width}, {"image_size", disc->image_size}});
}

Discriminator load_discriminator(const Checkpoint& ckpt) {
  Discriminator d(ckpt.meta.at("disc_width").get<int64_t>(), ckpt.meta.at("image_size").get<int>());
  restore(ckpt, *d);
  d->eval();
  return d;
}

}  // namespace opt::vg
