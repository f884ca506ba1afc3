#include "opt/nn_common.hpp"

#include <sstream>

#include "opt/config_reader.hpp"
#include "opt/error.hpp"

namespace opt::nn {

void seed_everything(uint64_t seed) {
  torch::manual_seed(seed);
  torch::set_num_threads(1);
}

void LrSchedule::validate() const {
  require(initial > 0 && decayed > 0, "optimizer: learning rates must be positive");
  require(decay_step >= 0, "optimizer: decay_step must be non-negative");
}

nlohmann::json LrSchedule::to_json() const {
  return {{"lr", initial}, {"lr_decayed", decayed}, {"decay_step", decay_step}};
}

LrSchedule LrSchedule::from_json(const nlohmann::json& j) {
  LrSchedule s;
  config::KeyReader r(j, "optimizer");
  r.get("lr", s.initial);
  r.get("lr_decayed", s.decayed);
  r.get("decay_step", s.decay_step);
  r.finish();
  s.validate();
  return s;
}

void set_learning_rate(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

SqueezeExciteImpl::SqueezeExciteImpl(int64_t channels, int64_t reduction) {
  int64_t hidden = std::max<int64_t>(2, channels / reduction);
  fc1 = register_module("fc1", torch::nn::Linear(channels, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, channels));
}

torch::Tensor SqueezeExciteImpl::forward(const torch::Tensor& x) {
  auto s = x.mean({2, 3});
  s = torch::sigmoid(fc2(torch::relu(fc1(s))));
  return x * s.unsqueeze(-1).unsqueeze(-1);
}

SeResBlockImpl::SeResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t stride) {
  using namespace torch::nn;
  conv1 = register_module("conv1", Conv2d(Conv2dOptions(in_ch, out_ch, 3).stride(stride).padding(1).bias(false)));
  bn1 = register_module("bn1", BatchNorm2d(out_ch));
  conv2 = register_module("conv2", Conv2d(Conv2dOptions(out_ch, out_ch, 3).padding(1).bias(false)));
  bn2 = register_module("bn2", BatchNorm2d(out_ch));
  se = register_module("se", SqueezeExcite(out_ch));
  shortcut = Sequential();
  if (stride != 1 || in_ch != out_ch) {
    shortcut->push_back(Conv2d(Conv2dOptions(in_ch, out_ch, 1).stride(stride).bias(false)));
    shortcut->push_back(BatchNorm2d(out_ch));
  }
  shortcut = register_module("shortcut", shortcut);
}

torch::Tensor SeResBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1(conv1(x)));
  y = se(bn2(conv2(y)));
  auto skip = shortcut->is_empty() ? x : shortcut->forward(x);
  return torch::relu(y + skip);
}

SeResEncoderImpl::SeResEncoderImpl(int64_t in_ch, const std::vector<int64_t>& widths, int64_t out_dim) {
  require(!widths.empty(), "encoder: at least one stage required");
  using namespace torch::nn;
  stem = register_module("stem", Conv2d(Conv2dOptions(in_ch, widths[0], 3).padding(1).bias(false)));
  stem_bn = register_module("stem_bn", BatchNorm2d(widths[0]));
  stages = Sequential();
  int64_t prev = widths[0];
  for (int64_t w : widths) {
    stages->push_back(SeResBlock(prev, w, 2));
    prev = w;
  }
  stages = register_module("stages", stages);
  head = register_module("head", Linear(prev, out_dim));
}

torch::Tensor SeResEncoderImpl::forward(torch::Tensor x) {
  x = torch::relu(stem_bn(stem(x)));
  x = stages->forward(x);
  return head(x.mean({2, 3}));
}

std::string module_bytes(torch::nn::Module& m) {
  torch::serialize::OutputArchive archive;
  m.save(archive);
  std::ostringstream out;
  archive.save_to(out);
  return out.str();
}

void load_module_bytes(torch::nn::Module& m, const std::string& bytes) {
  torch::serialize::InputArchive archive;
  std::istringstream in(bytes);
  archive.load_from(in);
  m.load(archive);
}

int64_t parameter_count(torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

JsonlLog::JsonlLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw IoError("cannot open log " + path.string());
}

void JsonlLog::write(const nlohmann::json& record) {
  if (!out_.is_open()) return;
  out_ << record.dump() << '\n';
  out_.flush();
}

torch::Tensor colour_jitter(const torch::Tensor& images, std::mt19937_64& rng, double gain, double offset) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int64_t b = images.size(0);
  std::vector<float> g(static_cast<size_t>(b * 3)), o(static_cast<size_t>(b * 3));
  for (size_t i = 0; i < g.size(); ++i) {
    g[i] = static_cast<float>(1.0 + gain * u(rng));
    o[i] = static_cast<float>(offset * u(rng));
  }
  auto gt = torch::from_blob(g.data(), {b, 3, 1, 1}).clone();
  auto ot = torch::from_blob(o.data(), {b, 3, 1, 1}).clone();
  return (images * gt + ot).clamp(0.0, 1.0);
}

}  // namespace opt::nn
