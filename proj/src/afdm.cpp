#include "opt/afdm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "opt/config_reader.hpp"
#include "opt/error.hpp"

namespace opt::afdm {

void AfdmConfig::validate() const {
  require(context >= 1 && context % 2 == 1, "afdm.context must be a positive odd number");
  require(content_dim > 0 && identity_dim > 0, "afdm: feature dimensions must be positive");
  require(!widths.empty() && widths.size() <= 4, "afdm.widths must list 1 to 4 stage widths");
  for (auto w : widths) require(w > 0, "afdm.widths must be positive");
  require(w_con >= 0 && w_cls >= 0 && w_neg >= 0 && neg_margin >= 0, "afdm: loss weights must be non-negative");
  require(steps >= 0 && batch >= 1 && log_every >= 1, "afdm: steps >= 0, batch >= 1, log_every >= 1");
}

nlohmann::json AfdmConfig::to_json() const {
  return {{"context", context}, {"content_dim", content_dim}, {"identity_dim", identity_dim},
          {"widths", widths},   {"w_con", w_con},             {"w_cls", w_cls},
          {"w_neg", w_neg},     {"neg_margin", neg_margin},   {"steps", steps},
          {"batch", batch},     {"log_every", log_every}};
}

AfdmConfig AfdmConfig::from_json(const nlohmann::json& j) {
  AfdmConfig c;
  config::KeyReader r(j, "afdm");
  r.get("context", c.context);
  r.get("content_dim", c.content_dim);
  r.get("identity_dim", c.identity_dim);
  r.get("widths", c.widths);
  r.get("w_con", c.w_con);
  r.get("w_cls", c.w_cls);
  r.get("w_neg", c.w_neg);
  r.get("neg_margin", c.neg_margin);
  r.get("steps", c.steps);
  r.get("batch", c.batch);
  r.get("log_every", c.log_every);
  r.finish();
  c.validate();
  return c;
}

AfdmImpl::AfdmImpl(const AfdmConfig& c, int n) : cfg(c), n_speakers(n) {
  require(n >= 2, "afdm: at least 2 speakers are required for the identity loss");
  e_con = register_module("e_con", nn::SeResEncoder(1, cfg.widths, cfg.content_dim));
  e_id = register_module("e_id", nn::SeResEncoder(1, cfg.widths, cfg.identity_dim));
  classifier = register_module("classifier", torch::nn::Linear(cfg.identity_dim, n));
}

torch::Tensor AfdmImpl::content(const torch::Tensor& windows) {
  require(windows.dim() == 4 && windows.size(1) == 1 && windows.size(2) == audio::kMelBins &&
              windows.size(3) == audio::kChunkHops * cfg.context,
          "afdm: expected windows of shape [B,1,16," + std::to_string(audio::kChunkHops * cfg.context) + "]");
  return e_con(windows);
}

std::pair<torch::Tensor, torch::Tensor> AfdmImpl::identity(const torch::Tensor& windows) {
  require(windows.dim() == 4 && windows.size(3) == audio::kChunkHops * cfg.context, "afdm: bad window shape");
  auto emb = e_id(windows);
  return {emb, classifier(torch::relu(emb))};
}

torch::Tensor content_loss(const torch::Tensor& a, const torch::Tensor& b) {
  require(a.sizes() == b.sizes(), "content_loss: dimension mismatch");
  return (a - b).abs().sum(-1);
}

torch::Tensor identity_loss(const torch::Tensor& q, const torch::Tensor& labels) {
  require(q.dim() == 2 && labels.dim() == 1 && q.size(0) == labels.size(0), "identity_loss: shape mismatch");
  auto picked = q.gather(1, labels.unsqueeze(1)).squeeze(1);
  return -torch::log(picked.clamp_min(kProbabilityFloor));
}

torch::Tensor identity_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& labels) {
  auto nll = -torch::log_softmax(logits, 1).gather(1, labels.unsqueeze(1)).squeeze(1);
  return nll.clamp_max(-std::log(kProbabilityFloor));
}

double content_loss(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "content_loss: dimension mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

double identity_loss(const std::vector<double>& q, int label) {
  require(label >= 0 && static_cast<size_t>(label) < q.size(), "identity_loss: label out of range");
  double total = 0.0;
  for (double v : q) {
    require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "identity_loss: probabilities must lie in [0,1]");
    total += v;
  }
  require(std::abs(total - 1.0) <= 1e-6, "identity_loss: probabilities must sum to 1");
  return -std::log(std::max(q[static_cast<size_t>(label)], kProbabilityFloor));
}

Afdm train_afdm(const data::CorpusData& data, const AfdmConfig& cfg, const nn::LrSchedule& schedule, uint64_t seed,
                nn::JsonlLog* log) {
  cfg.validate();
  require(data.n_speakers >= 2, "afdm: at least 2 speakers are required for the identity loss");
  nn::seed_everything(seed);
  Afdm model(cfg, data.n_speakers);
  model->train();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(schedule.at(0)));

  const auto train = data.clips(false);
  std::vector<std::vector<int>> partners(static_cast<size_t>(data.clip_count()));
  bool any_pair = false;
  for (int c : train) {
    for (int o : train) {
      auto ci = static_cast<size_t>(c), oi = static_cast<size_t>(o);
      if (data.word[ci] == data.word[oi] && data.take[ci] == data.take[oi] && data.speaker[ci] != data.speaker[oi])
        partners[ci].push_back(o);
    }
    any_pair |= !partners[static_cast<size_t>(c)].empty();
  }
  if (!any_pair) throw ValidationError("afdm: corpus has no same-content cross-speaker pair");
  std::vector<int> anchors;
  for (int c : train)
    if (!partners[static_cast<size_t>(c)].empty()) anchors.push_back(c);

  std::mt19937_64 rng(seed * 7919 + 17);
  const int T = data.frames_per_clip;
  std::uniform_int_distribution<int> pick_frame(0, T - 1);
  std::uniform_int_distribution<size_t> pick_anchor(0, anchors.size() - 1);
  std::uniform_int_distribution<size_t> pick_train(0, train.size() - 1);

  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = schedule.at(step);
    nn::set_learning_rate(opt, lr);
    std::vector<std::pair<int, int>> a, p, n;
    std::vector<int64_t> la, lp;
    for (int b = 0; b < cfg.batch; ++b) {
      int c = anchors[pick_anchor(rng)];
      int f = pick_frame(rng);
      const auto& ps = partners[static_cast<size_t>(c)];
      int cp = ps[std::uniform_int_distribution<size_t>(0, ps.size() - 1)(rng)];
      // negative: a different word, or the same clip at least 4 frames away
      int cn = c, fn = f;
      if (rng() % 2 == 0 || T < 9) {
        do cn = train[pick_train(rng)];
        while (data.word[static_cast<size_t>(cn)] == data.word[static_cast<size_t>(c)] && data.n_words > 1);
        fn = pick_frame(rng);
      } else {
        do fn = pick_frame(rng);
        while (std::abs(fn - f) < 4);
      }
      a.emplace_back(c, f);
      p.emplace_back(cp, f);
      n.emplace_back(cn, fn);
      la.push_back(data.speaker[static_cast<size_t>(c)]);
      lp.push_back(data.speaker[static_cast<size_t>(cp)]);
    }
    auto wa = data::mel_windows(data.mel, a, cfg.context);
    auto wp = data::mel_windows(data.mel, p, cfg.context);
    auto wn = data::mel_windows(data.mel, n, cfg.context);
    auto feats = model->content(torch::cat({wa, wp, wn})).chunk(3);
    auto l_con = content_loss(feats[0], feats[1]).mean();
    auto l_neg = torch::relu(cfg.neg_margin - content_loss(feats[0], feats[2])).mean();
    auto [emb, logits] = model->identity(torch::cat({wa, wp}));
    auto labels = torch::cat({torch::tensor(la, torch::kLong), torch::tensor(lp, torch::kLong)});
    auto l_cls = identity_loss_from_logits(logits, labels).mean();
    auto loss = cfg.w_con * l_con + cfg.w_cls * l_cls + cfg.w_neg * l_neg;
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      log->write({{"stage", "afdm"},
                  {"step", step},
                  {"L_con", l_con.item<double>()},
                  {"L_cls", l_cls.item<double>()},
                  {"L_neg", l_neg.item<double>()},
                  {"lr", lr}});
    }
  }
  model->eval();
  return model;
}

torch::Tensor content_features(Afdm& model, const torch::Tensor& mel_clip) {
  torch::NoGradGuard ng;
  model->eval();
  std::vector<int> frames(static_cast<size_t>(mel_clip.size(0)));
  std::iota(frames.begin(), frames.end(), 0);
  return model->content(data::mel_windows(mel_clip, frames, model->cfg.context));
}

double auc_lower_is_positive(std::vector<double> pos, std::vector<double> neg) {
  require(!pos.empty() && !neg.empty(), "auc: both classes need samples");
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  // For each positive, count negatives strictly greater and equal.
  double wins = 0.0;
  size_t lo = 0, hi = 0;
  for (double v : pos) {
    while (lo < neg.size() && neg[lo] < v) ++lo;
    hi = std::max(hi, lo);
    while (hi < neg.size() && neg[hi] <= v) ++hi;
    wins += static_cast<double>(neg.size() - hi) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

nlohmann::json AfdmReport::to_json() const {
  return {{"identity_accuracy", identity_accuracy},
          {"content_auc", content_auc},
          {"windows", windows},
          {"same_pairs", same_pairs},
          {"diff_pairs", diff_pairs}};
}

AfdmReport evaluate_afdm(Afdm& model, const data::CorpusData& data) {
  torch::NoGradGuard ng;
  model->eval();
  auto test = data.clips(true);
  if (test.empty()) test = data.clips(false);
  const int T = data.frames_per_clip;
  std::vector<int> frames(static_cast<size_t>(T));
  std::iota(frames.begin(), frames.end(), 0);

  AfdmReport rep;
  std::vector<torch::Tensor> feats(static_cast<size_t>(data.clip_count()));
  int64_t correct = 0;
  for (int c : test) {
    auto w = data::mel_windows(data.mel[c], frames, model->cfg.context);
    feats[static_cast<size_t>(c)] = model->content(w);
    auto logits = model->identity(w).second;
    correct += (logits.argmax(1) == data.speaker[static_cast<size_t>(c)]).sum().item<int64_t>();
    rep.windows += T;
  }
  rep.identity_accuracy = static_cast<double>(correct) / rep.windows;

  std::vector<double> same, diff;
  for (int c : test) {
    for (int o : test) {
      auto ci = static_cast<size_t>(c), oi = static_cast<size_t>(o);
      if (data.speaker[ci] == data.speaker[oi] || data.take[ci] != data.take[oi]) continue;
      auto d = (feats[ci] - feats[oi]).abs().sum(1);  // per frame
      auto acc = d.accessor<float, 1>();
      auto& bucket = data.word[ci] == data.word[oi] ? same : diff;
      for (int f = 0; f < T; ++f) bucket.push_back(acc[f]);
    }
  }
  rep.same_pairs = static_cast<int64_t>(same.size());
  rep.diff_pairs = static_cast<int64_t>(diff.size());
  rep.content_auc = same.empty() || diff.empty() ? 0.0 : auc_lower_is_positive(same, diff);
  return rep;
}

Checkpoint save_afdm(Afdm& model, int64_t step, const std::string& config_checksum) {
  nlohmann::json meta = {{"config", model->cfg.to_json()}, {"n_speakers", model->n_speakers}};
  return make_checkpoint("afdm", *model, step, config_checksum, meta);
}

Afdm load_afdm(const Checkpoint& ckpt) {
  auto cfg = AfdmConfig::from_json(ckpt.meta.at("config"));
  Afdm model(cfg, ckpt.meta.at("n_speakers").get<int>());
  restore(ckpt, *model);
  model->eval();
  return model;
}

}  // namespace opt::afdm
