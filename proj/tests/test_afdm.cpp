#include <cmath>
#include <fstream>
#include <random>

#include <doctest.h>

#include "opt/afdm.hpp"
#include "opt/error.hpp"
#include "test_support.hpp"

using namespace opt;
using namespace opt::afdm;

TEST_CASE("content_loss hand value, identity and symmetry") {
  CHECK(std::abs(content_loss(std::vector<double>{1, 2}, std::vector<double>{0, 0}) - 3.0) < 1e-8);
  CHECK(content_loss(std::vector<double>{0.5, -1}, std::vector<double>{0.5, -1}) == 0.0);
  std::vector<double> a{0.3, -2.0, 7.5}, b{-1.0, 4.0, 0.25};
  CHECK(content_loss(a, b) == content_loss(b, a));
  CHECK_THROWS_AS(content_loss(std::vector<double>{1}, std::vector<double>{1, 2}), ValidationError);

  auto ta = torch::tensor({{1.0, 2.0}, {0.5, 0.5}}, torch::kDouble);
  auto tb = torch::tensor({{0.0, 0.0}, {0.5, 0.5}}, torch::kDouble);
  auto l = content_loss(ta, tb);
  CHECK(std::abs(l[0].item<double>() - 3.0) < 1e-8);
  CHECK(l[1].item<double>() == 0.0);
}

TEST_CASE("identity_loss hand values and probability floor") {
  CHECK(identity_loss(std::vector<double>{0, 1, 0, 0}, 1) == 0.0);
  CHECK(std::abs(identity_loss(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 2) - std::log(4.0)) < 1e-8);
  double floored = identity_loss(std::vector<double>{1, 0}, 1);
  CHECK(std::isfinite(floored));
  CHECK(std::abs(floored + std::log(1e-12)) < 1e-8);
  CHECK_THROWS_AS(identity_loss(std::vector<double>{0.5, 0.4}, 0), ValidationError);
  CHECK_THROWS_AS(identity_loss(std::vector<double>{0.5, 0.5}, 2), ValidationError);

  auto q = torch::tensor({{0.25, 0.25, 0.25, 0.25}, {0.0, 1.0, 0.0, 0.0}, {1.0, 0.0, 0.0, 0.0}}, torch::kDouble);
  auto l = identity_loss(q, torch::tensor({0, 1, 3}, torch::kLong));
  CHECK(std::abs(l[0].item<double>() - std::log(4.0)) < 1e-8);
  CHECK(l[1].item<double>() == 0.0);
  CHECK(std::abs(l[2].item<double>() + std::log(1e-12)) < 1e-8);
}

TEST_CASE("identity loss from logits equals the probability form") {
  torch::manual_seed(3);
  auto logits = torch::randn({6, 5}, torch::kDouble) * 3.0;
  auto labels = torch::randint(0, 5, {6}, torch::kLong);
  auto a = identity_loss_from_logits(logits, labels);
  auto b = identity_loss(torch::softmax(logits, 1), labels);
  CHECK(torch::allclose(a, b, 1e-10, 1e-12));
  // Extreme logits stay finite and match the floor.
  auto extreme = torch::tensor({{0.0, 200.0}}, torch::kDouble);
  CHECK(std::abs(identity_loss_from_logits(extreme, torch::tensor({0}, torch::kLong)).item<double>() +
                 std::log(1e-12)) < 1e-8);
}

TEST_CASE("loss gradients match central finite differences") {
  torch::manual_seed(8);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = torch::randn({7}, torch::kDouble).requires_grad_(true);
    auto b = torch::randn({7}, torch::kDouble);
    auto logits = torch::randn({1, 4}, torch::kDouble).requires_grad_(true);
    auto label = torch::tensor({static_cast<int64_t>(rng() % 4)}, torch::kLong);
    auto f = [&](const torch::Tensor& x, const torch::Tensor& z) {
      return content_loss(x, b) + identity_loss_from_logits(z, label).sum();
    };
    auto val = f(a, logits);
    val.backward();
    const double h = 1e-6;
    for (int i = 0; i < 7; ++i) {
      auto e = torch::zeros({7}, torch::kDouble);
      e[i] = h;
      torch::NoGradGuard ng;
      double fd = (f(a + e, logits) - f(a - e, logits)).item<double>() / (2 * h);
      double an = a.grad()[i].item<double>();
      CHECK(std::abs(fd - an) <= 1e-4 * std::max(1.0, std::abs(an)));
    }
    for (int i = 0; i < 4; ++i) {
      auto e = torch::zeros({1, 4}, torch::kDouble);
      e[0][i] = h;
      torch::NoGradGuard ng;
      double fd = (f(a, logits + e) - f(a, logits - e)).item<double>() / (2 * h);
      double an = logits.grad()[0][i].item<double>();
      CHECK(std::abs(fd - an) <= 1e-4 * std::max(1.0, std::abs(an)));
    }
  }
}

TEST_CASE("auc counts ties as half") {
  CHECK(auc_lower_is_positive({0.1, 0.2}, {0.3, 0.4}) == 1.0);
  CHECK(auc_lower_is_positive({0.5}, {0.5}) == 0.5);
  CHECK(auc_lower_is_positive({0.3, 0.6}, {0.4}) == 0.5);
  CHECK_THROWS_AS(auc_lower_is_positive({}, {1.0}), ValidationError);
}

TEST_CASE("encoders are deterministic and have the configured shapes") {
  torch::manual_seed(0);
  AfdmConfig cfg;
  Afdm m(cfg, 8);
  m->eval();
  auto w = torch::randn({3, 1, 16, 16 * cfg.context});
  auto c1 = m->content(w), c2 = m->content(w);
  CHECK(c1.sizes() == torch::IntArrayRef({3, cfg.content_dim}));
  CHECK(torch::equal(c1, c2));
  auto [emb, logits] = m->identity(w);
  CHECK(emb.size(1) == cfg.identity_dim);
  CHECK(logits.sizes() == torch::IntArrayRef({3, 8}));
  CHECK(torch::equal(logits, m->identity(w).second));
}

TEST_CASE("afdm config validation and round trip") {
  AfdmConfig cfg;
  CHECK(AfdmConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  auto j = cfg.to_json();
  j["unknown"] = true;
  CHECK_THROWS_AS(AfdmConfig::from_json(j), ValidationError);
  j = cfg.to_json();
  j["context"] = 0;
  CHECK_THROWS_AS(AfdmConfig::from_json(j), ValidationError);
}

TEST_CASE("short training run: finite logged losses, lr logged, checkpoint round trip") {
  auto data = data::load_corpus_data(testing::tiny_corpus(), false);
  AfdmConfig cfg;
  cfg.steps = 12;
  cfg.batch = 8;
  cfg.log_every = 1;
  nn::LrSchedule sched;
  sched.decay_step = 6;
  testing::TempDir dir("opt_test_afdm");
  {
    nn::JsonlLog log(dir.path / "log.jsonl");
    auto model = train_afdm(data, cfg, sched, 1, &log);
    auto ck = save_afdm(model, cfg.steps, "x");
    ck.save(dir.path / "afdm.ckpt");
    auto back = load_afdm(Checkpoint::load(dir.path / "afdm.ckpt", "afdm", kCheckpointVersion));
    auto w = data::mel_windows(data.mel[0], {0, 5, 10}, cfg.context);
    CHECK(torch::equal(model->content(w), back->content(w)));
    auto rep = evaluate_afdm(back, data);
    CHECK(rep.windows > 0);
    CHECK(rep.identity_accuracy >= 0.0);
    CHECK(rep.identity_accuracy <= 1.0);
  }
  std::ifstream f(dir.path / "log.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"L_con", "L_cls", "L_neg"}) CHECK(std::isfinite(j.at(k).get<double>()));
    const int step = j.at("step").get<int>();
    CHECK(j.at("lr").get<double>() == (step < 6 ? 1e-4 : 2e-5));
    ++n;
  }
  CHECK(n == cfg.steps);

  auto one = data;
  one.n_speakers = 1;
  CHECK_THROWS_AS(train_afdm(one, cfg, sched, 1, nullptr), ValidationError);
}

TEST_CASE("same seed gives identical training results") {
  auto data = data::load_corpus_data(testing::tiny_corpus(), false);
  AfdmConfig cfg;
  cfg.steps = 3;
  cfg.batch = 4;
  auto a = train_afdm(data, cfg, {}, 9, nullptr);
  auto b = train_afdm(data, cfg, {}, 9, nullptr);
  CHECK(nn::module_bytes(*a) == nn::module_bytes(*b));
}
