#include <cmath>
#include <random>

#include <doctest.h>

#include "opt/error.hpp"
#include "opt/nn_common.hpp"
#include "opt/videogen.hpp"

using namespace opt;
using namespace opt::vg;

namespace {

std::vector<torch::Tensor> identity_extractor(const torch::Tensor& x) { return {x}; }

bool same_params(torch::nn::Module& a, torch::nn::Module& b) {
  auto pa = a.parameters(), pb = b.parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    if (!torch::equal(pa[i], pb[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("adain with unit scale and zero shift standardizes each channel") {
  torch::manual_seed(1);
  auto x = torch::randn({2, 3, 8, 8}, torch::kDouble) * 3.0 + 1.5;
  auto y = adain_inject(x, torch::ones({2, 3}, torch::kDouble), torch::zeros({2, 3}, torch::kDouble));
  auto mean = y.mean({2, 3});
  auto var = (y - y.mean({2, 3}, true)).pow(2).mean({2, 3});
  CHECK(mean.abs().max().item<double>() < 1e-5);
  CHECK((var - 1.0).abs().max().item<double>() < 1e-5);
}

TEST_CASE("adain on a spatially constant channel outputs delta") {
  auto x = torch::full({1, 2, 4, 4}, 3.0, torch::kDouble);
  auto gamma = torch::tensor({{2.0, -1.0}}, torch::kDouble);
  auto delta = torch::tensor({{0.25, -0.5}}, torch::kDouble);
  auto y = adain_inject(x, gamma, delta);
  CHECK(torch::isfinite(y).all().item<bool>());
  CHECK((y[0][0] - 0.25).abs().max().item<double>() < 1e-12);
  CHECK((y[0][1] + 0.5).abs().max().item<double>() < 1e-12);
}

TEST_CASE("adain output moments equal delta and |gamma| on random inputs") {
  torch::manual_seed(2);
  auto x = torch::randn({3, 5, 16, 16}, torch::kDouble) * 2.0 - 0.7;
  auto gamma = torch::randn({3, 5}, torch::kDouble);
  auto delta = torch::randn({3, 5}, torch::kDouble);
  auto y = adain_inject(x, gamma, delta);
  auto mean = y.mean({2, 3});
  auto std = (y - y.mean({2, 3}, true)).pow(2).mean({2, 3}).sqrt();
  CHECK((mean - delta).abs().max().item<double>() < 1e-4);
  CHECK((std - gamma.abs()).abs().max().item<double>() < 1e-4);
  CHECK_THROWS_AS(adain_inject(x, gamma.narrow(1, 0, 4), delta.narrow(1, 0, 4)), ValidationError);
}

TEST_CASE("patch discriminator maps 64x64 to a 6x6 grid in (0,1), deterministically") {
  torch::manual_seed(0);
  Discriminator d(16, 64);
  d->eval();
  auto img = torch::rand({2, 3, 64, 64});
  auto a = d->forward(img), b = d->forward(img);
  CHECK(a.sizes() == torch::IntArrayRef({2, 1, 6, 6}));
  CHECK(torch::equal(a, b));
  CHECK(a.gt(0).all().item<bool>());
  CHECK(a.lt(1).all().item<bool>());
  CHECK_THROWS_AS(d->forward(torch::rand({1, 3, 32, 32})), ValidationError);
}

TEST_CASE("generator preserves shape, stays in [0,1] and is deterministic") {
  torch::manual_seed(0);
  VgConfig cfg;
  cfg.widths = {8, 8, 16};
  cfg.res_blocks = 2;
  Generator g(cfg, 32);
  g->eval();
  auto src = torch::rand({2, 3, 32, 32});
  auto style = torch::randn({2, kStyleDim});
  auto a = g->forward(src, style), b = g->forward(src, style);
  CHECK(a.sizes() == src.sizes());
  CHECK(torch::equal(a, b));
  CHECK(a.min().item<float>() >= 0.0F);
  CHECK(a.max().item<float>() <= 1.0F);
  CHECK_THROWS_AS(g->forward(src, torch::randn({2, kStyleDim - 1})), ValidationError);
}

TEST_CASE("style vector packs beta, two rotation columns and translation") {
  auto beta = torch::arange(64, torch::kFloat).unsqueeze(0);
  auto rot = torch::tensor({1.f, 2.f, 3.f, 4.f, 5.f, 6.f, 7.f, 8.f, 9.f}).view({1, 3, 3});
  auto trans = torch::tensor({{0.1f, 0.2f, 0.3f}});
  auto s = style_vector(beta, rot, trans);
  CHECK(s.size(1) == kStyleDim);
  auto tail = s[0].narrow(0, 64, 9);
  auto expected = torch::tensor({1.f, 4.f, 7.f, 2.f, 5.f, 8.f, 0.1f, 0.2f, 0.3f});
  CHECK(torch::allclose(tail, expected));
}

TEST_CASE("rec_loss hand value, identity and symmetry") {
  auto a = torch::tensor({0.3, 0.0, 0.4}, torch::kDouble).view({1, 3, 1, 1});
  auto b = torch::zeros({1, 3, 1, 1}, torch::kDouble);
  CHECK(rec_loss(a, b).item<double>() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(rec_loss(a, b).item<double>() - 0.5) < 1e-8);
  CHECK(rec_loss(a, a).item<double>() == 0.0);
  auto x = torch::rand({4, 3, 5, 5}, torch::kDouble), y = torch::rand({4, 3, 5, 5}, torch::kDouble);
  CHECK(torch::equal(rec_loss(x, y), rec_loss(y, x)));
}

TEST_CASE("gan_loss hand value, limit and permutation invariance") {
  auto half = torch::full({2, 1, 6, 6}, 0.5, torch::kDouble);
  CHECK(std::abs(gan_loss(half, half).item<double>() - 2.0 * std::log(0.5)) < 1e-8);
  auto real = torch::full({1, 1, 6, 6}, 1.0 - 1e-7, torch::kDouble);
  auto fake = torch::full({1, 1, 6, 6}, 1e-7, torch::kDouble);
  CHECK(std::abs(gan_loss(real, fake).item<double>()) < 1e-6);
  auto zero = torch::zeros({1, 1, 6, 6}, torch::kDouble);
  CHECK(std::isfinite(gan_loss(zero, torch::ones({1, 1, 6, 6}, torch::kDouble)).item<double>()));

  torch::manual_seed(4);
  auto r = torch::rand({2, 1, 6, 6}, torch::kDouble), f = torch::rand({2, 1, 6, 6}, torch::kDouble);
  auto perm = torch::randperm(36);
  auto rp = r.view({2, 1, 36}).index_select(2, perm).view({2, 1, 6, 6});
  auto fp = f.view({2, 1, 36}).index_select(2, perm).view({2, 1, 6, 6});
  CHECK(gan_loss(r, f).item<double>() == doctest::Approx(gan_loss(rp, fp).item<double>()).epsilon(1e-12));
}

TEST_CASE("perceptual loss with an identity extractor equals pixel L1") {
  torch::manual_seed(5);
  auto a = torch::rand({2, 3, 4, 4}, torch::kDouble), b = torch::rand({2, 3, 4, 4}, torch::kDouble);
  double direct = 0.0;
  auto ad = a.contiguous(), bd = b.contiguous();
  for (int64_t i = 0; i < a.numel(); ++i) direct += std::abs(ad.data_ptr<double>()[i] - bd.data_ptr<double>()[i]);
  CHECK(std::abs(perceptual_loss(a, b, identity_extractor, {1}).item<double>() - direct) < 1e-8);
  CHECK(perceptual_loss(a, a, identity_extractor, {1}).item<double>() == 0.0);
  CHECK_THROWS_AS(perceptual_loss(a, b, identity_extractor, {2}), ValidationError);
}

TEST_CASE("perceptual pyramid is frozen, seeded and non-negative in loss") {
  torch::manual_seed(11);
  PerceptualNet p1(std::vector<int64_t>{4, 4, 8, 8, 8}, 99);
  torch::manual_seed(12);
  PerceptualNet p2(std::vector<int64_t>{4, 4, 8, 8, 8}, 99);
  CHECK(same_params(*p1, *p2));
  for (auto& p : p1->parameters()) CHECK_FALSE(p.requires_grad());
  auto x = torch::rand({1, 3, 32, 32});
  auto feats = p1->forward(x);
  CHECK(feats.size() == 5);
  CHECK(feats[4].size(2) == 1);
  FeatureExtractor phi = [&](const torch::Tensor& t) { return p1->forward(t); };
  for (int i = 0; i < 5; ++i) {
    auto y = torch::rand({1, 3, 32, 32});
    CHECK(perceptual_loss(x, y, phi, {1, 2, 3}).item<float>() >= 0.0F);
  }
  // The global generator state is untouched by building the pyramid.
  torch::manual_seed(12);
  auto expect = torch::rand({3});
  torch::manual_seed(12);
  PerceptualNet p3(std::vector<int64_t>{4, 4, 8, 8, 8}, 5);
  CHECK(torch::equal(torch::rand({3}), expect));
}

TEST_CASE("a discriminator-only step leaves the generator unchanged") {
  torch::manual_seed(0);
  VgConfig cfg;
  cfg.widths = {8, 8, 16};
  cfg.res_blocks = 1;
  Generator g(cfg, 64);
  Discriminator d(8, 64);
  auto before = nn::module_bytes(*g);
  torch::optim::Adam opt_d(d->parameters(), torch::optim::AdamOptions(1e-3));
  auto fake = g->forward(torch::rand({2, 3, 64, 64}), torch::randn({2, kStyleDim}));
  auto loss = -gan_loss(d->forward(torch::rand({2, 3, 64, 64})), d->forward(fake.detach()));
  opt_d.zero_grad();
  loss.backward();
  opt_d.step();
  CHECK(nn::module_bytes(*g) == before);
}

TEST_CASE("generator checkpoint round trip") {
  torch::manual_seed(0);
  VgConfig cfg;
  cfg.widths = {8, 8, 16};
  cfg.res_blocks = 1;
  Generator g(cfg, 32);
  auto ck = save_generator(g, 7, "abc");
  auto back = load_generator(ck);
  CHECK(same_params(*g, *back));
  CHECK(back->cfg.to_json() == cfg.to_json());
  CHECK(ck.step == 7);
}

TEST_CASE("vg config rejects unknown keys and bad values") {
  auto j = VgConfig{}.to_json();
  CHECK(VgConfig::from_json(j).to_json() == j);
  auto bad = j;
  bad["typo"] = 1;
  CHECK_THROWS_AS(VgConfig::from_json(bad), ValidationError);
  bad = j;
  bad["widths"] = {8, 16};
  CHECK_THROWS_AS(VgConfig::from_json(bad), ValidationError);
}
