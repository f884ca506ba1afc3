#include <cmath>
#include <random>

#include <doctest.h>

#include "opt/aem.hpp"
#include "opt/error.hpp"
#include "test_support.hpp"

using namespace opt;
using namespace opt::aem;

namespace {

face3d::HeadPose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  return face3d::HeadPose::from_euler(u(rng), u(rng), 0.3 * u(rng), face3d::Vec3(0.1 * u(rng), 0.1 * u(rng), 0.0));
}

Eigen::VectorXd random_vec(std::mt19937_64& rng, int n, double s) {
  std::uniform_real_distribution<double> u(-s, s);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

torch::Tensor to_row(const Eigen::VectorXd& v) {
  auto t = torch::empty({1, v.size()}, torch::kDouble);
  for (Eigen::Index i = 0; i < v.size(); ++i) t[0][i] = v(i);
  return t;
}

torch::Tensor pose_rot(const face3d::HeadPose& p) {
  auto t = torch::empty({1, 3, 3}, torch::kDouble);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[0][i][j] = p.rotation(i, j);
  return t;
}

torch::Tensor pose_trans(const face3d::HeadPose& p) {
  return torch::tensor({p.translation.x(), p.translation.y(), p.translation.z()}, torch::kDouble).unsqueeze(0);
}

torch::Tensor points_tensor(const face3d::Landmarks2D& l) {
  auto t = torch::empty({1, l.count(), 2}, torch::kDouble);
  for (int k = 0; k < l.count(); ++k) {
    t[0][k][0] = l.points(k, 0);
    t[0][k][1] = l.points(k, 1);
  }
  return t;
}

struct Fixture {
  face3d::MorphableBasis basis = face3d::make_synthetic_basis();
  face3d::Camera camera = face3d::Camera::for_image(64);
  LandmarkModel lm = LandmarkModel::from_basis(basis, camera, torch::kDouble);
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "batched landmark projection and loss agree with the face3d kernel") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    face3d::IdentityCoeffs a;
    face3d::ExpressionCoeffs b;
    a.values = random_vec(rng, face3d::kIdentityDim, 1.5);
    b.values = random_vec(rng, face3d::kExpressionDim, 1.5);
    auto pose = random_pose(rng);
    auto ref = face3d::render_landmarks(basis, a, b, pose, camera);
    auto pts = lm.project(to_row(a.values), to_row(b.values), pose_rot(pose), pose_trans(pose));
    CHECK((pts - points_tensor(ref)).abs().max().item<double>() < 1e-9);

    face3d::ExpressionCoeffs b2;
    b2.values = random_vec(rng, face3d::kExpressionDim, 1.5);
    auto other = face3d::render_landmarks(basis, a, b2, pose, camera);
    double expected = face3d::landmark_loss(ref, other, basis.landmark_weights);
    CHECK(std::abs(lm.loss(pts, points_tensor(other)).item<double>() - expected) < 1e-8 * std::max(1.0, expected));
  }
}

TEST_CASE_FIXTURE(Fixture, "aem_loss identity case, pure-L1 limit and single-coefficient hand value") {
  std::mt19937_64 rng(2);
  face3d::IdentityCoeffs a;
  a.values = random_vec(rng, face3d::kIdentityDim, 1.0);
  face3d::ExpressionCoeffs gt;
  gt.values = random_vec(rng, face3d::kExpressionDim, 1.0);
  auto pose = random_pose(rng);
  auto gt_lm = face3d::render_landmarks(basis, a, gt, pose, camera);

  auto zero = aem_loss(to_row(gt.values), to_row(gt.values), points_tensor(gt_lm), to_row(a.values), pose_rot(pose),
                       pose_trans(pose), lm, 0.01);
  CHECK(zero.total.item<double>() < 1e-12);
  CHECK(zero.ldmk.item<double>() < 1e-12);

  face3d::ExpressionCoeffs pred = gt;
  pred.values(0) += 0.5;
  auto t = aem_loss(to_row(pred.values), to_row(gt.values), points_tensor(gt_lm), to_row(a.values), pose_rot(pose),
                    pose_trans(pose), lm, 0.01);
  CHECK(std::abs(t.l1.item<double>() - 0.5) < 1e-8);
  const double oracle =
      face3d::landmark_loss(face3d::render_landmarks(basis, a, pred, pose, camera), gt_lm, basis.landmark_weights);
  CHECK(std::abs(t.ldmk.item<double>() - oracle) < 1e-8 * std::max(1.0, oracle));
  CHECK(std::abs(t.total.item<double>() - (0.5 + 0.01 * oracle)) < 1e-8);
  const double ref = aem_loss_reference({pred}, {gt}, {gt_lm}, basis, a, {pose}, camera, 0.01);
  CHECK(std::abs(t.total.item<double>() - ref) < 1e-8);

  auto l1_only = aem_loss(to_row(pred.values), to_row(gt.values), points_tensor(gt_lm), to_row(a.values),
                          pose_rot(pose), pose_trans(pose), lm, 0.0);
  CHECK(l1_only.total.item<double>() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE_FIXTURE(Fixture, "aem_loss gradient matches central finite differences at 20 random points") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    face3d::IdentityCoeffs a;
    a.values = random_vec(rng, face3d::kIdentityDim, 1.0);
    face3d::ExpressionCoeffs gt;
    gt.values = random_vec(rng, face3d::kExpressionDim, 1.0);
    auto pose = random_pose(rng);
    auto gt_lm = points_tensor(face3d::render_landmarks(basis, a, gt, pose, camera));
    // Keep every coordinate away from the L1 kink so central differences are valid.
    Eigen::VectorXd off = random_vec(rng, face3d::kExpressionDim, 0.5);
    for (Eigen::Index i = 0; i < off.size(); ++i) off(i) += off(i) >= 0 ? 0.05 : -0.05;
    auto pred = to_row(gt.values + off).requires_grad_(true);
    auto f = [&](const torch::Tensor& p) {
      return aem_loss(p, to_row(gt.values), gt_lm, to_row(a.values), pose_rot(pose), pose_trans(pose), lm, 0.01).total;
    };
    f(pred).backward();
    auto grad = pred.grad();
    const double h = 1e-6;
    double num = 0.0, den = 0.0;
    for (int i = 0; i < face3d::kExpressionDim; ++i) {
      torch::NoGradGuard ng;
      auto e = torch::zeros_like(pred);
      e[0][i] = h;
      double fd = (f(pred + e) - f(pred - e)).item<double>() / (2 * h);
      num += std::pow(fd - grad[0][i].item<double>(), 2);
      den += std::pow(fd, 2);
    }
    CHECK(std::sqrt(num / den) < 1e-4);
  }
}

TEST_CASE("face embedding is unit-norm and deterministic") {
  torch::manual_seed(0);
  FaceEmbedConfig cfg;
  FaceEmbed net(cfg, 4, 32);
  FrameImage img(32, 32);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& p : img.pixels) p = u(rng);
  auto e1 = face_embedding(net, img), e2 = face_embedding(net, img);
  CHECK(e1 == e2);
  double n = 0;
  for (float x : e1) n += x * x;
  CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-5);
  CHECK(static_cast<int64_t>(e1.size()) == cfg.dim);
}

TEST_CASE("regressor maps T content vectors to T bounded expression vectors, deterministically") {
  torch::manual_seed(0);
  AemConfig cfg;
  AemModel model(cfg, 128, 64, false, 5, std::vector<int64_t>{16, 24, 32, 48});
  auto content = torch::randn({13, 128}) * 10.0;
  std::vector<float> src(64, 0.125F);
  auto a = predict_expression(model, content, src), b = predict_expression(model, content, src);
  REQUIRE(a.size() == 13);
  for (size_t f = 0; f < a.size(); ++f) {
    CHECK(a[f].values == b[f].values);
    CHECK(a[f].values.cwiseAbs().maxCoeff() <= cfg.bound);
  }
  CHECK_THROWS_AS(predict_expression(model, torch::randn({0, 128}), src), ValidationError);
}

TEST_CASE("training with a frozen AFDM leaves the AFDM unchanged; entangled mode owns an encoder") {
  auto data = data::load_corpus_data(testing::tiny_corpus(), true);
  afdm::AfdmConfig acfg;
  acfg.steps = 2;
  acfg.batch = 4;
  auto afdm_model = afdm::train_afdm(data, acfg, {}, 0, nullptr);
  const auto afdm_bytes = nn::module_bytes(*afdm_model);

  FaceEmbedConfig fcfg;
  fcfg.steps = 3;
  fcfg.batch = 6;
  auto embed = train_face_embed(data, fcfg, {}, 0, nullptr);
  AemConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  auto model = train_aem(data, &afdm_model, embed, cfg, acfg, {}, 0, nullptr);
  CHECK(nn::module_bytes(*afdm_model) == afdm_bytes);
  CHECK_FALSE(model->is_entangled());
  CHECK_THROWS_AS(model->content(data.mel[0], nullptr), MissingPrerequisite);

  auto ent = train_aem(data, nullptr, embed, cfg, acfg, {}, 0, nullptr);
  CHECK(ent->is_entangled());
  CHECK(ent->content(data.mel[0], nullptr).sizes() == torch::IntArrayRef({data.frames_per_clip, acfg.content_dim}));

  auto rep = evaluate_aem(model, &afdm_model, embed, data);
  CHECK(std::isfinite(rep.mean_abs_error));
  CHECK(rep.lmd >= 0.0);

  auto back = load_aem(save_aem(ent, 3, "x"));
  CHECK(back->is_entangled());
  CHECK(torch::equal(back->content(data.mel[1], nullptr), ent->content(data.mel[1], nullptr)));
  auto fe_back = load_face_embed(save_face_embed(embed, 3, "x"));
  CHECK(nn::module_bytes(*fe_back) == nn::module_bytes(*embed));
}

TEST_CASE("aem config rejects unknown keys") {
  auto j = AemConfig{}.to_json();
  CHECK(AemConfig::from_json(j).to_json() == j);
  j["lambda"] = 1.0;
  CHECK_THROWS_AS(AemConfig::from_json(j), ValidationError);
  auto k = AemConfig{}.to_json();
  k["lambda_ldmk"] = -1.0;
  CHECK_THROWS_AS(AemConfig::from_json(k), ValidationError);
}
