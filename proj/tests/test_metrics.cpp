#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include <doctest.h>

#include "opt/error.hpp"
#include "opt/metrics.hpp"

using namespace opt;
using namespace opt::metrics;
namespace fs = std::filesystem;

namespace {

FrameImage random_image(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<float> u(0.0F, 1.0F);
  FrameImage img(h, w);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

// Direct per-window evaluation, no summed-area tables.
double ssim_brute(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const int k = 8;
  double total = 0.0;
  int count = 0;
  for (int y = 0; y + k <= a.rows(); ++y) {
    for (int x = 0; x + k <= a.cols(); ++x) {
      auto wa = a.block(y, x, k, k), wb = b.block(y, x, k, k);
      double ma = wa.mean(), mb = wb.mean();
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          va += (wa(i, j) - ma) * (wa(i, j) - ma);
          vb += (wb(i, j) - mb) * (wb(i, j) - mb);
          cov += (wa(i, j) - ma) * (wb(i, j) - mb);
        }
      va /= k * k;
      vb /= k * k;
      cov /= k * k;
      const double c1 = 1e-4, c2 = 9e-4;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

face3d::Landmarks2D points(std::initializer_list<std::pair<double, double>> xy) {
  face3d::Landmarks2D l;
  l.points.resize(static_cast<Eigen::Index>(xy.size()), 2);
  int i = 0;
  for (auto [x, y] : xy) {
    l.points(i, 0) = x;
    l.points(i, 1) = y;
    ++i;
  }
  return l;
}

std::vector<float> unit(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += x * x;
  for (float& x : v) x = static_cast<float>(x / std::sqrt(n));
  return v;
}

}  // namespace

TEST_CASE("ssim matches a brute-force windowed evaluation on random images") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> size(8, 16);
  for (int trial = 0; trial < 40; ++trial) {
    int h = size(rng), w = size(rng);
    auto a = random_image(rng, h, w), b = random_image(rng, h, w);
    CHECK(std::abs(ssim(a, b) - ssim_brute(to_gray(a), to_gray(b))) < 1e-8);
  }
}

TEST_CASE("ssim of a constant image against the same constant plus 0.5") {
  FrameImage a(8, 8, 0.2F), b(8, 8, 0.7F);
  // One window; both variances and the covariance vanish, so only luminance remains.
  const double ma = 0.2, mb = 0.7, c1 = 1e-4;
  const double expected = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
  CHECK(ssim(a, b) == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("ssim identity, symmetry, bounds and shape errors") {
  std::mt19937_64 rng(5);
  auto a = random_image(rng, 20, 24), b = random_image(rng, 20, 24);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-14));
  double s = ssim(a, b);
  CHECK(s >= -1.0);
  CHECK(s <= 1.0);
  CHECK_THROWS_AS(ssim(a, random_image(rng, 20, 25)), ValidationError);
}

TEST_CASE("lmd hand values and invariances") {
  CHECK(lmd({points({{1, 2}})}, {points({{4, 6}})}) == doctest::Approx(5.0));
  auto p = points({{1, 2}, {3, 5}, {-2, 7}});
  auto g = points({{0, 0}, {3, 1}, {2, 2}});
  CHECK(lmd({p}, {p}) == 0.0);
  auto ps = p, gs = g;
  ps.points.col(0).array() += 11.5;
  gs.points.col(0).array() += 11.5;
  ps.points.col(1).array() -= 4.0;
  gs.points.col(1).array() -= 4.0;
  CHECK(lmd({ps}, {gs}) == doctest::Approx(lmd({p}, {g})).epsilon(1e-12));
  CHECK_THROWS_AS(lmd({p, p}, {g}), ValidationError);
}

TEST_CASE("lmd mouth subset uses points 48 to 67") {
  face3d::Landmarks2D a, b;
  a.points = face3d::Points2::Zero(68, 2);
  b.points = face3d::Points2::Zero(68, 2);
  b.points(10, 0) = 100.0;  // outside the mouth
  b.points(50, 1) = 2.0;
  CHECK(lmd({a}, {b}, true) == doctest::Approx(2.0 / 20.0));
  CHECK(lmd({a}, {b}, false) == doctest::Approx(102.0 / 68.0));
}

TEST_CASE("csim identity, orthogonal and antipodal cases") {
  auto e = unit({1, 2, 3, 4});
  std::vector<float> neg;
  for (float x : e) neg.push_back(-x);
  CHECK(csim(e, e) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(csim(e, neg) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(csim({1, 0, 0}, {0, 1, 0}) == 0.0);
  CHECK(csim(e, unit({4, 1, 0, 2})) == doctest::Approx(csim(unit({4, 1, 0, 2}), e)));
  CHECK_THROWS_AS(csim({0, 0, 0}, {1, 0, 0}), ValidationError);
  CHECK_THROWS_AS(csim({2, 0}, {1, 0}), ValidationError);
}

TEST_CASE("evaluate_clip on ground truth against itself is perfect") {
  std::mt19937_64 rng(9);
  std::vector<FrameImage> frames;
  std::vector<face3d::Landmarks2D> lm;
  for (int t = 0; t < 4; ++t) {
    frames.push_back(random_image(rng, 16, 16));
    lm.push_back(points({{1.0 * t, 2}, {3, 4.5}}));
  }
  EmbedFn embed = [](const FrameImage& img) {
    std::vector<float> e(8, 0.0F);
    for (size_t i = 0; i < img.pixels.size(); ++i) e[i % 8] += img.pixels[i];
    return unit(e);
  };
  auto m = evaluate_clip("c", frames, frames, lm, lm, embed);
  CHECK(m.ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.lmd == 0.0);
  CHECK(std::abs(m.csim - 1.0) < 1e-5);
  CHECK(m.frames == 4);
  CHECK_THROWS_AS(evaluate_clip("c", frames, {frames[0]}, lm, lm, embed), ValidationError);
  CHECK_THROWS_AS(evaluate_clip("c", frames, frames, lm, lm, EmbedFn{}), ValidationError);
}

TEST_CASE("aggregate is the mean of per-clip values and the report validates against the schema") {
  std::vector<ClipMetrics> clips{{"a", 25, 0.8, 1.5, 0.9}, {"b", 25, 0.6, 2.5, 0.7}, {"c", 10, 0.7, 0.5, 0.5}};
  auto r = aggregate(clips, false, {{"seed", 1}});
  double s = 0, l = 0, c = 0;
  for (const auto& m : clips) {
    s += m.ssim;
    l += m.lmd;
    c += m.csim;
  }
  CHECK(r.ssim == doctest::Approx(s / 3));
  CHECK(r.lmd == doctest::Approx(l / 3));
  CHECK(r.csim == doctest::Approx(c / 3));
  CHECK(r.clip_count == 3);
  CHECK(r.frame_count == 60);

  auto back = MetricsReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());

  auto dir = fs::temp_directory_path() / "opt_test_metrics";
  fs::create_directories(dir);
  std::ofstream(dir / "report.json") << r.to_json().dump();
  r.write_csv(dir / "report.csv");
  CHECK(fs::file_size(dir / "report.csv") > 0);
  const std::string schema = std::string(OPT_SOURCE_DIR) + "/docs/metrics_report.schema.json";
  const std::string cmd = "python3 -c \"import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[1])), "
                          "json.load(open(sys.argv[2])))\" '" +
                          (dir / "report.json").string() + "' '" + schema + "'";
  CHECK(std::system(cmd.c_str()) == 0);

  auto bad = r.to_json();
  bad["aggregate"]["lmd"] = -1.0;
  std::ofstream(dir / "bad.json") << bad.dump();
  const std::string bad_cmd = "python3 -c \"import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[1])), "
                              "json.load(open(sys.argv[2])))\" '" +
                              (dir / "bad.json").string() + "' '" + schema + "' 2>/dev/null";
  CHECK(std::system(bad_cmd.c_str()) != 0);
  fs::remove_all(dir);
}
