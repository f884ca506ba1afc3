#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "opt/array_io.hpp"
#include "opt/error.hpp"
#include "opt/synthdata.hpp"

using namespace opt;
using namespace opt::synth;
namespace fs = std::filesystem;

namespace {

// Pitch by normalized autocorrelation over a 40 ms window; parabolic peak refinement.
double autocorr_pitch(const std::vector<float>& x, size_t centre, double fmin, double fmax) {
  const int n = 640;
  const size_t start = centre - n / 2;
  const int lag_min = static_cast<int>(16000.0 / fmax);
  const int lag_max = static_cast<int>(16000.0 / fmin);
  std::vector<double> r(static_cast<size_t>(lag_max + 2), 0.0);
  for (int lag = lag_min - 1; lag <= lag_max + 1; ++lag) {
    double s = 0.0, e0 = 0.0, e1 = 0.0;
    for (int i = 0; i < n; ++i) {
      double a = x[start + static_cast<size_t>(i)], b = x[start + static_cast<size_t>(i + lag)];
      s += a * b;
      e0 += a * a;
      e1 += b * b;
    }
    r[static_cast<size_t>(lag)] = s / std::sqrt(e0 * e1 + 1e-30);
  }
  int best = lag_min;
  for (int lag = lag_min; lag <= lag_max; ++lag)
    if (r[static_cast<size_t>(lag)] > r[static_cast<size_t>(best)]) best = lag;
  double a = r[static_cast<size_t>(best - 1)], b = r[static_cast<size_t>(best)], c = r[static_cast<size_t>(best + 1)];
  double shift = 0.5 * (a - c) / (a - 2 * b + c);
  return 16000.0 / (best + shift);
}

}  // namespace

TEST_CASE("synth_audio is deterministic and bounded") {
  SynthWorld w(3, 4, 5);
  auto t = w.timing(2, 0, 1.0);
  auto a = synth_audio(w, 1, 2, 1.0, t);
  auto b = synth_audio(SynthWorld(3, 4, 5), 1, 2, 1.0, t);
  REQUIRE(a.samples.size() == 16000);
  CHECK(a.samples == b.samples);
  for (float s : a.samples) CHECK(std::abs(s) <= 0.8F + 1e-6F);
  CHECK_THROWS_AS(synth_audio(w, 4, 0, 1.0, t), ValidationError);
  CHECK_THROWS_AS(synth_audio(w, 0, -1, 1.0, t), ValidationError);
}

TEST_CASE("same word, different speakers: identical contour after removing the base pitch") {
  SynthWorld w(5, 6, 4);
  const int word = 3;
  auto t = w.timing(word, 0, 1.0);
  // construction: exact ratio equality
  for (int i = 0; i < 100; ++i) {
    double s = 0.01 * i;
    double r0 = instantaneous_f0(w, 0, word, t, s) / w.base_f0(0);
    double r5 = instantaneous_f0(w, 5, word, t, s) / w.base_f0(5);
    CHECK(r0 == doctest::Approx(r5).epsilon(1e-12));
  }
  // extraction oracle: autocorrelation pitch on the waveform, in the voiced middle
  auto a0 = synth_audio(w, 0, word, 1.0, t);
  auto a5 = synth_audio(w, 5, word, 1.0, t);
  int tested = 0;
  for (int i = 0; i < 50; ++i) {
    double s = 0.02 * i;
    if (w.envelope(word, t.tau(s - 0.02)) < 0.3 || w.envelope(word, t.tau(s + 0.02)) < 0.3) continue;
    auto c = static_cast<size_t>(s * 16000);
    double p0 = autocorr_pitch(a0.samples, c, 70, 400) / w.base_f0(0);
    double p5 = autocorr_pitch(a5.samples, c, 70, 400) / w.base_f0(5);
    CHECK(p0 == doctest::Approx(p5).epsilon(0.03));
    CHECK(p0 == doctest::Approx(instantaneous_f0(w, 0, word, t, s) / w.base_f0(0)).epsilon(0.03));
    ++tested;
  }
  CHECK(tested >= 5);
}

TEST_CASE("different words, same speaker: contours differ at most samples") {
  SynthWorld w(9, 3, 10);
  for (int a = 0; a < 9; ++a) {
    int b = a + 1;
    auto ta = w.timing(a, 0, 1.0), tb = w.timing(b, 0, 1.0);
    int differ = 0;
    for (int i = 0; i < 16000; ++i) {
      double s = i / 16000.0;
      double fa = instantaneous_f0(w, 1, a, ta, s), fb = instantaneous_f0(w, 1, b, tb, s);
      if (std::abs(fa - fb) > 0.005 * fa) ++differ;
    }
    CHECK(differ > 8000);
  }
}

TEST_CASE("synth_motion: determinism, length and rest pose") {
  SynthWorld w(1, 2, 4);
  for (int word = 0; word < 4; ++word) {
    auto t = w.timing(word, 1, 2.0);
    auto m1 = synth_motion(w, word, 2.0, t);
    auto m2 = synth_motion(w, word, 2.0, t);
    REQUIRE(m1.beta.size() == 50);
    int silent = 0, voiced = 0;
    for (size_t f = 0; f < m1.beta.size(); ++f) {
      CHECK(m1.beta[f].values == m2.beta[f].values);
      auto mouth = m1.beta[f].values.head(face3d::kMouthComponents);
      if (m1.mouth_envelope[f] == 0.0) {
        CHECK(mouth.cwiseAbs().maxCoeff() == 0.0);
        ++silent;
      } else {
        ++voiced;
      }
      m1.beta[f].validate();
    }
    CHECK(silent > 0);
    CHECK(voiced > 0);
  }
  auto t = w.timing(0, 0, 0.4);
  CHECK(synth_motion(w, 0, 0.4, t).beta.size() == 10);
}

TEST_CASE("pose tracks stay within ±30 degrees and move smoothly") {
  auto poses = synth_pose_track(77, 250);
  double deg = std::numbers::pi / 180;
  double max_step = 0;
  for (size_t f = 0; f < poses.size(); ++f) {
    poses[f].validate();
    CHECK(std::abs(poses[f].yaw()) <= 30 * deg);
    CHECK(std::abs(poses[f].pitch()) <= 30 * deg);
    if (f > 0) max_step = std::max(max_step, face3d::rotation_angle_between(poses[f].rotation, poses[f - 1].rotation));
  }
  CHECK(max_step < 5 * deg);
  CHECK(synth_pose_track(77, 10)[3].rotation == poses[3].rotation);
}

TEST_CASE("render_face: determinism, pose sensitivity and landmark consistency") {
  auto basis = face3d::make_synthetic_basis(7);
  SynthWorld w(2, 3, 2);
  auto cam = face3d::Camera::for_image(64);
  face3d::ExpressionCoeffs e;
  e.values(0) = 2.0;  // open jaw, so the inner mouth is large
  auto look = w.appearance(1);
  auto img = render_face(basis, w.identity(1), e, face3d::HeadPose{}, cam, 64, look);
  auto img2 = render_face(basis, w.identity(1), e, face3d::HeadPose{}, cam, 64, look);
  CHECK(img.pixels == img2.pixels);
  img.validate();

  auto yawed = render_face(basis, w.identity(1), e, face3d::HeadPose::from_euler(10 * std::numbers::pi / 180, 0, 0),
                           cam, 64, look);
  auto lm0 = face3d::render_landmarks(basis, w.identity(1), e, face3d::HeadPose{}, cam);
  auto lm1 = face3d::render_landmarks(basis, w.identity(1), e, face3d::HeadPose::from_euler(10 * std::numbers::pi / 180, 0, 0), cam);
  double x0 = std::min(lm0.points.col(0).minCoeff(), lm1.points.col(0).minCoeff()) - 2;
  double x1 = std::max(lm0.points.col(0).maxCoeff(), lm1.points.col(0).maxCoeff()) + 2;
  double y0 = std::min(lm0.points.col(1).minCoeff(), lm1.points.col(1).minCoeff()) - 2;
  double y1 = std::max(lm0.points.col(1).maxCoeff(), lm1.points.col(1).maxCoeff()) + 2;
  int changed = 0, inside = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      bool diff = false;
      for (int c = 0; c < 3; ++c) diff |= img.at(y, x, c) != yawed.at(y, x, c);
      if (!diff) continue;
      ++changed;
      if (x + 0.5 >= x0 && x + 0.5 <= x1 && y + 0.5 >= y0 && y + 0.5 <= y1) ++inside;
    }
  }
  CHECK(changed > 50);
  CHECK(inside == changed);

  // Inner-mouth pixels: their centroid must match the projected polygon's area centroid.
  double area = 0, cx = 0, cy = 0;
  for (int i = 0; i < 8; ++i) {
    auto a = lm0.points.row(60 + i), b = lm0.points.row(60 + (i + 1) % 8);
    double cr = a(0) * b(1) - b(0) * a(1);
    area += cr / 2;
    cx += (a(0) + b(0)) * cr;
    cy += (a(1) + b(1)) * cr;
  }
  cx /= 6 * area;
  cy /= 6 * area;
  double sx = 0, sy = 0, n = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      double d = std::abs(img.at(y, x, 0) - 0.18F) + std::abs(img.at(y, x, 1) - 0.05F) + std::abs(img.at(y, x, 2) - 0.07F);
      if (d < 1e-4) {
        sx += x + 0.5;
        sy += y + 0.5;
        n += 1;
      }
    }
  }
  REQUIRE(n > 3);
  CHECK(std::abs(sx / n - cx) < 1.0);
  CHECK(std::abs(sy / n - cy) < 1.0);

  // Dot image: each isolated landmark lights pixels centred on its position.
  for (int k : {8, 30, 36, 57}) {
    face3d::Landmarks2D one;
    one.points = lm0.points.row(k);
    auto dots = render_landmarks_image(one, 64, Appearance{});
    double wx = 0, wy = 0, wt = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        double v = dots.at(y, x, 0) - Appearance{}.background[0];
        wx += v * (x + 0.5);
        wy += v * (y + 0.5);
        wt += v;
      }
    CHECK(std::abs(wx / wt - one.points(0, 0)) < 1.0);
    CHECK(std::abs(wy / wt - one.points(0, 1)) < 1.0);
  }
}

TEST_CASE("CorpusSpec arithmetic and validation") {
  CorpusSpec spec;
  CHECK(spec.n_identities * spec.n_words * spec.clips_per_pair == 160);
  CHECK(spec.total_frames() == 160 * 25);
  spec.validate();
  CorpusSpec bad = spec;
  bad.n_identities = 1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = spec;
  bad.frame_budget = 100;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK(CorpusSpec::from_json(spec.to_json()).to_json() == spec.to_json());
  CHECK_THROWS_AS(CorpusSpec::from_json({{"n_identity", 3}}), ValidationError);
}

TEST_CASE("build_corpus: counts, alignment, identity constancy and reproducibility") {
  auto root = fs::temp_directory_path() / "opt_synth_test";
  fs::remove_all(root);
  CorpusSpec spec;
  spec.n_identities = 2;
  spec.n_words = 2;
  spec.clips_per_pair = 2;
  spec.seconds_per_clip = 0.4;
  spec.seed = 5;
  auto corpus = build_corpus(spec, root / "a");
  REQUIRE(corpus.clips.size() == 8);
  CHECK(corpus.split("test").size() == 4);
  auto loaded = load_corpus(root / "a");
  REQUIRE(loaded.clips.size() == 8);
  CHECK(loaded.spec.to_json() == spec.to_json());
  auto basis = face3d::load_basis(loaded.basis_path());
  SynthWorld world(spec.seed, 2, 2);
  for (const auto& c : loaded.clips) {
    auto dir = root / "a";
    auto beta = read_beta(dir / c.beta);
    auto pose = read_pose(dir / c.pose);
    auto lms = face3d::read_landmarks_csv(dir / c.landmarks);
    auto chunks = audio::read_chunks(dir / c.chunks);
    auto frames = read_frames(dir / c.frames_dir, c.frame_count);
    CHECK(c.frame_count == 10);
    CHECK(beta.size() == 10);
    CHECK(pose.size() == 10);
    CHECK(lms.size() == 10);
    CHECK(chunks.size() == 10);
    CHECK(audio::load_audio(dir / c.wav).samples.size() == 6400);
    CHECK(!fs::exists(dir / c.frames_dir / frame_file_name(10)));
    // landmarks are the identity's α with the stored β and pose
    auto cam = face3d::Camera::for_image(64);
    auto re = face3d::render_landmarks(basis, world.identity(c.speaker), beta[4], pose[4], cam);
    CHECK((re.points - lms[4].points).cwiseAbs().maxCoeff() < 1e-3);
    CHECK(frames[0].height == 64);
  }
  auto again = build_corpus(spec, root / "b");
  for (size_t i = 0; i < again.clips.size(); ++i) CHECK(again.clips[i].checksums == corpus.clips[i].checksums);
  CHECK(io::read_text(root / "a" / "manifest.jsonl") == io::read_text(root / "b" / "manifest.jsonl"));
  CHECK_THROWS_AS(load_corpus(root / "missing"), MissingPrerequisite);
  fs::remove_all(root);
}
