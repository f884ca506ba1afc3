#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "opt/error.hpp"
#include "opt/synthdata.hpp"

namespace opt::synth {

namespace {

constexpr int kSuper = 3;  // subsamples per pixel axis

using Polygon = std::vector<face3d::Vec2>;

// Fraction of each pixel's kSuper×kSuper subsamples inside the polygon
// (even-odd rule), filled scanline by scanline.
std::vector<float> coverage(const Polygon& poly, int size) {
  std::vector<float> cov(static_cast<size_t>(size) * size, 0.0F);
  const float unit = 1.0F / (kSuper * kSuper);
  std::vector<double> xs;
  const size_t n = poly.size();
  for (int sy = 0; sy < size * kSuper; ++sy) {
    const double y = (sy + 0.5) / kSuper;
    xs.clear();
    for (size_t i = 0; i < n; ++i) {
      const auto& a = poly[i];
      const auto& b = poly[(i + 1) % n];
      if ((a.y() <= y) == (b.y() <= y)) continue;
      xs.push_back(a.x() + (y - a.y()) / (b.y() - a.y()) * (b.x() - a.x()));
    }
    std::sort(xs.begin(), xs.end());
    const int row = sy / kSuper;
    for (size_t k = 0; k + 1 < xs.size(); k += 2) {
      // subsample columns sx with (sx + 0.5)/kSuper in [xs[k], xs[k+1])
      int s0 = std::max(0, static_cast<int>(std::ceil(xs[k] * kSuper - 0.5)));
      int s1 = std::min(size * kSuper - 1, static_cast<int>(std::ceil(xs[k + 1] * kSuper - 0.5)) - 1);
      for (int sx = s0; sx <= s1; ++sx) cov[static_cast<size_t>(row) * size + sx / kSuper] += unit;
    }
  }
  return cov;
}

void paint(FrameImage& img, const Polygon& poly, const std::array<float, 3>& colour) {
  const auto cov = coverage(poly, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      float c = cov[static_cast<size_t>(y) * img.width + x];
      if (c <= 0.0F) continue;
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = img.at(y, x, ch) * (1.0F - c) + colour[static_cast<size_t>(ch)] * c;
    }
  }
}

Polygon pick(const face3d::Points2& pts, std::initializer_list<int> idx) {
  Polygon p;
  for (int i : idx) p.push_back(pts.row(i).transpose());
  return p;
}

// A polyline thickened by ±half_width pixels along its local normal.
Polygon thick_line(const face3d::Points2& pts, int first, int last, double half_width) {
  Polygon up, down;
  for (int i = first; i <= last; ++i) {
    face3d::Vec2 prev = pts.row(std::max(first, i - 1)).transpose();
    face3d::Vec2 next = pts.row(std::min(last, i + 1)).transpose();
    face3d::Vec2 t = next - prev;
    double len = t.norm();
    face3d::Vec2 nrm = len > 1e-12 ? face3d::Vec2(-t.y() / len, t.x() / len) : face3d::Vec2(0, 1);
    face3d::Vec2 p = pts.row(i).transpose();
    up.push_back(p + half_width * nrm);
    down.push_back(p - half_width * nrm);
  }
  up.insert(up.end(), down.rbegin(), down.rend());
  return up;
}

std::array<float, 3> scaled(const std::array<float, 3>& c, float k) {
  return {std::clamp(c[0] * k, 0.0F, 1.0F), std::clamp(c[1] * k, 0.0F, 1.0F), std::clamp(c[2] * k, 0.0F, 1.0F)};
}

}  // namespace

FrameImage render_face(const face3d::MorphableBasis& basis, const face3d::IdentityCoeffs& alpha,
                       const face3d::ExpressionCoeffs& beta, const face3d::HeadPose& pose,
                       const face3d::Camera& camera, int image_size, const Appearance& look) {
  require(image_size > 0, "render: image size must be positive");
  require(basis.landmark_count() == face3d::kLandmarkCount, "render: renderer needs the 68-point layout");
  const auto lm = face3d::render_landmarks(basis, alpha, beta, pose, camera);
  const auto& p = lm.points;
  require(p.allFinite(), "render: non-finite landmark positions");

  FrameImage img(image_size, image_size);
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x)
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = look.background[static_cast<size_t>(ch)];

  const double px = camera.scale / 19.2;  // stroke widths scale with the face
  Polygon face;
  for (int i = 0; i <= 16; ++i) face.push_back(p.row(i).transpose());
  for (int i = 26; i >= 17; --i) face.push_back(p.row(i).transpose());
  paint(img, face, look.skin);
  paint(img, pick(p, {27, 35, 34, 33, 32, 31}), scaled(look.skin, 0.82F));
  paint(img, thick_line(p, 17, 21, 0.9 * px), look.features);
  paint(img, thick_line(p, 22, 26, 0.9 * px), look.features);
  paint(img, pick(p, {36, 37, 38, 39, 40, 41}), {0.95F, 0.95F, 0.92F});
  paint(img, pick(p, {42, 43, 44, 45, 46, 47}), {0.95F, 0.95F, 0.92F});
  // pupils: small diamonds around the eye centroids
  for (int e = 0; e < 2; ++e) {
    face3d::Vec2 c = p.middleRows(36 + 6 * e, 6).colwise().mean().transpose();
    double r = 1.1 * px;
    paint(img, {c + face3d::Vec2(r, 0), c + face3d::Vec2(0, r), c - face3d::Vec2(r, 0), c - face3d::Vec2(0, r)},
          look.features);
  }
  Polygon lips;
  for (int i = 48; i <= 59; ++i) lips.push_back(p.row(i).transpose());
  paint(img, lips, look.lips);
  Polygon mouth;
  for (int i = 60; i <= 67; ++i) mouth.push_back(p.row(i).transpose());
  paint(img, mouth, {0.18F, 0.05F, 0.07F});
  return img;
}

FrameImage render_landmarks_image(const face3d::Landmarks2D& lm, int image_size, const Appearance& look) {
  FrameImage img(image_size, image_size);
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x)
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = look.background[static_cast<size_t>(ch)];
  for (int k = 0; k < lm.count(); ++k) {
    face3d::Vec2 c = lm.points.row(k).transpose();
    const double r = 0.8;
    paint(img, {c + face3d::Vec2(-r, -r), c + face3d::Vec2(r, -r), c + face3d::Vec2(r, r), c + face3d::Vec2(-r, r)},
          {1.0F, 1.0F, 1.0F});
  }
  return img;
}

}  // namespace opt::synth
