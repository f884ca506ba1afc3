#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "opt/error.hpp"
#include "opt/face3d.hpp"

namespace opt::face3d {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kMouthY = -0.75;

double face_depth(double x, double y) {
  double z = 0.55 * (1.0 - 0.45 * x * x - 0.18 * (y + 0.3) * (y + 0.3));
  z += 0.35 * std::exp(-(x * x / (2 * 0.12 * 0.12) + (y + 0.12) * (y + 0.12) / (2 * 0.25 * 0.25)));
  return z;
}

Vec3 on_surface(double x, double y) { return {x, y, face_depth(x, y)}; }

std::vector<Vec3> template_landmarks() {
  std::vector<Vec3> p;
  p.reserve(kLandmarkCount);
  for (int i = 0; i <= 16; ++i) {  // jaw, left temple to right temple through the chin
    double phi = kPi + kPi * i / 16.0;
    p.push_back(on_surface(std::cos(phi), 0.2 + 1.5 * std::sin(phi)));
  }
  for (int side = 0; side < 2; ++side) {  // brows
    for (int i = 0; i < 5; ++i) {
      double t = i / 4.0;
      double x = side == 0 ? -0.8 + 0.65 * t : 0.15 + 0.65 * t;
      double arch = std::sin(kPi * t);
      p.push_back(on_surface(x, 0.42 + 0.1 * arch));
    }
  }
  for (int i = 0; i < 4; ++i) p.push_back(on_surface(0.0, 0.3 - 0.15 * i));  // nose bridge
  for (int i = 0; i < 5; ++i) {                                              // nostrils
    double x = -0.2 + 0.1 * i;
    p.push_back(on_surface(x, -0.28 - 0.04 * std::cos(kPi * (i - 2) / 4.0)));
  }
  for (int side = 0; side < 2; ++side) {  // eyes
    double cx = side == 0 ? -0.45 : 0.45;
    for (int i = 0; i < 6; ++i) {
      double ang = kPi - i * kPi / 3.0;
      p.push_back(on_surface(cx + 0.18 * std::cos(ang), 0.15 + 0.07 * std::sin(ang)));
    }
  }
  for (int i = 0; i < 12; ++i) {  // outer lips, left corner clockwise over the top
    double ang = kPi - i * 2.0 * kPi / 12.0;
    p.push_back(on_surface(0.4 * std::cos(ang), kMouthY + 0.18 * std::sin(ang)));
  }
  for (int i = 0; i < 8; ++i) {  // inner lips
    double ang = kPi - i * 2.0 * kPi / 8.0;
    p.push_back(on_surface(0.28 * std::cos(ang), kMouthY + 0.05 * std::sin(ang)));
  }
  return p;
}

std::vector<Vec3> interior_vertices() {
  std::vector<Vec3> v;
  constexpr double step = 0.125;
  for (double y = -1.25; y <= 0.9 + 1e-9; y += step) {
    for (double x = -1.0; x <= 1.0 + 1e-9; x += step) {
      bool inside = false;
      if (y < 0.2) {
        double s = (y - 0.2) / 1.5;
        inside = x * x + s * s < 0.92;
      } else {
        double s = (y - 0.2) / 0.75;
        inside = x * x + s * s < 0.92;
      }
      if (inside) v.push_back(on_surface(x, y));
    }
  }
  return v;
}

double gauss2(double dx, double dy, double sigma) { return std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)); }

using Field = std::function<Vec3(const Vec3&)>;

void set_column(Eigen::MatrixXd& basis, int col, const FaceShape& mean, const Field& f) {
  for (int v = 0; v < mean.rows(); ++v) basis.block(3 * v, col, 3, 1) = f(mean.row(v).transpose());
}

// Rescales a column so the largest landmark displacement equals `amplitude`.
void normalize_column(Eigen::MatrixXd& basis, int col, const std::vector<int>& lms, double amplitude) {
  double m = 0.0;
  for (int idx : lms) m = std::max(m, basis.block(3 * idx, col, 3, 1).norm());
  if (m > 0) basis.col(col) *= amplitude / m;
}

}  // namespace

MorphableBasis make_synthetic_basis(uint64_t seed) {
  MorphableBasis b;
  b.seed = seed;
  auto lms = template_landmarks();
  auto inner = interior_vertices();
  const int V = static_cast<int>(lms.size() + inner.size());
  b.mean_shape.resize(V, 3);
  for (int i = 0; i < kLandmarkCount; ++i) b.mean_shape.row(i) = lms[static_cast<size_t>(i)].transpose();
  for (size_t i = 0; i < inner.size(); ++i) b.mean_shape.row(kLandmarkCount + static_cast<long>(i)) = inner[i].transpose();
  b.landmark_indices.resize(kLandmarkCount);
  b.landmark_weights.assign(kLandmarkCount, 1.0);
  for (int i = 0; i < kLandmarkCount; ++i) {
    b.landmark_indices[static_cast<size_t>(i)] = i;
    if ((i >= 27 && i <= 35) || (i >= 48 && i <= 67)) b.landmark_weights[static_cast<size_t>(i)] = kHeavyWeight;
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  // Identity: a few interpretable global modes followed by random smooth fields.
  b.identity_basis = Eigen::MatrixXd::Zero(3 * V, kIdentityDim);
  const auto& S = b.mean_shape;
  set_column(b.identity_basis, 0, S, [](const Vec3& p) { return Vec3(p.x(), 0, 0); });                     // width
  set_column(b.identity_basis, 1, S, [](const Vec3& p) { return Vec3(0, std::min(p.y() - 0.2, 0.0), 0); });  // length
  set_column(b.identity_basis, 2, S, [](const Vec3& p) {  // eye spacing
    return Vec3((p.x() > 0 ? 1 : -1) * gauss2(std::abs(p.x()) - 0.45, p.y() - 0.2, 0.25), 0, 0);
  });
  set_column(b.identity_basis, 3, S, [](const Vec3& p) {  // nose length
    return Vec3(0, -gauss2(p.x(), p.y() + 0.25, 0.18), 0.3 * gauss2(p.x(), p.y() + 0.15, 0.2));
  });
  set_column(b.identity_basis, 4, S, [](const Vec3& p) {  // mouth width
    return Vec3(p.x() * gauss2(p.x() * 0.7, p.y() - kMouthY, 0.3), 0, 0);
  });
  set_column(b.identity_basis, 5, S, [](const Vec3& p) {  // brow height
    return Vec3(0, gauss2(0, p.y() - 0.45, 0.18), 0);
  });
  set_column(b.identity_basis, 6, S, [](const Vec3& p) {  // chin shape
    return Vec3(0, -gauss2(p.x(), p.y() + 1.3, 0.35), 0);
  });
  set_column(b.identity_basis, 7, S, [](const Vec3& p) {  // cheek width
    return Vec3(p.x() * gauss2(0, p.y() + 0.4, 0.35), 0, 0);
  });
  for (int c = 0; c < 8; ++c) normalize_column(b.identity_basis, c, b.landmark_indices, 0.12);
  for (int c = 8; c < kIdentityDim; ++c) {
    std::array<Vec3, 4> amp;
    std::array<Vec2, 4> ctr;
    for (int j = 0; j < 4; ++j) {
      amp[static_cast<size_t>(j)] = Vec3(normal(rng), normal(rng), 0.5 * normal(rng));
      ctr[static_cast<size_t>(j)] = Vec2(uni(rng), 0.9 * uni(rng) - 0.35);
    }
    set_column(b.identity_basis, c, S, [&](const Vec3& p) {
      Vec3 d = Vec3::Zero();
      for (int j = 0; j < 4; ++j)
        d += amp[static_cast<size_t>(j)] * gauss2(p.x() - ctr[static_cast<size_t>(j)].x(), p.y() - ctr[static_cast<size_t>(j)].y(), 0.45);
      return d;
    });
    normalize_column(b.identity_basis, c, b.landmark_indices, 0.08 / (1.0 + (c - 8) / 12.0));
  }

  // Expression: speech-driven mouth modes, broad upper-face modes, then local bumps.
  b.expression_basis = Eigen::MatrixXd::Zero(3 * V, kExpressionDim);
  auto mouth_region = [](const Vec3& p) { return std::exp(-(p.x() * p.x() / 0.25 + (p.y() - kMouthY) * (p.y() - kMouthY) / 0.06) / 2); };
  set_column(b.expression_basis, 0, S, [](const Vec3& p) {  // jaw open
    double below = std::clamp((kMouthY + 0.01 - p.y()) / 0.25, 0.0, 1.0);
    return Vec3(0, -0.10 * below * std::exp(-p.x() * p.x() / 0.6), 0);
  });
  set_column(b.expression_basis, 1, S, [](const Vec3& p) {  // lip stretch
    return Vec3(0.06 * (p.x() > 0 ? 1 : -1) * gauss2(std::abs(p.x()) - 0.4, p.y() - kMouthY, 0.15), 0, 0);
  });
  set_column(b.expression_basis, 2, S, [&](const Vec3& p) {  // pucker
    double m = mouth_region(p);
    return Vec3(-p.x() / 0.4 * m, -(p.y() - kMouthY) / 0.18 * m, 0.5 * m);
  });
  set_column(b.expression_basis, 3, S, [](const Vec3& p) {  // upper lip raise
    return p.y() > kMouthY - 0.02 ? Vec3(0, 0.05 * gauss2(p.x(), p.y() + 0.68, 0.12), 0) : Vec3::Zero();
  });
  set_column(b.expression_basis, 4, S, [](const Vec3& p) {  // left smile
    return Vec3(-0.03, 0.05, 0) * gauss2(p.x() + 0.4, p.y() - kMouthY, 0.15);
  });
  set_column(b.expression_basis, 5, S, [](const Vec3& p) {  // right smile
    return Vec3(0.03, 0.05, 0) * gauss2(p.x() - 0.4, p.y() - kMouthY, 0.15);
  });
  set_column(b.expression_basis, 6, S, [](const Vec3& p) {  // lower lip drop
    return p.y() < kMouthY ? Vec3(0, -0.05 * gauss2(p.x(), p.y() + 0.85, 0.12), 0) : Vec3::Zero();
  });
  set_column(b.expression_basis, 7, S, [&](const Vec3& p) { return Vec3(0.04 * mouth_region(p), 0, 0); });  // shift
  for (int c = 0; c < kMouthComponents; ++c) {
    double target = c == 0 ? 0.14 : 0.1;
    normalize_column(b.expression_basis, c, b.landmark_indices, target);
  }

  const int u0 = kMouthComponents;
  set_column(b.expression_basis, u0 + 0, S, [](const Vec3& p) { return Vec3(0, gauss2(p.x() + 0.45, p.y() - 0.45, 0.2), 0); });  // left brow raise
  set_column(b.expression_basis, u0 + 1, S, [](const Vec3& p) { return Vec3(0, gauss2(p.x() - 0.45, p.y() - 0.45, 0.2), 0); });  // right brow raise
  set_column(b.expression_basis, u0 + 2, S, [](const Vec3& p) {  // brow furrow
    return Vec3(-p.x() * gauss2(0, p.y() - 0.45, 0.15) * std::exp(-p.x() * p.x() / 0.5), -0.5 * gauss2(p.x(), p.y() - 0.4, 0.3), 0);
  });
  set_column(b.expression_basis, u0 + 3, S, [](const Vec3& p) {  // left squint
    return Vec3(0, (p.y() < 0.15 ? 1.0 : -1.0) * gauss2(p.x() + 0.45, p.y() - 0.15, 0.12), 0);
  });
  set_column(b.expression_basis, u0 + 4, S, [](const Vec3& p) {  // right squint
    return Vec3(0, (p.y() < 0.15 ? 1.0 : -1.0) * gauss2(p.x() - 0.45, p.y() - 0.15, 0.12), 0);
  });
  set_column(b.expression_basis, u0 + 5, S, [](const Vec3& p) {  // cheek puff
    return Vec3(p.x() * gauss2(std::abs(p.x()) - 0.8, p.y() + 0.6, 0.3), 0, 0.3 * gauss2(std::abs(p.x()) - 0.6, p.y() + 0.6, 0.3));
  });
  set_column(b.expression_basis, u0 + 6, S, [](const Vec3& p) {  // jaw sideways
    return Vec3(std::clamp((-0.2 - p.y()) / 0.8, 0.0, 1.0), 0, 0);
  });
  set_column(b.expression_basis, u0 + 7, S, [](const Vec3& p) {  // nose wrinkle
    return Vec3(0, gauss2(p.x(), p.y() + 0.25, 0.15), 0);
  });
  for (int c = u0; c < u0 + kUpperFaceComponents; ++c) normalize_column(b.expression_basis, c, b.landmark_indices, 0.14);

  // Local bumps centred on distinct landmarks, random direction.
  std::vector<int> centres(kLandmarkCount);
  std::iota(centres.begin(), centres.end(), 0);
  std::shuffle(centres.begin(), centres.end(), rng);
  for (int c = u0 + kUpperFaceComponents; c < kExpressionDim; ++c) {
    Vec3 ctr = S.row(centres[static_cast<size_t>(c - u0 - kUpperFaceComponents)]);
    double theta = kPi * uni(rng);
    Vec3 dir(std::cos(theta), std::sin(theta), 0.2 * normal(rng));
    set_column(b.expression_basis, c, S, [&](const Vec3& p) { return dir * gauss2(p.x() - ctr.x(), p.y() - ctr.y(), 0.05); });
    normalize_column(b.expression_basis, c, b.landmark_indices, 0.16);
  }
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Binary container: "OPTBASIS" | u64 header length | JSON header | float64 payload
// (mean V×3, identity V×3×80, expression V×3×64; all row-major).

namespace {
constexpr char kMagic[8] = {'O', 'P', 'T', 'B', 'A', 'S', 'I', 'S'};
constexpr int kBasisVersion = 1;
}  // namespace

void save_basis(const std::filesystem::path& path, const MorphableBasis& basis) {
  basis.validate();
  nlohmann::json header = {{"version", kBasisVersion},
                           {"vertex_count", basis.vertex_count()},
                           {"identity_dim", basis.identity_dim()},
                           {"expression_dim", basis.expression_dim()},
                           {"landmark_count", basis.landmark_count()},
                           {"seed", basis.seed},
                           {"landmark_indices", basis.landmark_indices},
                           {"landmark_weights", basis.landmark_weights},
                           {"layout", "mean[V,3], identity[V,3,D_id], expression[V,3,D_exp]; float64 little-endian"}};
  std::string h = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 8);
  uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  auto put = [&](const double* p, long n) { out.write(reinterpret_cast<const char*>(p), n * static_cast<long>(sizeof(double))); };
  put(basis.mean_shape.data(), basis.mean_shape.size());
  // Row-major (3V)×D so the flattening is V×3×D.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> id = basis.identity_basis;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> ex = basis.expression_basis;
  put(id.data(), id.size());
  put(ex.data(), ex.size());
}

MorphableBasis load_basis(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read basis " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError("not a basis container: " + path.string());
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  auto header = nlohmann::json::parse(h);
  if (header.at("version").get<int>() != kBasisVersion) throw IoError("unsupported basis version");
  MorphableBasis b;
  const long V = header.at("vertex_count").get<long>();
  const long di = header.at("identity_dim").get<long>();
  const long de = header.at("expression_dim").get<long>();
  b.seed = header.at("seed").get<uint64_t>();
  b.landmark_indices = header.at("landmark_indices").get<std::vector<int>>();
  b.landmark_weights = header.at("landmark_weights").get<std::vector<double>>();
  auto get = [&](double* p, long n) {
    in.read(reinterpret_cast<char*>(p), n * static_cast<long>(sizeof(double)));
    if (!in) throw IoError("truncated basis container: " + path.string());
  };
  b.mean_shape.resize(V, 3);
  get(b.mean_shape.data(), V * 3);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> id(3 * V, di), ex(3 * V, de);
  get(id.data(), id.size());
  get(ex.data(), ex.size());
  b.identity_basis = id;
  b.expression_basis = ex;
  b.validate();
  return b;
}

}  // namespace opt::face3d
