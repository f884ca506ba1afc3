#include "opt/face3d.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "opt/error.hpp"

namespace opt::face3d {

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

void check_coeffs(const Eigen::VectorXd& v, long dim, double bound, const char* name) {
  require(v.size() == dim, std::string(name) + " has wrong dimension");
  require(v.allFinite(), std::string(name) + " has non-finite entries");
  require(v.cwiseAbs().maxCoeff() <= bound + 1e-12, std::string(name) + " exceeds coefficient bound");
}

}  // namespace

void MorphableBasis::validate() const {
  const long v3 = 3 * mean_shape.rows();
  require(mean_shape.rows() > 0, "basis has no vertices");
  require(identity_basis.rows() == v3 && expression_basis.rows() == v3, "basis row count must be 3V");
  require(landmark_indices.size() == landmark_weights.size(), "landmark index/weight count mismatch");
  for (int idx : landmark_indices) require(idx >= 0 && idx < vertex_count(), "landmark index out of range");
  for (double w : landmark_weights) require(w > 0.0, "landmark weights must be positive");
}

void IdentityCoeffs::validate(double bound) const { check_coeffs(values, kIdentityDim, bound, "identity coefficients"); }
void ExpressionCoeffs::validate(double bound) const { check_coeffs(values, kExpressionDim, bound, "expression coefficients"); }

HeadPose HeadPose::from_euler(double yaw, double pitch, double roll, const Vec3& t) {
  HeadPose p;
  p.rotation = (Eigen::AngleAxisd(yaw, Vec3::UnitY()) * Eigen::AngleAxisd(pitch, Vec3::UnitX()) *
                Eigen::AngleAxisd(roll, Vec3::UnitZ()))
                   .toRotationMatrix();
  p.translation = t;
  return p;
}

double HeadPose::yaw() const { return std::atan2(rotation(0, 2), rotation(2, 2)); }
double HeadPose::pitch() const {
  return std::atan2(-rotation(1, 2), std::hypot(rotation(0, 2), rotation(2, 2)));
}
double HeadPose::roll() const { return std::atan2(rotation(1, 0), rotation(1, 1)); }

void HeadPose::validate(double tol) const {
  require(rotation.allFinite() && translation.allFinite(), "pose has non-finite entries");
  require((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol,
          "rotation is not orthonormal");
  require(std::abs(rotation.determinant() - 1.0) <= tol, "rotation determinant is not 1");
}

Camera Camera::for_image(int image_size) {
  Camera c;
  c.scale = 0.3 * image_size;
  c.principal = Vec2(image_size / 2.0, image_size * 0.38);
  return c;
}

Mat3 rotation_from_axis_angle(const Vec3& w) {
  double angle = w.norm();
  if (angle < 1e-14) return orthonormalize(Mat3::Identity() + skew(w));
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return r;
}

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

FaceShape assemble_shape(const MorphableBasis& basis, const IdentityCoeffs& alpha, const ExpressionCoeffs& beta) {
  require(alpha.values.size() == basis.identity_dim(), "identity coefficient dimension mismatch");
  require(beta.values.size() == basis.expression_dim(), "expression coefficient dimension mismatch");
  Eigen::VectorXd flat = basis.identity_basis * alpha.values + basis.expression_basis * beta.values;
  FaceShape shape = basis.mean_shape;
  shape += Eigen::Map<const FaceShape>(flat.data(), basis.vertex_count(), 3);
  return shape;
}

FaceShape apply_pose(const FaceShape& shape, const HeadPose& pose) {
  pose.validate();
  FaceShape out = shape * pose.rotation.transpose();
  out.rowwise() += pose.translation.transpose();
  return out;
}

Landmarks2D project_landmarks(const FaceShape& shape, const MorphableBasis& basis, const Camera& camera) {
  require(camera.scale > 0.0 && std::isfinite(camera.scale), "camera scale must be positive");
  Landmarks2D out;
  out.points.resize(basis.landmark_count(), 2);
  for (int k = 0; k < basis.landmark_count(); ++k) {
    int v = basis.landmark_indices[static_cast<size_t>(k)];
    require(v < shape.rows(), "shape has fewer vertices than the basis");
    out.points(k, 0) = camera.scale * shape(v, 0) + camera.principal.x();
    out.points(k, 1) = -camera.scale * shape(v, 1) + camera.principal.y();
  }
  return out;
}

double landmark_loss(const Landmarks2D& pred, const Landmarks2D& gt, const std::vector<double>& weights) {
  require(pred.count() == gt.count(), "landmark count mismatch");
  require(static_cast<int>(weights.size()) == pred.count(), "landmark weight count mismatch");
  require(pred.count() > 0, "no landmarks");
  double acc = 0.0;
  for (int n = 0; n < pred.count(); ++n) {
    require(weights[static_cast<size_t>(n)] > 0.0, "landmark weights must be positive");
    acc += weights[static_cast<size_t>(n)] * (pred.points.row(n) - gt.points.row(n)).squaredNorm();
  }
  return acc / pred.count();
}

Landmarks2D render_landmarks(const MorphableBasis& basis, const IdentityCoeffs& alpha, const ExpressionCoeffs& beta,
                             const HeadPose& pose, const Camera& camera) {
  return project_landmarks(apply_pose(assemble_shape(basis, alpha, beta), pose), basis, camera);
}

LandmarkLossGradient landmark_loss_gradient(const MorphableBasis& basis, const IdentityCoeffs& alpha,
                                            const ExpressionCoeffs& beta, const HeadPose& pose,
                                            const Camera& camera, const Landmarks2D& target) {
  const int K = basis.landmark_count();
  require(target.count() == K, "landmark count mismatch");
  LandmarkLossGradient g;
  g.d_alpha = Eigen::VectorXd::Zero(basis.identity_dim());
  g.d_beta = Eigen::VectorXd::Zero(basis.expression_dim());
  for (int n = 0; n < K; ++n) {
    const int v = basis.landmark_indices[static_cast<size_t>(n)];
    const double w = basis.landmark_weights[static_cast<size_t>(n)];
    Vec3 vert = basis.mean_shape.row(v).transpose() + basis.identity_basis.middleRows(3 * v, 3) * alpha.values +
                basis.expression_basis.middleRows(3 * v, 3) * beta.values;
    Vec3 rotated = pose.rotation * vert;
    Vec3 posed = rotated + pose.translation;
    Vec2 img(camera.scale * posed.x() + camera.principal.x(), -camera.scale * posed.y() + camera.principal.y());
    Vec2 e = img - target.points.row(n).transpose();
    g.loss += w * e.squaredNorm();
    Vec2 de = (2.0 * w / K) * e;
    Vec3 dp(camera.scale * de.x(), -camera.scale * de.y(), 0.0);
    g.d_translation += dp;
    g.d_rotation += rotated.cross(dp);
    Vec3 dv = pose.rotation.transpose() * dp;
    g.d_alpha += basis.identity_basis.middleRows(3 * v, 3).transpose() * dv;
    g.d_beta += basis.expression_basis.middleRows(3 * v, 3).transpose() * dv;
  }
  g.loss /= K;
  return g;
}

// ---------------------------------------------------------------------------
// Landmark CSV

void write_landmarks_csv(const std::filesystem::path& path, const std::vector<Landmarks2D>& frames) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "frame_index,point_index,x,y\n";
  char buf[96];
  for (size_t f = 0; f < frames.size(); ++f)
    for (int k = 0; k < frames[f].count(); ++k) {
      std::snprintf(buf, sizeof(buf), "%zu,%d,%.9g,%.9g\n", f, k, frames[f].points(k, 0), frames[f].points(k, 1));
      out << buf;
    }
}

std::vector<Landmarks2D> read_landmarks_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("frame_index", 0) != 0) throw IoError("landmark CSV lacks header: " + path.string());
  std::vector<std::vector<std::pair<int, Vec2>>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> cols;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
    if (cols.size() != 4) throw IoError("malformed landmark row in " + path.string());
    size_t f = std::stoul(cols[0]);
    if (rows.size() <= f) rows.resize(f + 1);
    rows[f].emplace_back(std::stoi(cols[1]), Vec2(std::stod(cols[2]), std::stod(cols[3])));
  }
  std::vector<Landmarks2D> frames(rows.size());
  for (size_t f = 0; f < rows.size(); ++f) {
    frames[f].points.resize(static_cast<long>(rows[f].size()), 2);
    for (const auto& [k, p] : rows[f]) {
      if (k < 0 || k >= static_cast<int>(rows[f].size())) throw IoError("landmark index out of range in CSV");
      frames[f].points.row(k) = p.transpose();
    }
  }
  return frames;
}

}  // namespace opt::face3d
