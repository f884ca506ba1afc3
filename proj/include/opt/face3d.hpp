#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace opt::face3d {

inline constexpr int kIdentityDim = 80;
inline constexpr int kExpressionDim = 64;
inline constexpr int kLandmarkCount = 68;
inline constexpr double kHeavyWeight = 20.0;  // inner mouth and nose points
inline constexpr double kDefaultCoeffBound = 3.0;

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using FaceShape = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;  // V×3
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;    // K×2

// Linear face model. Basis matrices are stored as (3V)×D with row 3·v + axis,
// i.e. a row-major flattening of the V×3×D tensor.
struct MorphableBasis {
  FaceShape mean_shape;
  Eigen::MatrixXd identity_basis;
  Eigen::MatrixXd expression_basis;
  std::vector<int> landmark_indices;
  std::vector<double> landmark_weights;
  uint64_t seed = 0;

  int vertex_count() const { return static_cast<int>(mean_shape.rows()); }
  int landmark_count() const { return static_cast<int>(landmark_indices.size()); }
  int identity_dim() const { return static_cast<int>(identity_basis.cols()); }
  int expression_dim() const { return static_cast<int>(expression_basis.cols()); }
  void validate() const;
};

struct IdentityCoeffs {
  Eigen::VectorXd values = Eigen::VectorXd::Zero(kIdentityDim);
  void validate(double bound = kDefaultCoeffBound) const;
};

struct ExpressionCoeffs {
  Eigen::VectorXd values = Eigen::VectorXd::Zero(kExpressionDim);
  void validate(double bound = kDefaultCoeffBound) const;
};

struct HeadPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  // Rotation composed as R = Ry(yaw)·Rx(pitch)·Rz(roll), angles in radians.
  static HeadPose from_euler(double yaw, double pitch, double roll, const Vec3& t = Vec3::Zero());
  double yaw() const;
  double pitch() const;
  double roll() const;
  void validate(double tol = 1e-6) const;
};

// Weak perspective: (s·x + cx, −s·y + cy).
struct Camera {
  double scale = 19.2;
  Vec2 principal{32.0, 32.0};
  static Camera for_image(int image_size);
};

struct Landmarks2D {
  Points2 points;
  int count() const { return static_cast<int>(points.rows()); }
};

Mat3 rotation_from_axis_angle(const Vec3& w);
Mat3 orthonormalize(const Mat3& m);
// Geodesic angle between two rotations, radians.
double rotation_angle_between(const Mat3& a, const Mat3& b);

FaceShape assemble_shape(const MorphableBasis& basis, const IdentityCoeffs& alpha, const ExpressionCoeffs& beta);
FaceShape apply_pose(const FaceShape& shape, const HeadPose& pose);
Landmarks2D project_landmarks(const FaceShape& shape, const MorphableBasis& basis, const Camera& camera);
double landmark_loss(const Landmarks2D& pred, const Landmarks2D& gt, const std::vector<double>& weights);

// Convenience: landmarks of the posed, projected model.
Landmarks2D render_landmarks(const MorphableBasis& basis, const IdentityCoeffs& alpha, const ExpressionCoeffs& beta,
                             const HeadPose& pose, const Camera& camera);

// Value and analytic gradient of landmark_loss(render_landmarks(...), target)
// with respect to α, β, T and the left-multiplied rotation increment
// R ← exp([δ]×)·R evaluated at δ = 0.
struct LandmarkLossGradient {
  double loss = 0.0;
  Eigen::VectorXd d_alpha;
  Eigen::VectorXd d_beta;
  Vec3 d_rotation = Vec3::Zero();
  Vec3 d_translation = Vec3::Zero();
};
LandmarkLossGradient landmark_loss_gradient(const MorphableBasis& basis, const IdentityCoeffs& alpha,
                                            const ExpressionCoeffs& beta, const HeadPose& pose,
                                            const Camera& camera, const Landmarks2D& target);

// ---------------------------------------------------------------------------
// Fitting

enum class FitMethod { kLevenbergMarquardt, kGradientDescent };

struct FitConfig {
  int max_iterations = 500;
  double regularizer = 1e-3;  // λ_r on ‖α‖² + ‖β‖²
  double coeff_bound = kDefaultCoeffBound;
  double tolerance = 1e-12;   // relative cost decrease that counts as converged
  FitMethod method = FitMethod::kLevenbergMarquardt;
  Camera camera;
  // When set, α is held at this value (identity known from the source face).
  std::optional<IdentityCoeffs> known_identity;
  // When set, β is held at this value and only pose (and α if free) are fitted.
  std::optional<ExpressionCoeffs> known_expression;
  std::optional<HeadPose> initial_pose;
};

struct FitResult {
  IdentityCoeffs alpha;
  ExpressionCoeffs beta;
  HeadPose pose;
  Camera camera;
  double landmark_loss = 0.0;  // data term only
  double objective = 0.0;      // data term + regularizer
  int iterations = 0;
  bool converged = false;
  bool ok = true;              // false when the objective became non-finite
};

FitResult fit_params(const Landmarks2D& target, const MorphableBasis& basis, const FitConfig& config);

// ---------------------------------------------------------------------------
// Synthetic basis and serialization

// Deterministic face-like model with the 68-point landmark convention:
// jaw 0–16, brows 17–26, nose 27–35, eyes 36–47, outer lips 48–59, inner lips 60–67.
MorphableBasis make_synthetic_basis(uint64_t seed = 7);

// Expression components driven by speech (jaw, lips).
inline constexpr int kMouthComponents = 8;
// Components carrying broad upper-face expression (brows, eyes, cheeks).
inline constexpr int kUpperFaceComponents = 8;

void save_basis(const std::filesystem::path& path, const MorphableBasis& basis);
MorphableBasis load_basis(const std::filesystem::path& path);

// CSV rows: frame_index,point_index,x,y
void write_landmarks_csv(const std::filesystem::path& path, const std::vector<Landmarks2D>& frames);
std::vector<Landmarks2D> read_landmarks_csv(const std::filesystem::path& path);

}  // namespace opt::face3d
