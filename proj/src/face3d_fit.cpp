#include <cmath>

#include "opt/error.hpp"
#include "opt/face3d.hpp"

namespace opt::face3d {

namespace {

// Unknowns packed as [α?][β?][δ rotation (3)][T_x, T_y]. Depth translation has
// no effect under weak perspective and stays at its initial value.
struct Layout {
  bool fit_alpha = true;
  bool fit_beta = true;
  int n_alpha = 0, n_beta = 0;
  int alpha_off() const { return 0; }
  int beta_off() const { return n_alpha; }
  int rot_off() const { return n_alpha + n_beta; }
  int trans_off() const { return rot_off() + 3; }
  int size() const { return trans_off() + 2; }
};

struct State {
  IdentityCoeffs alpha;
  ExpressionCoeffs beta;
  HeadPose pose;
};

double regularizer(const State& s, const FitConfig& cfg, const Layout& lay) {
  double r = 0.0;
  if (lay.fit_alpha) r += s.alpha.values.squaredNorm();
  if (lay.fit_beta) r += s.beta.values.squaredNorm();
  return cfg.regularizer * r;
}

// Residual vector and Jacobian. Data rows: sqrt(ω/K)·(projection − target).
void linearize(const MorphableBasis& b, const State& s, const Camera& cam, const Landmarks2D& target,
               const FitConfig& cfg, const Layout& lay, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
  const int K = b.landmark_count();
  const int n_reg = lay.n_alpha + lay.n_beta;
  r.resize(2 * K + n_reg);
  if (J) J->setZero(2 * K + n_reg, lay.size());
  const Mat3& R = s.pose.rotation;
  for (int n = 0; n < K; ++n) {
    const int v = b.landmark_indices[static_cast<size_t>(n)];
    const double sw = std::sqrt(b.landmark_weights[static_cast<size_t>(n)] / K);
    Vec3 vert = b.mean_shape.row(v).transpose() + b.identity_basis.middleRows(3 * v, 3) * s.alpha.values +
                b.expression_basis.middleRows(3 * v, 3) * s.beta.values;
    Vec3 rot = R * vert;
    Vec3 p = rot + s.pose.translation;
    r(2 * n) = sw * (cam.scale * p.x() + cam.principal.x() - target.points(n, 0));
    r(2 * n + 1) = sw * (-cam.scale * p.y() + cam.principal.y() - target.points(n, 1));
    if (!J) continue;
    // d(image)/d(p) = sw·s·[[1,0,0],[0,-1,0]]
    Eigen::Matrix<double, 2, 3> P;
    P << sw * cam.scale, 0, 0, 0, -sw * cam.scale, 0;
    Eigen::Matrix<double, 2, 3> PR = P * R;
    if (lay.fit_alpha) J->block(2 * n, lay.alpha_off(), 2, lay.n_alpha) = PR * b.identity_basis.middleRows(3 * v, 3);
    if (lay.fit_beta) J->block(2 * n, lay.beta_off(), 2, lay.n_beta) = PR * b.expression_basis.middleRows(3 * v, 3);
    Mat3 neg_skew;
    neg_skew << 0, rot.z(), -rot.y(), -rot.z(), 0, rot.x(), rot.y(), -rot.x(), 0;  // −[Rv]×
    J->block(2 * n, lay.rot_off(), 2, 3) = P * neg_skew;
    J->block(2 * n, lay.trans_off(), 2, 2) = P.leftCols(2);
  }
  const double sl = std::sqrt(cfg.regularizer);
  int row = 2 * K;
  if (lay.fit_alpha) {
    r.segment(row, lay.n_alpha) = sl * s.alpha.values;
    if (J) J->block(row, lay.alpha_off(), lay.n_alpha, lay.n_alpha).diagonal().setConstant(sl);
    row += lay.n_alpha;
  }
  if (lay.fit_beta) {
    r.segment(row, lay.n_beta) = sl * s.beta.values;
    if (J) J->block(row, lay.beta_off(), lay.n_beta, lay.n_beta).diagonal().setConstant(sl);
  }
}

State step(const State& s, const Eigen::VectorXd& d, const Layout& lay, double bound) {
  State out = s;
  if (lay.fit_alpha)
    out.alpha.values = (s.alpha.values + d.segment(lay.alpha_off(), lay.n_alpha)).cwiseMax(-bound).cwiseMin(bound);
  if (lay.fit_beta)
    out.beta.values = (s.beta.values + d.segment(lay.beta_off(), lay.n_beta)).cwiseMax(-bound).cwiseMin(bound);
  out.pose.rotation = orthonormalize(rotation_from_axis_angle(d.segment<3>(lay.rot_off())) * s.pose.rotation);
  out.pose.translation.x() += d(lay.trans_off());
  out.pose.translation.y() += d(lay.trans_off() + 1);
  return out;
}

double objective(const MorphableBasis& b, const State& s, const FitConfig& cfg, const Landmarks2D& target,
                 const Layout& lay) {
  Eigen::VectorXd r;
  linearize(b, s, cfg.camera, target, cfg, lay, r, nullptr);
  return r.squaredNorm();
}

}  // namespace

FitResult fit_params(const Landmarks2D& target, const MorphableBasis& basis, const FitConfig& cfg) {
  basis.validate();
  require(target.count() == basis.landmark_count(), "target landmark count does not match basis");
  require(target.points.allFinite(), "target landmarks must be finite");
  require(cfg.camera.scale > 0.0, "camera scale must be positive");
  require(cfg.max_iterations > 0 && cfg.regularizer >= 0.0, "invalid fit configuration");

  Layout lay;
  lay.fit_alpha = !cfg.known_identity.has_value();
  lay.fit_beta = !cfg.known_expression.has_value();
  lay.n_alpha = lay.fit_alpha ? basis.identity_dim() : 0;
  lay.n_beta = lay.fit_beta ? basis.expression_dim() : 0;

  State s;
  s.alpha.values = cfg.known_identity ? cfg.known_identity->values : Eigen::VectorXd::Zero(basis.identity_dim());
  s.beta.values = cfg.known_expression ? cfg.known_expression->values : Eigen::VectorXd::Zero(basis.expression_dim());
  if (cfg.initial_pose) {
    s.pose = *cfg.initial_pose;
  } else {
    // Align centroids so the first linearization is near the target.
    Landmarks2D init = render_landmarks(basis, s.alpha, s.beta, HeadPose{}, cfg.camera);
    Vec2 shift = (target.points.colwise().mean() - init.points.colwise().mean()).transpose();
    s.pose.translation = Vec3(shift.x() / cfg.camera.scale, -shift.y() / cfg.camera.scale, 0.0);
  }

  FitResult res;
  double cost = objective(basis, s, cfg, target, lay);
  int it = 0;
  if (cfg.method == FitMethod::kLevenbergMarquardt) {
    double mu = 1e-3;
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    while (it < cfg.max_iterations) {
      linearize(basis, s, cfg.camera, target, cfg, lay, r, &J);
      Eigen::MatrixXd H = J.transpose() * J;
      Eigen::VectorXd g = J.transpose() * r;
      bool accepted = false;
      while (it < cfg.max_iterations && !accepted) {
        ++it;
        Eigen::MatrixXd A = H;
        A.diagonal() += mu * (H.diagonal().array() + 1e-9).matrix();
        Eigen::VectorXd d = -A.ldlt().solve(g);
        State cand = step(s, d, lay, cfg.coeff_bound);
        double c = objective(basis, cand, cfg, target, lay);
        if (std::isfinite(c) && c < cost) {
          double drop = cost - c;
          s = cand;
          cost = c;
          mu = std::max(mu / 3.0, 1e-12);
          accepted = true;
          if (drop <= cfg.tolerance * std::max(cost, 1e-300)) res.converged = true;
        } else {
          mu *= 4.0;
          if (mu > 1e16) res.converged = true;
        }
        if (res.converged) break;
      }
      if (res.converged || cost < 1e-28) {
        res.converged = true;
        break;
      }
    }
  } else {
    double step_len = 1e-3;
    while (it < cfg.max_iterations) {
      ++it;
      Eigen::VectorXd r;
      Eigen::MatrixXd J;
      linearize(basis, s, cfg.camera, target, cfg, lay, r, &J);
      Eigen::VectorXd g = 2.0 * J.transpose() * r;
      double gg = g.squaredNorm();
      if (gg < 1e-24) {
        res.converged = true;
        break;
      }
      // Armijo backtracking.
      double t = step_len * 4.0;
      bool moved = false;
      for (int k = 0; k < 40; ++k, t *= 0.5) {
        State cand = step(s, -t * g, lay, cfg.coeff_bound);
        double c = objective(basis, cand, cfg, target, lay);
        if (std::isfinite(c) && c <= cost - 1e-4 * t * gg) {
          bool small = cost - c <= cfg.tolerance * std::max(cost, 1e-300);
          s = cand;
          cost = c;
          step_len = t;
          moved = true;
          if (small) res.converged = true;
          break;
        }
      }
      if (!moved || res.converged) {
        res.converged = true;
        break;
      }
    }
  }

  res.alpha = s.alpha;
  res.beta = s.beta;
  res.pose = s.pose;
  res.camera = cfg.camera;
  res.iterations = it;
  res.objective = cost;
  res.landmark_loss = cost - regularizer(s, cfg, lay);
  res.ok = std::isfinite(cost) && s.pose.rotation.allFinite();
  return res;
}

}  // namespace opt::face3d
