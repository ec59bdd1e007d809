// Trajectory metrics: ATE RMSE after closed-form rigid alignment, and
// per-frame relative pose error, both over timestamp-associated pose pairs.
// Trajectories hold camera-to-world poses.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "dyvo/geometry.hpp"
#include "dyvo/sequence_io.hpp"

namespace dyvo {

struct EvalReport {
  double ate_rmse = 0.0;    // meters
  double rpe_t_rmse = 0.0;  // meters per frame step
  double rpe_r_rmse = 0.0;  // degrees per frame step
  int n_matched = 0;
  Pose alignment;  // maps estimated positions onto ground truth
};

namespace detail {

/// Time-associated pose pairs, ordered by estimate timestamp.
inline std::vector<std::pair<Pose, Pose>> matched_poses(const Trajectory& est,
                                                        const Trajectory& gt,
                                                        double tolerance) {
  std::vector<std::pair<Pose, Pose>> out;
  for (const auto& [i, j] : associate(est.timestamps, gt.timestamps, tolerance))
    out.emplace_back(est.poses[i], gt.poses[j]);
  return out;
}

}  // namespace detail

/// Least-squares rigid alignment (Umeyama, scale = 1) of estimated camera
/// positions onto ground truth. Needs at least 3 associated pairs.
inline Pose align_rigid(const Trajectory& est, const Trajectory& gt, double tolerance = 0.02) {
  const auto pairs = detail::matched_poses(est, gt, tolerance);
  if (pairs.size() < 3)
    throw std::invalid_argument("eval: need at least 3 associated pose pairs, have " +
                                std::to_string(pairs.size()));
  Vec3 me = Vec3::Zero(), mg = Vec3::Zero();
  for (const auto& [e, g] : pairs) {
    me += e.t();
    mg += g.t();
  }
  me /= static_cast<double>(pairs.size());
  mg /= static_cast<double>(pairs.size());
  Mat3 h = Mat3::Zero();
  for (const auto& [e, g] : pairs) h += (e.t() - me) * (g.t() - mg).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return Pose(r, mg - r * me);
}

inline double ate_rmse(const Trajectory& est, const Trajectory& gt, double tolerance = 0.02) {
  const Pose g = align_rigid(est, gt, tolerance);
  const auto pairs = detail::matched_poses(est, gt, tolerance);
  double sq = 0;
  for (const auto& [e, t] : pairs) sq += (g * e.t() - t.t()).squaredNorm();
  return std::sqrt(sq / static_cast<double>(pairs.size()));
}

/// Relative pose error over a `delta`-frame step:
/// E_i = (gt_i^-1 gt_{i+d})^-1 (est_i^-1 est_{i+d}). Returns translational
/// RMSE in meters and rotational RMSE in degrees, per step.
inline std::pair<double, double> rpe(const Trajectory& est, const Trajectory& gt, int delta = 1,
                                     double tolerance = 0.02) {
  if (delta < 1) throw std::invalid_argument("eval: rpe delta must be >= 1");
  const auto pairs = detail::matched_poses(est, gt, tolerance);
  if (static_cast<int>(pairs.size()) < delta + 1)
    throw std::invalid_argument("eval: need at least delta+1 associated pairs");
  double sq_t = 0, sq_r = 0;
  const size_t n = pairs.size() - delta;
  for (size_t i = 0; i < n; ++i) {
    const Pose rel_gt = pairs[i].second.inverse() * pairs[i + delta].second;
    const Pose rel_est = pairs[i].first.inverse() * pairs[i + delta].first;
    const Pose err = rel_gt.inverse() * rel_est;
    sq_t += err.t().squaredNorm();
    const double deg = err.angle() * 180.0 / M_PI;
    sq_r += deg * deg;
  }
  return {std::sqrt(sq_t / static_cast<double>(n)), std::sqrt(sq_r / static_cast<double>(n))};
}

inline EvalReport evaluate(const Trajectory& est, const Trajectory& gt, int delta = 1,
                           double tolerance = 0.02) {
  EvalReport rep;
  rep.alignment = align_rigid(est, gt, tolerance);
  rep.n_matched = static_cast<int>(detail::matched_poses(est, gt, tolerance).size());
  rep.ate_rmse = ate_rmse(est, gt, tolerance);
  std::tie(rep.rpe_t_rmse, rep.rpe_r_rmse) = rpe(est, gt, delta, tolerance);
  return rep;
}

inline std::string format_report(const EvalReport& rep) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "ATE_RMSE m %.6f\nRPE_T m/frame %.6f\nRPE_R deg/frame %.6f\nmatched %d\n",
                rep.ate_rmse, rep.rpe_t_rmse, rep.rpe_r_rmse, rep.n_matched);
  return buf;
}

}  // namespace dyvo
