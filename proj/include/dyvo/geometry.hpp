// Rigid transforms, pinhole camera model, quaternion conversions.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace dyvo {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Sub-pixel image coordinates. Integer coordinates address pixel centers.
struct Pixel {
  double u = 0.0;
  double v = 0.0;
};

inline double orthonormality_error(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

/// Nearest proper rotation in the Frobenius sense.
inline Mat3 orthonormalize(const Mat3& r) {
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

inline Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return s;
}

/// Rodrigues formula, exp of so(3).
inline Mat3 rotation_exp(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(w);
  const Vec3 a = w / theta;
  const Mat3 k = skew(a);
  return Mat3::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * k * k;
}

/// Rotation angle in [0, pi].
inline double rotation_angle(const Mat3& r) {
  // atan2 of (sin, cos) keeps full precision near the identity, where the
  // plain arccos-of-trace form loses half the significant digits.
  const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double s =
      0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)).norm();
  return std::atan2(s, c);
}

/// Log of SO(3); inverse of rotation_exp up to the angle-pi ambiguity.
inline Vec3 rotation_log(const Mat3& r) {
  const double theta = rotation_angle(r);
  if (theta < 1e-9) {
    return 0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  }
  if (theta > M_PI - 1e-6) {
    // Near pi the antisymmetric part vanishes; recover the axis from R + I.
    Mat3 b = 0.5 * (r + Mat3::Identity());
    Vec3 a(std::sqrt(std::max(0.0, b(0, 0))), std::sqrt(std::max(0.0, b(1, 1))),
           std::sqrt(std::max(0.0, b(2, 2))));
    int k = 0;
    if (a.y() > a.x()) k = 1;
    if (a.z() > a[k]) k = 2;
    if (a[k] < 1e-12) return Vec3::Zero();
    if (k == 0) {
      a.y() = b(0, 1) / a.x();
      a.z() = b(0, 2) / a.x();
    } else if (k == 1) {
      a.x() = b(0, 1) / a.y();
      a.z() = b(1, 2) / a.y();
    } else {
      a.x() = b(0, 2) / a.z();
      a.y() = b(1, 2) / a.z();
    }
    return theta * a.normalized();
  }
  const Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return v * (theta / (2.0 * std::sin(theta)));
}

/// Rigid SE(3) transform, applied as p' = R p + t.
/// The rotation stays orthonormal with positive determinant across every
/// construction and composition; drift beyond 1e-12 triggers re-projection
/// onto SO(3).
class Pose {
 public:
  Pose() : r_(Mat3::Identity()), t_(Vec3::Zero()) {}

  Pose(const Mat3& rotation, const Vec3& translation) : r_(rotation), t_(translation) {
    if (orthonormality_error(r_) > 1e-12 || r_.determinant() < 0.0) r_ = orthonormalize(r_);
  }

  static Pose translation(const Vec3& t) { return Pose(Mat3::Identity(), t); }

  static Pose rotation(const Vec3& axis_angle) {
    return Pose(rotation_exp(axis_angle), Vec3::Zero());
  }

  const Mat3& r() const { return r_; }
  const Vec3& t() const { return t_; }

  Vec3 operator*(const Vec3& p) const { return r_ * p + t_; }

  /// Composition in matrix order: (a * b)(p) = a(b(p)).
  Pose operator*(const Pose& rhs) const { return Pose(r_ * rhs.r_, r_ * rhs.t_ + t_); }

  Pose inverse() const {
    Mat3 rt = r_.transpose();
    return Pose(rt, -(rt * t_));
  }

  double angle() const { return rotation_angle(r_); }

 private:
  Mat3 r_;
  Vec3 t_;
};

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }

/// Pinhole model plus the sensor-unit scale of the paired depth stream.
struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
  double depth_scale = 5000.0;  // raw units per meter

  bool valid() const {
    return fx > 0.0 && fy > 0.0 && width > 0 && height > 0 && cx > 0.0 && cx < width &&
           cy > 0.0 && cy < height && depth_scale > 0.0;
  }
};

/// Camera-frame point to pixel. Fails for points at or behind the camera
/// plane; does not clip to the image rectangle.
inline std::optional<Pixel> project(const Vec3& p_cam, const Intrinsics& k) {
  if (!(p_cam.z() > 0.0)) return std::nullopt;
  return Pixel{k.fx * p_cam.x() / p_cam.z() + k.cx, k.fy * p_cam.y() / p_cam.z() + k.cy};
}

/// Pixel plus raw depth to camera-frame point. Zero/negative raw depth means
/// no measurement.
inline std::optional<Vec3> back_project(const Pixel& px, double raw_depth,
                                        const Intrinsics& k) {
  if (!(raw_depth > 0.0)) return std::nullopt;
  const double z = raw_depth / k.depth_scale;
  return Vec3((px.u - k.cx) / k.fx * z, (px.v - k.cy) / k.fy * z, z);
}

/// TUM-style 7-tuple (tx ty tz qx qy qz qw) to Pose. The quaternion is
/// normalized first; a zero quaternion is rejected.
inline Pose pose_from_quaternion(double tx, double ty, double tz, double qx, double qy,
                                 double qz, double qw) {
  const double n = std::sqrt(qx * qx + qy * qy + qz * qz + qw * qw);
  if (n < 1e-12) throw std::invalid_argument("pose_from_quaternion: zero quaternion");
  Eigen::Quaterniond q(qw / n, qx / n, qy / n, qz / n);
  return Pose(q.toRotationMatrix(), Vec3(tx, ty, tz));
}

/// Pose to (tx ty tz qx qy qz qw). Inverse of pose_from_quaternion up to
/// quaternion sign.
inline std::array<double, 7> pose_to_quaternion(const Pose& pose) {
  Eigen::Quaterniond q(pose.r());
  q.normalize();
  return {pose.t().x(), pose.t().y(), pose.t().z(), q.x(), q.y(), q.z(), q.w()};
}

}  // namespace dyvo
