// Pose-from-points solvers: closed-form EPnP, a seeded RANSAC wrapper, and
// Huber-weighted Gauss-Newton refinement. All entry points are pure and
// deterministic; RANSAC's randomness comes only from the caller's seed.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "dyvo/geometry.hpp"

namespace dyvo {

struct Correspondence {
  Vec3 world;
  Pixel px;
};

struct PnPConfig {
  int ransac_iters = 300;
  double inlier_px = 2.5;
  int min_inliers = 15;
  int refine_iters = 10;
  uint64_t seed = 0;

  void validate() const {
    if (ransac_iters <= 0 || inlier_px <= 0 || min_inliers <= 0 || refine_iters <= 0)
      throw std::invalid_argument("pnp: config values must be positive");
  }
};

namespace detail {

inline double reprojection_error_sq(const Pose& pose, const Correspondence& c,
                                    const Intrinsics& k) {
  const auto px = project(pose * c.world, k);
  if (!px) return std::numeric_limits<double>::infinity();
  const double du = px->u - c.px.u, dv = px->v - c.px.v;
  return du * du + dv * dv;
}

// ---- EPnP internals -------------------------------------------------------

struct EpnpWork {
  Eigen::Matrix<double, 4, 3> cw;              // world control points, rows
  std::vector<Eigen::Vector4d> alphas;         // barycentric per input point
  std::array<Eigen::Matrix<double, 12, 1>, 4> v;  // null-space basis, small->large
  Eigen::Matrix<double, 6, 10> L;
  Eigen::Matrix<double, 6, 1> rho;
};

inline Eigen::Matrix<double, 6, 10> build_l(const std::array<Eigen::Matrix<double, 12, 1>, 4>& v) {
  // Column order: b11 b12 b22 b13 b23 b33 b14 b24 b34 b44.
  constexpr int pairs[6][2] = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  Eigen::Matrix<double, 6, 10> L;
  for (int r = 0; r < 6; ++r) {
    const int i = pairs[r][0], j = pairs[r][1];
    Vec3 dv[4];
    for (int k = 0; k < 4; ++k)
      dv[k] = v[k].segment<3>(3 * i) - v[k].segment<3>(3 * j);
    L(r, 0) = dv[0].dot(dv[0]);
    L(r, 1) = 2 * dv[0].dot(dv[1]);
    L(r, 2) = dv[1].dot(dv[1]);
    L(r, 3) = 2 * dv[0].dot(dv[2]);
    L(r, 4) = 2 * dv[1].dot(dv[2]);
    L(r, 5) = dv[2].dot(dv[2]);
    L(r, 6) = 2 * dv[0].dot(dv[3]);
    L(r, 7) = 2 * dv[1].dot(dv[3]);
    L(r, 8) = 2 * dv[2].dot(dv[3]);
    L(r, 9) = dv[3].dot(dv[3]);
  }
  return L;
}

inline Eigen::Vector4d betas_case1(const EpnpWork& w) {
  // Unknowns [b11 b12 b13 b14]: columns 0, 1, 3, 6.
  Eigen::Matrix<double, 6, 4> A;
  A.col(0) = w.L.col(0);
  A.col(1) = w.L.col(1);
  A.col(2) = w.L.col(3);
  A.col(3) = w.L.col(6);
  const Eigen::Vector4d b = A.colPivHouseholderQr().solve(w.rho);
  Eigen::Vector4d betas = Eigen::Vector4d::Zero();
  betas(0) = std::sqrt(std::abs(b(0)));
  if (betas(0) > 0) {
    const double sign = b(0) < 0 ? -1.0 : 1.0;
    for (int i = 1; i < 4; ++i) betas(i) = sign * b(i) / betas(0);
  }
  return betas;
}

inline Eigen::Vector4d betas_case2(const EpnpWork& w) {
  // Unknowns [b11 b12 b22]: columns 0, 1, 2.
  Eigen::Matrix<double, 6, 3> A = w.L.leftCols<3>();
  const Eigen::Vector3d b = A.colPivHouseholderQr().solve(w.rho);
  Eigen::Vector4d betas = Eigen::Vector4d::Zero();
  if (b(0) < 0) {
    betas(0) = std::sqrt(-b(0));
    betas(1) = b(2) < 0 ? std::sqrt(-b(2)) : 0.0;
  } else {
    betas(0) = std::sqrt(b(0));
    betas(1) = b(2) > 0 ? std::sqrt(b(2)) : 0.0;
  }
  if (b(1) < 0) betas(0) = -betas(0);
  return betas;
}

inline Eigen::Vector4d betas_case3(const EpnpWork& w) {
  // Unknowns [b11 b12 b22 b13 b23]: columns 0..4.
  Eigen::Matrix<double, 6, 5> A = w.L.leftCols<5>();
  const Eigen::Matrix<double, 5, 1> b = A.colPivHouseholderQr().solve(w.rho);
  Eigen::Vector4d betas = Eigen::Vector4d::Zero();
  if (b(0) < 0) {
    betas(0) = std::sqrt(-b(0));
    betas(1) = b(2) < 0 ? std::sqrt(-b(2)) : 0.0;
  } else {
    betas(0) = std::sqrt(b(0));
    betas(1) = b(2) > 0 ? std::sqrt(b(2)) : 0.0;
  }
  if (b(1) < 0) betas(0) = -betas(0);
  betas(2) = betas(0) != 0 ? b(3) / betas(0) : 0.0;
  return betas;
}

/// Gauss-Newton on the control-point distance residuals.
inline void refine_betas(const EpnpWork& w, Eigen::Vector4d& betas) {
  if (!betas.allFinite()) return;
  for (int it = 0; it < 5; ++it) {
    Eigen::Matrix<double, 6, 4> J;
    Eigen::Matrix<double, 6, 1> r;
    for (int row = 0; row < 6; ++row) {
      // d(beta^T Q beta)/d(beta) with Q row-coded in L's column order.
      const auto& l = w.L.row(row);
      r(row) = l(0) * betas(0) * betas(0) + l(1) * betas(0) * betas(1) +
               l(2) * betas(1) * betas(1) + l(3) * betas(0) * betas(2) +
               l(4) * betas(1) * betas(2) + l(5) * betas(2) * betas(2) +
               l(6) * betas(0) * betas(3) + l(7) * betas(1) * betas(3) +
               l(8) * betas(2) * betas(3) + l(9) * betas(3) * betas(3) - w.rho(row);
      J(row, 0) = 2 * l(0) * betas(0) + l(1) * betas(1) + l(3) * betas(2) + l(6) * betas(3);
      J(row, 1) = l(1) * betas(0) + 2 * l(2) * betas(1) + l(4) * betas(2) + l(7) * betas(3);
      J(row, 2) = l(3) * betas(0) + l(4) * betas(1) + 2 * l(5) * betas(2) + l(8) * betas(3);
      J(row, 3) = l(6) * betas(0) + l(7) * betas(1) + l(8) * betas(2) + 2 * l(9) * betas(3);
    }
    betas -= (J.transpose() * J).ldlt().solve(J.transpose() * r);
  }
}

/// Camera-frame points from betas, then absolute orientation (Kabsch).
inline Pose pose_from_betas(const EpnpWork& w, const std::vector<Correspondence>& corr,
                            const Eigen::Vector4d& betas) {
  Eigen::Matrix<double, 12, 1> x = Eigen::Matrix<double, 12, 1>::Zero();
  for (int k = 0; k < 4; ++k) x += betas(k) * w.v[k];
  const size_t n = corr.size();
  std::vector<Vec3> pc(n);
  double zsum = 0;
  for (size_t i = 0; i < n; ++i) {
    Vec3 p = Vec3::Zero();
    for (int j = 0; j < 4; ++j) p += w.alphas[i](j) * x.segment<3>(3 * j);
    pc[i] = p;
    zsum += p.z();
  }
  if (zsum < 0)
    for (auto& p : pc) p = -p;

  Vec3 mw = Vec3::Zero(), mc = Vec3::Zero();
  for (size_t i = 0; i < n; ++i) {
    mw += corr[i].world;
    mc += pc[i];
  }
  mw /= static_cast<double>(n);
  mc /= static_cast<double>(n);
  Mat3 h = Mat3::Zero();
  for (size_t i = 0; i < n; ++i) h += (corr[i].world - mw) * (pc[i] - mc).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixV() * svd.matrixU().transpose();
  if (r.determinant() < 0) {
    Mat3 vv = svd.matrixV();
    vv.col(2) *= -1;
    r = vv * svd.matrixU().transpose();
  }
  return Pose(r, mc - r * mw);
}

}  // namespace detail

/// Closed-form EPnP. Returns nullopt when the input is degenerate: fewer
/// than 6 points, or world points that are (near-)collinear or coplanar.
inline std::optional<Pose> epnp(const std::vector<Correspondence>& corr, const Intrinsics& k) {
  const size_t n = corr.size();
  if (n < 6) return std::nullopt;

  detail::EpnpWork w;
  Vec3 c0 = Vec3::Zero();
  for (const auto& c : corr) c0 += c.world;
  c0 /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero();
  for (const auto& c : corr) {
    const Vec3 d = c.world - c0;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  const Vec3 eval = es.eigenvalues();  // ascending
  if (eval(2) <= 0 || eval(0) / eval(2) < 1e-10) return std::nullopt;
  w.cw.row(0) = c0.transpose();
  for (int i = 0; i < 3; ++i)
    w.cw.row(1 + i) =
        (c0 + std::sqrt(eval(i) / static_cast<double>(n)) * es.eigenvectors().col(i)).transpose();

  Eigen::Matrix4d A;
  for (int j = 0; j < 4; ++j) A.block<3, 1>(0, j) = w.cw.row(j).transpose();
  A.row(3).setOnes();
  const Eigen::Matrix4d Ainv = A.fullPivLu().inverse();
  w.alphas.resize(n);
  for (size_t i = 0; i < n; ++i)
    w.alphas[i] = Ainv * Eigen::Vector4d(corr[i].world.x(), corr[i].world.y(),
                                         corr[i].world.z(), 1.0);

  Eigen::MatrixXd m(2 * n, 12);
  for (size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) {
      const double a = w.alphas[i](j);
      m(2 * i, 3 * j) = a * k.fx;
      m(2 * i, 3 * j + 1) = 0.0;
      m(2 * i, 3 * j + 2) = a * (k.cx - corr[i].px.u);
      m(2 * i + 1, 3 * j) = 0.0;
      m(2 * i + 1, 3 * j + 1) = a * k.fy;
      m(2 * i + 1, 3 * j + 2) = a * (k.cy - corr[i].px.v);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 12, 12>> esm(m.transpose() * m);
  for (int i = 0; i < 4; ++i) w.v[i] = esm.eigenvectors().col(i);

  w.L = detail::build_l(w.v);
  constexpr int pairs[6][2] = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  for (int r = 0; r < 6; ++r)
    w.rho(r) = (w.cw.row(pairs[r][0]) - w.cw.row(pairs[r][1])).squaredNorm();

  std::optional<Pose> best;
  double best_err = std::numeric_limits<double>::infinity();
  for (auto* solver : {&detail::betas_case1, &detail::betas_case2, &detail::betas_case3}) {
    Eigen::Vector4d betas = (*solver)(w);
    detail::refine_betas(w, betas);
    const Pose pose = detail::pose_from_betas(w, corr, betas);
    double err = 0;
    for (const auto& c : corr) err += detail::reprojection_error_sq(pose, c, k);
    if (err < best_err) {
      best_err = err;
      best = pose;
    }
  }
  return best;
}

/// Residual of one correspondence under a world-to-camera pose, in pixels.
inline Eigen::Vector2d reprojection_residual(const Pose& pose, const Correspondence& c,
                                             const Intrinsics& k) {
  const Vec3 pc = pose * c.world;
  return {k.fx * pc.x() / pc.z() + k.cx - c.px.u, k.fy * pc.y() / pc.z() + k.cy - c.px.v};
}

/// Jacobian of the residual with respect to the left-multiplicative update
/// [delta_theta, delta_t]: R <- exp(dt)R, t <- exp(dt)t + dt.
inline Eigen::Matrix<double, 2, 6> reprojection_jacobian(const Pose& pose,
                                                         const Correspondence& c,
                                                         const Intrinsics& k) {
  const Vec3 p = pose * c.world;
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> dpi;
  dpi << k.fx * iz, 0, -k.fx * p.x() * iz * iz, 0, k.fy * iz, -k.fy * p.y() * iz * iz;
  Eigen::Matrix<double, 3, 6> dp;
  dp.leftCols<3>() = -skew(p);
  dp.rightCols<3>() = Mat3::Identity();
  return dpi * dp;
}

constexpr double kHuberDeltaPx = 2.45;

/// Huber-robustified cost over all correspondences. Points behind the
/// camera contribute nothing.
inline double reprojection_cost(const Pose& pose, const std::vector<Correspondence>& corr,
                                const Intrinsics& k, double delta = kHuberDeltaPx) {
  double cost = 0;
  for (const auto& c : corr) {
    if ((pose * c.world).z() <= 0) continue;
    const double e = reprojection_residual(pose, c, k).norm();
    cost += e <= delta ? 0.5 * e * e : delta * (e - 0.5 * delta);
  }
  return cost;
}

/// Motion-only Gauss-Newton with Huber weights. Returns the best pose seen;
/// stops early after 3 consecutive non-improving iterations.
inline Pose refine_pose(const Pose& initial, const std::vector<Correspondence>& corr,
                        const Intrinsics& k, int iters = 10) {
  Pose best = initial;
  double best_cost = reprojection_cost(best, corr, k);
  Pose cur = initial;
  int stale = 0;
  for (int it = 0; it < iters && stale < 3; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& c : corr) {
      if ((cur * c.world).z() <= 0) continue;
      const Eigen::Vector2d r = reprojection_residual(cur, c, k);
      const Eigen::Matrix<double, 2, 6> j = reprojection_jacobian(cur, c, k);
      const double e = r.norm();
      const double wgt = e <= kHuberDeltaPx ? 1.0 : kHuberDeltaPx / e;
      h += wgt * j.transpose() * j;
      g += wgt * j.transpose() * r;
    }
    const Eigen::Matrix<double, 6, 1> delta = h.ldlt().solve(-g);
    if (!delta.allFinite()) break;
    const Mat3 dr = rotation_exp(delta.head<3>());
    cur = Pose(dr * cur.r(), dr * cur.t() + delta.tail<3>());
    const double cost = reprojection_cost(cur, corr, k);
    if (cost < best_cost) {
      best_cost = cost;
      best = cur;
      stale = 0;
    } else {
      ++stale;
    }
  }
  return best;
}

struct PnPResult {
  Pose pose;
  std::vector<int> inliers;  // indices into the input correspondences
};

/// Seeded RANSAC around EPnP. An optional motion-model prediction is scored
/// as hypothesis zero. Ties in inlier count break toward the lower total
/// reprojection error, so the outcome is independent of scoring order.
inline std::optional<PnPResult> ransac_pnp(const std::vector<Correspondence>& corr,
                                           const Intrinsics& k, const PnPConfig& cfg,
                                           const Pose* prediction = nullptr) {
  cfg.validate();
  const int n = static_cast<int>(corr.size());
  if (n < cfg.min_inliers) return std::nullopt;

  const double thr_sq = cfg.inlier_px * cfg.inlier_px;
  auto score = [&](const Pose& pose, std::vector<int>* inliers) {
    int count = 0;
    double err_sum = 0;
    for (int i = 0; i < n; ++i) {
      const double e = detail::reprojection_error_sq(pose, corr[i], k);
      if (e < thr_sq) {
        ++count;
        err_sum += e;
        if (inliers) inliers->push_back(i);
      }
    }
    return std::pair<int, double>(count, err_sum);
  };

  std::optional<Pose> best;
  int best_count = 0;
  double best_err = std::numeric_limits<double>::infinity();
  auto consider = [&](const Pose& pose) {
    const auto [count, err] = score(pose, nullptr);
    if (count > best_count || (count == best_count && err < best_err)) {
      best = pose;
      best_count = count;
      best_err = err;
    }
  };

  if (prediction) consider(*prediction);

  std::mt19937_64 rng(cfg.seed);
  std::vector<int> idx(n);
  std::vector<Correspondence> sample(6);
  for (int it = 0; it < cfg.ransac_iters; ++it) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int j = 0; j < 6; ++j) {
      const int pick = j + static_cast<int>(rng() % static_cast<uint64_t>(n - j));
      std::swap(idx[j], idx[pick]);
      sample[j] = corr[idx[j]];
    }
    if (const auto pose = epnp(sample, k)) consider(*pose);
  }
  if (!best || best_count < cfg.min_inliers) return std::nullopt;

  // Refit on the winning inlier set, keeping the hypothesis if the refit
  // degenerates or loses support.
  PnPResult result;
  result.pose = *best;
  score(*best, &result.inliers);
  std::vector<Correspondence> support;
  support.reserve(result.inliers.size());
  for (int i : result.inliers) support.push_back(corr[i]);
  if (const auto refit = epnp(support, k)) {
    std::vector<int> refit_inliers;
    const auto [count, err] = score(*refit, &refit_inliers);
    if (count > best_count || (count == best_count && err < best_err)) {
      result.pose = *refit;
      result.inliers = std::move(refit_inliers);
    }
  }
  if (static_cast<int>(result.inliers.size()) < cfg.min_inliers) return std::nullopt;
  return result;
}

}  // namespace dyvo
