#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dyvo/pnp.hpp"

using namespace dyvo;

namespace {

Intrinsics vga() {
  Intrinsics k;
  k.fx = 525.0;
  k.fy = 525.0;
  k.cx = 319.5;
  k.cy = 239.5;
  k.width = 640;
  k.height = 480;
  return k;
}

/// Random points in a 2 m box in front of the camera, projected under the
/// given world-to-camera pose.
std::vector<Correspondence> forward_project(const Pose& pose, const Intrinsics& k, int n,
                                            std::mt19937_64& rng) {
  std::uniform_real_distribution<double> lat(-1.0, 1.0), depth(1.5, 3.5);
  std::vector<Correspondence> corr;
  while (static_cast<int>(corr.size()) < n) {
    const Vec3 pw(lat(rng), lat(rng), depth(rng));
    const auto px = project(pose * pw, k);
    if (!px) continue;
    corr.push_back({pw, *px});
  }
  return corr;
}

double pose_gap(const Pose& a, const Pose& b) {
  const Pose d = a.inverse() * b;
  return std::max(d.angle(), d.t().norm());
}

Pose test_pose() {
  return Pose(rotation_exp(Vec3(0, 0, 10.0 * M_PI / 180.0)), Vec3(0.1, 0, 0.05));
}

}  // namespace

TEST_CASE("epnp recovers the identity pose from 10 box points", "[pnp]") {
  std::mt19937_64 rng(11);
  const auto corr = forward_project(Pose(), vga(), 10, rng);
  const auto pose = epnp(corr, vga());
  REQUIRE(pose.has_value());
  CHECK(pose->angle() < 1e-6);
  CHECK(pose->t().norm() < 1e-6);
}

TEST_CASE("epnp recovers a rotated and translated pose", "[pnp]") {
  std::mt19937_64 rng(12);
  const Pose gt = test_pose();
  const auto corr = forward_project(gt, vga(), 10, rng);
  const auto pose = epnp(corr, vga());
  REQUIRE(pose.has_value());
  CHECK(pose_gap(*pose, gt) < 1e-6);
}

TEST_CASE("epnp rejects degenerate point sets", "[pnp]") {
  const Intrinsics k = vga();
  // Six collinear points.
  std::vector<Correspondence> collinear;
  for (int i = 0; i < 6; ++i) {
    const Vec3 pw(0.1 * i, 0.2 * i, 2.0 + 0.05 * i);
    collinear.push_back({pw, *project(pw, k)});
  }
  CHECK_FALSE(epnp(collinear, k).has_value());
  // Ten coplanar points (z = 2 plane).
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> lat(-1.0, 1.0);
  std::vector<Correspondence> coplanar;
  for (int i = 0; i < 10; ++i) {
    const Vec3 pw(lat(rng), lat(rng), 2.0);
    coplanar.push_back({pw, *project(pw, k)});
  }
  CHECK_FALSE(epnp(coplanar, k).has_value());
  // Too few points.
  CHECK_FALSE(epnp(std::vector<Correspondence>(5), k).has_value());
}

TEST_CASE("ransac with perfect correspondences keeps everything", "[pnp]") {
  std::mt19937_64 rng(21);
  const Pose gt = test_pose();
  const auto corr = forward_project(gt, vga(), 100, rng);
  PnPConfig cfg;
  cfg.seed = 5;
  const auto res = ransac_pnp(corr, vga(), cfg);
  REQUIRE(res.has_value());
  CHECK(res->inliers.size() == 100);
  CHECK(pose_gap(res->pose, gt) < 1e-6);
}

TEST_CASE("ransac survives 30 percent planted outliers", "[pnp]") {
  std::mt19937_64 rng(22);
  const Pose gt = test_pose();
  auto corr = forward_project(gt, vga(), 100, rng);
  std::uniform_real_distribution<double> ux(0, 639), uy(0, 479);
  for (int i = 70; i < 100; ++i) corr[i].px = {ux(rng), uy(rng)};
  PnPConfig cfg;
  cfg.seed = 6;
  const auto res = ransac_pnp(corr, vga(), cfg);
  REQUIRE(res.has_value());
  CHECK(res->inliers.size() >= 70);
  CHECK(pose_gap(res->pose, gt) < 1e-4);
  // Every reported inlier satisfies the pixel gate under the final pose.
  for (int i : res->inliers) {
    const auto px = project(res->pose * corr[i].world, vga());
    REQUIRE(px.has_value());
    const double e = std::hypot(px->u - corr[i].px.u, px->v - corr[i].px.v);
    REQUIRE(e < cfg.inlier_px);
  }
}

TEST_CASE("ransac on garbage reports tracking lost", "[pnp]") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> lat(-1.0, 1.0), depth(1.0, 3.0), ux(0, 639), uy(0, 479);
  std::vector<Correspondence> corr;
  for (int i = 0; i < 30; ++i)
    corr.push_back({Vec3(lat(rng), lat(rng), depth(rng)), {ux(rng), uy(rng)}});
  PnPConfig cfg;
  cfg.seed = 7;
  CHECK_FALSE(ransac_pnp(corr, vga(), cfg).has_value());
  // Fewer correspondences than min_inliers is lost by definition.
  CHECK_FALSE(ransac_pnp(std::vector<Correspondence>(10), vga(), cfg).has_value());
}

TEST_CASE("ransac is deterministic for a fixed seed", "[pnp]") {
  std::mt19937_64 rng(24);
  const Pose gt = test_pose();
  auto corr = forward_project(gt, vga(), 80, rng);
  std::uniform_real_distribution<double> ux(0, 639), uy(0, 479);
  for (int i = 60; i < 80; ++i) corr[i].px = {ux(rng), uy(rng)};
  PnPConfig cfg;
  cfg.seed = 99;
  const auto a = ransac_pnp(corr, vga(), cfg);
  const auto b = ransac_pnp(corr, vga(), cfg);
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK(a->pose.r() == b->pose.r());
  CHECK(a->pose.t() == b->pose.t());
  CHECK(a->inliers == b->inliers);
}

TEST_CASE("a motion-model prediction is honored as hypothesis zero", "[pnp]") {
  std::mt19937_64 rng(25);
  const Pose gt = test_pose();
  const auto corr = forward_project(gt, vga(), 50, rng);
  PnPConfig cfg;
  cfg.seed = 3;
  cfg.ransac_iters = 1;  // starve the sampler; the prediction must carry
  const Pose hint = gt;
  const auto res = ransac_pnp(corr, vga(), cfg, &hint);
  REQUIRE(res.has_value());
  CHECK(res->inliers.size() == 50);
  CHECK(pose_gap(res->pose, gt) < 1e-6);
}

TEST_CASE("refinement is a fixed point at the ground truth", "[pnp]") {
  std::mt19937_64 rng(31);
  const Pose gt = test_pose();
  const auto corr = forward_project(gt, vga(), 40, rng);
  const Pose refined = refine_pose(gt, corr, vga());
  CHECK(pose_gap(refined, gt) < 1e-9);
}

TEST_CASE("refinement pulls a perturbed pose back to the truth", "[pnp]") {
  std::mt19937_64 rng(32);
  const Pose gt = test_pose();
  const auto corr = forward_project(gt, vga(), 40, rng);
  const Mat3 dr = rotation_exp(Vec3(0.03, -0.02, 0.03));
  const Pose init(dr * gt.r(), gt.t() + Vec3(0.05, -0.02, 0.01));
  const Pose refined = refine_pose(init, corr, vga());
  CHECK(pose_gap(refined, gt) < 1e-6);
  CHECK(reprojection_cost(refined, corr, vga()) <=
        reprojection_cost(init, corr, vga()) + 1e-12);
}

TEST_CASE("refinement with outliers stays near the truth", "[pnp]") {
  std::mt19937_64 rng(33);
  const Pose gt = test_pose();
  auto corr = forward_project(gt, vga(), 60, rng);
  std::uniform_real_distribution<double> ux(0, 639), uy(0, 479);
  for (int i = 54; i < 60; ++i) corr[i].px = {ux(rng), uy(rng)};  // 10% gross outliers
  const Mat3 dr = rotation_exp(Vec3(0.01, 0.01, -0.01));
  const Pose init(dr * gt.r(), gt.t() + Vec3(0.02, 0.01, -0.01));
  const Pose refined = refine_pose(init, corr, vga());
  // Huber bounds each outlier's pull instead of discarding it, so a small
  // residual bias remains; it must stay well under the initial perturbation.
  CHECK(pose_gap(refined, gt) < 5e-3);
  CHECK(pose_gap(refined, gt) < 0.25 * pose_gap(init, gt));
}

TEST_CASE("analytic jacobian matches central finite differences", "[pnp]") {
  std::mt19937_64 rng(34);
  const Intrinsics k = vga();
  std::uniform_real_distribution<double> ang(-0.3, 0.3), off(-0.2, 0.2);
  for (int trial = 0; trial < 20; ++trial) {
    const Pose pose(rotation_exp(Vec3(ang(rng), ang(rng), ang(rng))),
                    Vec3(off(rng), off(rng), off(rng)));
    const auto corr = forward_project(pose, k, 1, rng);
    // Observe a shifted pixel so the residual is nonzero.
    Correspondence c = corr[0];
    c.px.u += 3.0;
    c.px.v -= 2.0;

    const auto j = reprojection_jacobian(pose, c, k);
    const double h = 1e-6;
    for (int dim = 0; dim < 6; ++dim) {
      auto step = [&](double s) {
        Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
        d(dim) = s;
        const Mat3 dr = rotation_exp(d.head<3>());
        return Pose(dr * pose.r(), dr * pose.t() + d.tail<3>());
      };
      const Eigen::Vector2d num =
          (reprojection_residual(step(h), c, k) - reprojection_residual(step(-h), c, k)) /
          (2 * h);
      for (int row = 0; row < 2; ++row) {
        const double denom = std::max(1.0, std::abs(num(row)));
        REQUIRE(std::abs(j(row, dim) - num(row)) / denom < 1e-4);
      }
    }
  }
}
