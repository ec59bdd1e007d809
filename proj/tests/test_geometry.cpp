#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dyvo/geometry.hpp"

using namespace dyvo;

namespace {

Intrinsics test_intrinsics() {
  Intrinsics k;
  k.fx = 525.0;
  k.fy = 525.0;
  k.cx = 319.5;
  k.cy = 239.5;
  k.width = 640;
  k.height = 480;
  k.depth_scale = 5000.0;
  return k;
}

Pose random_pose(std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec3 w(u(rng), u(rng), u(rng));
  Vec3 t(4.0 * u(rng), 4.0 * u(rng), 4.0 * u(rng));
  return Pose(rotation_exp(w), t);
}

}  // namespace

TEST_CASE("pose composition with identity", "[geometry]") {
  std::mt19937 rng(7);
  Pose p = random_pose(rng);
  Pose q = compose(Pose(), p);
  Pose r = compose(p, Pose());
  CHECK((q.r() - p.r()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((q.t() - p.t()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((r.r() - p.r()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((r.t() - p.t()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("pose composed with its inverse is identity", "[geometry]") {
  std::mt19937 rng(11);
  for (int i = 0; i < 100; ++i) {
    Pose p = random_pose(rng);
    Pose e = p * p.inverse();
    CHECK((e.r() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(e.t().cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("translation composition adds", "[geometry]") {
  Pose a = Pose::translation(Vec3(0, 0, 1));
  Pose b = Pose::translation(Vec3(0, 0, 2));
  Pose c = a * b;
  CHECK(c.t().isApprox(Vec3(0, 0, 3)));
  CHECK((c.r() - Mat3::Identity()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rotation stays orthonormal over a million compositions", "[geometry]") {
  std::mt19937 rng(23);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  Pose acc;
  for (int i = 0; i < 1000000; ++i) {
    acc = acc * Pose(rotation_exp(Vec3(u(rng), u(rng), u(rng))), Vec3(u(rng), 0, 0));
  }
  CHECK(orthonormality_error(acc.r()) < 1e-6);
  CHECK(acc.r().determinant() > 0.0);
}

TEST_CASE("point transform round-trips through the inverse", "[geometry]") {
  std::mt19937 rng(29);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int i = 0; i < 1000; ++i) {
    Pose p = random_pose(rng);
    Vec3 x(u(rng), u(rng), u(rng));
    Vec3 back = p.inverse() * (p * x);
    CHECK((back - x).norm() < 1e-9);
  }
}

TEST_CASE("back-projection at the principal point", "[geometry]") {
  Intrinsics k = test_intrinsics();
  auto p = back_project(Pixel{k.cx, k.cy}, 5000.0, k);
  REQUIRE(p.has_value());
  CHECK((*p - Vec3(0, 0, 1)).norm() < 1e-12);
}

TEST_CASE("back-projection one focal length off center", "[geometry]") {
  Intrinsics k = test_intrinsics();
  auto p = back_project(Pixel{k.cx + k.fx, k.cy}, k.depth_scale, k);
  REQUIRE(p.has_value());
  CHECK((*p - Vec3(1, 0, 1)).norm() < 1e-12);
}

TEST_CASE("zero depth yields no point", "[geometry]") {
  Intrinsics k = test_intrinsics();
  CHECK_FALSE(back_project(Pixel{100, 100}, 0.0, k).has_value());
}

TEST_CASE("projection rejects points behind the camera", "[geometry]") {
  Intrinsics k = test_intrinsics();
  CHECK_FALSE(project(Vec3(0, 0, -1), k).has_value());
  CHECK_FALSE(project(Vec3(0.5, 0.2, 0.0), k).has_value());
}

TEST_CASE("projection of the optical axis lands at the principal point", "[geometry]") {
  Intrinsics k = test_intrinsics();
  auto px = project(Vec3(0, 0, 2.5), k);
  REQUIRE(px.has_value());
  CHECK(px->u == Catch::Approx(k.cx).margin(1e-12));
  CHECK(px->v == Catch::Approx(k.cy).margin(1e-12));
}

TEST_CASE("project and back-project round-trip", "[geometry]") {
  // Oracle: draw camera points in the frustum, push them through the
  // projection both ways, and demand the original point back.
  Intrinsics k = test_intrinsics();
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> uz(0.3, 8.0);
  std::uniform_real_distribution<double> uu(0.0, k.width - 1.0);
  std::uniform_real_distribution<double> uv(0.0, k.height - 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double z = uz(rng);
    Pixel px{uu(rng), uv(rng)};
    auto p = back_project(px, z * k.depth_scale, k);
    REQUIRE(p.has_value());
    auto px2 = project(*p, k);
    REQUIRE(px2.has_value());
    CHECK(std::abs(px2->u - px.u) < 1e-9);
    CHECK(std::abs(px2->v - px.v) < 1e-9);
    CHECK(std::abs(p->z() - z) < 1e-12);
  }
}

TEST_CASE("quaternion conversions", "[geometry]") {
  SECTION("identity quaternion") {
    Pose p = pose_from_quaternion(0, 0, 0, 0, 0, 0, 1);
    CHECK((p.r() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(p.t().norm() == 0.0);
  }
  SECTION("ninety degree yaw") {
    const double s = std::sqrt(0.5);
    Pose p = pose_from_quaternion(1, 2, 3, 0, 0, s, s);
    // Rotation by +90 deg about z maps x to y.
    CHECK((p.r() * Vec3(1, 0, 0) - Vec3(0, 1, 0)).norm() < 1e-12);
    CHECK(p.t().isApprox(Vec3(1, 2, 3)));
  }
  SECTION("zero quaternion is rejected") {
    CHECK_THROWS_AS(pose_from_quaternion(0, 0, 0, 0, 0, 0, 0), std::invalid_argument);
  }
  SECTION("random round-trip up to sign") {
    std::mt19937 rng(37);
    for (int i = 0; i < 200; ++i) {
      Pose p = random_pose(rng);
      auto q = pose_to_quaternion(p);
      Pose back = pose_from_quaternion(q[0], q[1], q[2], q[3], q[4], q[5], q[6]);
      CHECK((back.r() - p.r()).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((back.t() - p.t()).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("rotation log inverts exp", "[geometry]") {
  std::mt19937 rng(41);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Vec3 w(u(rng), u(rng), u(rng));
    Vec3 back = rotation_log(rotation_exp(w));
    CHECK((back - w).norm() < 1e-9);
  }
  // Angle-pi edge.
  Vec3 w = M_PI * Vec3(1, 0, 0);
  Mat3 r = rotation_exp(w);
  CHECK(std::abs(rotation_angle(r) - M_PI) < 1e-9);
  Vec3 back = rotation_log(r);
  CHECK(std::abs(back.norm() - M_PI) < 1e-6);
}

TEST_CASE("denormalized rotations are repaired on construction", "[geometry]") {
  Mat3 r = rotation_exp(Vec3(0.3, -0.2, 0.9));
  r *= 1.0 + 1e-7;  // scale drift
  Pose p(r, Vec3::Zero());
  CHECK(orthonormality_error(p.r()) < 1e-9);
  CHECK(p.r().determinant() > 0.0);
}
