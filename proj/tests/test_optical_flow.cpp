#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dyvo/optical_flow.hpp"

using namespace dyvo;

namespace {

/// Smooth random texture: value noise at an 8 px lattice, bilinearly
/// upsampled, so patches have usable gradients everywhere.
Image8 textured(int w, int h, uint64_t seed) {
  const int gw = w / 8 + 2, gh = h / 8 + 2;
  Image8 lattice(gw, gh, 1);
  std::mt19937_64 rng(seed);
  for (auto& p : lattice.data) p = static_cast<uint8_t>(rng() % 256);
  Image8 img(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.at(x, y) = static_cast<uint8_t>(bilinear(lattice, x / 8.0, y / 8.0));
  return img;
}

/// Shifts an image by (dx, dy): out(x, y) = in(x - dx, y - dy).
Image8 shifted(const Image8& in, double dx, double dy) {
  Image8 out(in.width, in.height, 1);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      const double sx = std::clamp(x - dx, 0.0, in.width - 1.0);
      const double sy = std::clamp(y - dy, 0.0, in.height - 1.0);
      out.at(x, y) = static_cast<uint8_t>(std::lround(bilinear(in, sx, sy)));
    }
  return out;
}

std::vector<Pixel> interior_grid(int w, int h, int margin, int stride) {
  std::vector<Pixel> pts;
  for (int y = margin; y < h - margin; y += stride)
    for (int x = margin; x < w - margin; x += stride)
      pts.push_back({static_cast<double>(x), static_cast<double>(y)});
  return pts;
}

}  // namespace

TEST_CASE("identical frames track with zero displacement", "[optical_flow]") {
  const Image8 img = textured(160, 120, 5);
  const auto pts = interior_grid(160, 120, 20, 10);
  const auto res = track_points(img, img, pts);
  REQUIRE(res.size() == pts.size());
  for (size_t i = 0; i < pts.size(); ++i) {
    REQUIRE(res[i].tracked);
    CHECK(res[i].curr.u == Catch::Approx(pts[i].u).margin(1e-6));
    CHECK(res[i].curr.v == Catch::Approx(pts[i].v).margin(1e-6));
    CHECK(res[i].residual == Catch::Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("an integer 3 px shift is recovered within 0.2 px", "[optical_flow]") {
  const Image8 a = textured(200, 150, 6);
  const Image8 b = shifted(a, 3.0, 0.0);
  const auto pts = interior_grid(200, 150, 25, 9);
  const auto res = track_points(a, b, pts);
  int tracked = 0;
  for (size_t i = 0; i < pts.size(); ++i) {
    if (!res[i].tracked) continue;
    ++tracked;
    CHECK(res[i].curr.u - pts[i].u == Catch::Approx(3.0).margin(0.2));
    CHECK(res[i].curr.v - pts[i].v == Catch::Approx(0.0).margin(0.2));
  }
  REQUIRE(tracked >= static_cast<int>(0.9 * pts.size()));
}

TEST_CASE("subpixel displacement converges", "[optical_flow]") {
  // Resampling is only approximately brightness-constant under fractional
  // shifts, so weak-gradient patches can sit a fraction of a pixel off.
  const Image8 a = textured(200, 150, 7);
  const Image8 b = shifted(a, 2.5, -1.25);
  const auto pts = interior_grid(200, 150, 25, 9);
  const auto res = track_points(a, b, pts);
  int tracked = 0, tight = 0;
  for (size_t i = 0; i < pts.size(); ++i) {
    if (!res[i].tracked) continue;
    ++tracked;
    const double eu = std::abs(res[i].curr.u - pts[i].u - 2.5);
    const double ev = std::abs(res[i].curr.v - pts[i].v + 1.25);
    CHECK(eu < 0.5);
    CHECK(ev < 0.5);
    tight += eu <= 0.2 && ev <= 0.2;
  }
  REQUIRE(tracked >= static_cast<int>(0.9 * pts.size()));
  CHECK(tight >= static_cast<int>(0.85 * tracked));
}

TEST_CASE("dense flow lookup is exact for interior points", "[optical_flow]") {
  const Image8 a = textured(120, 90, 8);
  const Image8 b = textured(120, 90, 9);  // content irrelevant for lookup
  ImageF flow(120, 90, 2);
  for (int y = 0; y < 90; ++y)
    for (int x = 0; x < 120; ++x) {
      flow.at(x, y, 0) = 3.0f;
      flow.at(x, y, 1) = 0.0f;
    }
  const auto pts = interior_grid(120, 90, 10, 7);
  const auto res = track_points(a, b, pts, &flow);
  for (size_t i = 0; i < pts.size(); ++i) {
    REQUIRE(res[i].tracked);
    CHECK(res[i].curr.u == pts[i].u + 3.0);
    CHECK(res[i].curr.v == pts[i].v);
  }
}

TEST_CASE("points leaving the image are lost", "[optical_flow]") {
  const Image8 a = textured(120, 90, 10);
  ImageF flow(120, 90, 2);
  for (int y = 0; y < 90; ++y)
    for (int x = 0; x < 120; ++x) flow.at(x, y, 0) = 500.0f;
  const auto res = track_points(a, a, {{60.0, 45.0}}, &flow);
  CHECK_FALSE(res[0].tracked);
}

TEST_CASE("unrelated content fails the residual gate", "[optical_flow]") {
  // Independent per-pixel noise cannot be aligned: expected mean |diff| is
  // around 85 intensity units, far over the gate.
  Image8 a(160, 120, 1), b(160, 120, 1);
  std::mt19937_64 rng(11);
  for (auto& p : a.data) p = static_cast<uint8_t>(rng() % 256);
  for (auto& p : b.data) p = static_cast<uint8_t>(rng() % 256);
  const auto pts = interior_grid(160, 120, 25, 12);
  const auto res = track_points(a, b, pts);
  for (const auto& r : res) CHECK_FALSE(r.tracked);
}

TEST_CASE("flat patches stay put and count as tracked", "[optical_flow]") {
  const Image8 flat(160, 120, 1, 77);
  const auto res = track_points(flat, flat, {{80.0, 60.0}});
  REQUIRE(res[0].tracked);
  CHECK(res[0].curr.u == 80.0);
  CHECK(res[0].curr.v == 60.0);
  CHECK(res[0].residual == 0.0);
}
