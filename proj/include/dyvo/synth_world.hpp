// Synthetic RGB-D scene generator and ground-truth oracle. Scenes are
// procedurally textured boxes and planes (static) plus rigid moving boxes
// (dynamic), rendered by a perspective-correct z-buffer rasterizer. Emission
// follows the TUM directory layout consumed by sequence_io, with exact
// camera/object ground truth alongside.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dyvo/geometry.hpp"
#include "dyvo/image.hpp"
#include "dyvo/sequence_io.hpp"

namespace dyvo {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scene description

struct TimedPose {
  double t = 0.0;
  Pose pose;  // entity-to-world
};

/// Piecewise-linear translation, slerp rotation; clamps outside the waypoint
/// range.
inline Pose interpolate_track(const std::vector<TimedPose>& track, double t) {
  if (track.empty()) return Pose();
  if (t <= track.front().t || track.size() == 1) return track.front().pose;
  if (t >= track.back().t) return track.back().pose;
  size_t hi = 1;
  while (track[hi].t < t) ++hi;
  const TimedPose& a = track[hi - 1];
  const TimedPose& b = track[hi];
  const double alpha = (t - a.t) / (b.t - a.t);
  Eigen::Quaterniond qa(a.pose.r()), qb(b.pose.r());
  Mat3 r = qa.slerp(alpha, qb).toRotationMatrix();
  Vec3 tr = (1.0 - alpha) * a.pose.t() + alpha * b.pose.t();
  return Pose(r, tr);
}

struct TextureSpec {
  enum class Kind { checker, noise };
  Kind kind = Kind::checker;
  double cell = 0.25;  // meters per texture cell
  uint32_t seed = 1;
};

struct BoxSpec {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();  // full extents along x/y/z
  TextureSpec tex;
};

struct PlaneSpec {
  Vec3 center = Vec3::Zero();
  int axis = 2;  // surface normal: 0=x, 1=y, 2=z
  double su = 1.0, sv = 1.0;
  TextureSpec tex;
};

struct DynObjectSpec {
  std::string name;
  int class_id = 0;
  Vec3 size = Vec3::Ones();
  TextureSpec tex;
  bool emit_keypoints = false;
  std::vector<TimedPose> track;  // object-to-world

  Pose pose_at(double t) const { return interpolate_track(track, t); }

  /// True when the world point lies inside the box at pose `two`, with the
  /// box dilated by `margin` meters on every side.
  bool contains(const Pose& two, const Vec3& p_world, double margin = 0.0) const {
    const Vec3 local = two.inverse() * p_world;
    return std::abs(local.x()) < size.x() / 2 + margin &&
           std::abs(local.y()) < size.y() / 2 + margin &&
           std::abs(local.z()) < size.z() / 2 + margin;
  }
};

struct SceneSpec {
  Intrinsics intrinsics;
  double fps = 30.0;
  int frames = 0;
  uint64_t seed = 0;
  double depth_sigma = 0.0;  // meters, before quantization
  double pixel_sigma = 0.0;  // intensity units
  bool emit_flow = false;
  std::vector<TimedPose> camera;  // camera-to-world
  std::vector<BoxSpec> boxes;
  std::vector<PlaneSpec> planes;
  std::vector<DynObjectSpec> objects;
  ClassRegistry classes;

  double timestamp(int frame) const { return frame / fps; }
  Pose camera_at(double t) const { return interpolate_track(camera, t); }

  /// Mask code of an object: class_id * 1000 + per-class instance index in
  /// declaration order.
  uint32_t code_of(size_t obj_index) const {
    int instance = 0;
    for (size_t i = 0; i <= obj_index; ++i)
      if (objects[i].class_id == objects[obj_index].class_id) ++instance;
    return static_cast<uint32_t>(objects[obj_index].class_id) * ClassRegistry::kInstanceBase +
           instance;
  }

  void validate() const {
    if (frames < 1) throw std::invalid_argument("scene: frames must be >= 1");
    if (fps <= 0) throw std::invalid_argument("scene: fps must be positive");
    if (!intrinsics.valid()) throw std::invalid_argument("scene: invalid intrinsics");
    if (camera.empty()) throw std::invalid_argument("scene: camera track is empty");
    for (const auto& b : boxes)
      if (b.size.minCoeff() <= 0) throw std::invalid_argument("scene: degenerate box");
    for (const auto& p : planes)
      if (p.su <= 0 || p.sv <= 0 || p.axis < 0 || p.axis > 2)
        throw std::invalid_argument("scene: degenerate plane");
    for (const auto& o : objects) {
      if (o.size.minCoeff() <= 0) throw std::invalid_argument("scene: degenerate object");
      if (o.track.empty())
        throw std::invalid_argument("scene: object '" + o.name + "' has no waypoints");
      if (!classes.contains(o.class_id))
        throw std::invalid_argument("scene: object '" + o.name + "' references undeclared class " +
                                    std::to_string(o.class_id));
    }
  }
};

// ---------------------------------------------------------------------------
// Procedural textures

inline std::array<uint8_t, 3> texture_color(const TextureSpec& tex, int prim_id, double s,
                                            double t) {
  const uint64_t pal = detail::hash_combine(tex.seed, static_cast<uint64_t>(prim_id) + 101);
  const int dark = 55 + static_cast<int>(pal % 45);
  const int light = 150 + static_cast<int>((pal >> 8) % 55);
  const int co[3] = {static_cast<int>((pal >> 16) % 41) - 20,
                     static_cast<int>((pal >> 24) % 41) - 20,
                     static_cast<int>((pal >> 32) % 41) - 20};
  const int64_t cs = static_cast<int64_t>(std::floor(s / tex.cell));
  const int64_t ct = static_cast<int64_t>(std::floor(t / tex.cell));
  const uint64_t cell_h = detail::hash_combine(
      detail::hash_combine(tex.seed, static_cast<uint64_t>(cs) * 0x85ebca6bull),
      static_cast<uint64_t>(ct) * 0xc2b2ae35ull);
  int base;
  if (tex.kind == TextureSpec::Kind::checker) {
    const bool parity = ((cs + ct) & 1) != 0;
    base = (parity ? light : dark) + static_cast<int>(cell_h % 31) - 15;
  } else {
    base = 40 + static_cast<int>(cell_h % 176);
  }
  std::array<uint8_t, 3> rgb;
  for (int c = 0; c < 3; ++c)
    rgb[c] = static_cast<uint8_t>(std::clamp(base + co[c], 0, 255));
  return rgb;
}

// ---------------------------------------------------------------------------
// Rasterization

namespace detail {

struct TexturedQuad {
  Vec3 v[4];          // world-space corners
  double s[4], t[4];  // texture coordinates, meters
  uint32_t code = 0;  // mask code, 0 for static geometry
  int owner = -1;     // dynamic object index, -1 static
  int prim_id = 0;
  TextureSpec tex;
};

inline void append_box_quads(std::vector<TexturedQuad>& out, const Vec3& size, const Pose& two,
                             uint32_t code, int owner, int prim_id, const TextureSpec& tex) {
  const double hx = size.x() / 2, hy = size.y() / 2, hz = size.z() / 2;
  // Each face: origin corner, two spanning axes (meters), kept consistent so
  // texture coordinates equal surface meters.
  struct Face {
    Vec3 origin, du, dv;
  };
  const Face faces[6] = {
      {{-hx, -hy, +hz}, {2 * hx, 0, 0}, {0, 2 * hy, 0}},  // +z
      {{+hx, -hy, -hz}, {-2 * hx, 0, 0}, {0, 2 * hy, 0}},  // -z
      {{+hx, -hy, +hz}, {0, 0, -2 * hz}, {0, 2 * hy, 0}},  // +x
      {{-hx, -hy, -hz}, {0, 0, 2 * hz}, {0, 2 * hy, 0}},   // -x
      {{-hx, +hy, +hz}, {2 * hx, 0, 0}, {0, 0, -2 * hz}},  // +y
      {{-hx, -hy, -hz}, {2 * hx, 0, 0}, {0, 0, 2 * hz}},   // -y
  };
  for (int f = 0; f < 6; ++f) {
    TexturedQuad q;
    const Vec3 c[4] = {faces[f].origin, faces[f].origin + faces[f].du,
                       faces[f].origin + faces[f].du + faces[f].dv,
                       faces[f].origin + faces[f].dv};
    const double su = faces[f].du.norm(), sv = faces[f].dv.norm();
    const double sc[4] = {0, su, su, 0};
    const double tc[4] = {0, 0, sv, sv};
    for (int i = 0; i < 4; ++i) {
      q.v[i] = two * c[i];
      q.s[i] = sc[i];
      q.t[i] = tc[i];
    }
    q.code = code;
    q.owner = owner;
    q.prim_id = prim_id * 8 + f;
    q.tex = tex;
    out.push_back(q);
  }
}

inline void append_plane_quad(std::vector<TexturedQuad>& out, const PlaneSpec& p, int prim_id) {
  Vec3 du = Vec3::Zero(), dv = Vec3::Zero();
  const int a = (p.axis + 1) % 3, b = (p.axis + 2) % 3;
  du[a] = p.su;
  dv[b] = p.sv;
  TexturedQuad q;
  const Vec3 origin = p.center - du / 2 - dv / 2;
  const Vec3 c[4] = {origin, origin + du, origin + du + dv, origin + dv};
  const double sc[4] = {0, p.su, p.su, 0};
  const double tc[4] = {0, 0, p.sv, p.sv};
  for (int i = 0; i < 4; ++i) {
    q.v[i] = c[i];
    q.s[i] = sc[i];
    q.t[i] = tc[i];
  }
  q.prim_id = prim_id * 8;
  q.tex = p.tex;
  out.push_back(q);
}

struct ClipVert {
  Vec3 p;  // camera frame
  double s, t;
};

// Clips a polygon against z >= znear.
inline void clip_near(std::vector<ClipVert>& poly, double znear) {
  std::vector<ClipVert> out;
  out.reserve(poly.size() + 2);
  for (size_t i = 0; i < poly.size(); ++i) {
    const ClipVert& a = poly[i];
    const ClipVert& b = poly[(i + 1) % poly.size()];
    const bool ain = a.p.z() >= znear, bin = b.p.z() >= znear;
    if (ain) out.push_back(a);
    if (ain != bin) {
      const double alpha = (znear - a.p.z()) / (b.p.z() - a.p.z());
      ClipVert m;
      m.p = a.p + alpha * (b.p - a.p);
      m.s = a.s + alpha * (b.s - a.s);
      m.t = a.t + alpha * (b.t - a.t);
      out.push_back(m);
    }
  }
  poly.swap(out);
}

}  // namespace detail

/// Exact per-pixel ground truth kept alongside the emitted frame.
struct RenderTruth {
  Pose cam_twc;
  Image<double> depth_exact;  // meters, 0 where no surface
  Image<int32_t> owner;       // dynamic object index, -1 static/empty
  struct ObjectState {
    std::string name;
    uint32_t code = 0;
    Pose two;
    double speed = 0.0;  // ground-truth centroid speed, m/s
  };
  std::vector<ObjectState> objects;
};

/// Renders frame `frame_idx`. Deterministic given spec content and seed.
inline std::pair<Frame, RenderTruth> render(const SceneSpec& spec, int frame_idx) {
  const Intrinsics& k = spec.intrinsics;
  const double t = spec.timestamp(frame_idx);
  const Pose twc = spec.camera_at(t);
  const Pose tcw = twc.inverse();

  std::vector<detail::TexturedQuad> quads;
  int prim_id = 0;
  for (const auto& b : spec.boxes)
    detail::append_box_quads(quads, b.size, Pose(Mat3::Identity(), b.center), 0, -1, prim_id++,
                             b.tex);
  for (const auto& p : spec.planes) detail::append_plane_quad(quads, p, prim_id++);
  for (size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const auto& o = spec.objects[oi];
    detail::append_box_quads(quads, o.size, o.pose_at(t), spec.code_of(oi),
                             static_cast<int>(oi), prim_id++, o.tex);
  }

  Frame frame;
  frame.index = frame_idx;
  frame.timestamp = t;
  frame.rgb = Image8(k.width, k.height, 3, 0);
  frame.depth = Image16(k.width, k.height, 1, 0);
  PanopticMask mask;
  mask.labels = Image<uint32_t>(k.width, k.height, 1, 0);

  RenderTruth truth;
  truth.cam_twc = twc;
  truth.depth_exact = Image<double>(k.width, k.height, 1, 0.0);
  truth.owner = Image<int32_t>(k.width, k.height, 1, -1);

  constexpr double kNear = 0.05;
  Image<double> zbuf(k.width, k.height, 1, std::numeric_limits<double>::infinity());

  for (const auto& q : quads) {
    std::vector<detail::ClipVert> poly(4);
    for (int i = 0; i < 4; ++i) poly[i] = {tcw * q.v[i], q.s[i], q.t[i]};
    detail::clip_near(poly, kNear);
    if (poly.size() < 3) continue;

    // Fan triangulation of the clipped polygon.
    for (size_t tri = 1; tri + 1 < poly.size(); ++tri) {
      const detail::ClipVert* v[3] = {&poly[0], &poly[tri], &poly[tri + 1]};
      double px[3], py[3], iw[3], su[3], tv[3];
      for (int i = 0; i < 3; ++i) {
        iw[i] = 1.0 / v[i]->p.z();
        px[i] = k.fx * v[i]->p.x() * iw[i] + k.cx;
        py[i] = k.fy * v[i]->p.y() * iw[i] + k.cy;
        su[i] = v[i]->s * iw[i];
        tv[i] = v[i]->t * iw[i];
      }
      const double area =
          (px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0]);
      if (std::abs(area) < 1e-12) continue;
      const double inv_area = 1.0 / area;
      int x0 = std::max(0, static_cast<int>(std::ceil(std::min({px[0], px[1], px[2]}))));
      int x1 = std::min(k.width - 1, static_cast<int>(std::floor(std::max({px[0], px[1], px[2]}))));
      int y0 = std::max(0, static_cast<int>(std::ceil(std::min({py[0], py[1], py[2]}))));
      int y1 = std::min(k.height - 1, static_cast<int>(std::floor(std::max({py[0], py[1], py[2]}))));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double l0 = ((px[1] - x) * (py[2] - y) - (px[2] - x) * (py[1] - y)) * inv_area;
          const double l1 = ((px[2] - x) * (py[0] - y) - (px[0] - x) * (py[2] - y)) * inv_area;
          const double l2 = 1.0 - l0 - l1;
          if (l0 < 0 || l1 < 0 || l2 < 0) continue;
          const double w = l0 * iw[0] + l1 * iw[1] + l2 * iw[2];
          const double z = 1.0 / w;
          if (z >= zbuf.at(x, y)) continue;
          zbuf.at(x, y) = z;
          // Stratified 4x4 jittered texture supersampling. The jitter hash
          // depends only on the pixel and stratum, never the frame, so a
          // static scene renders identically every frame. Jitter decorrelates
          // the residual coverage error of texture-cell edges across rows;
          // a regular grid would quantize every edge's apparent position in
          // lockstep and bias subpixel alignment. Subsample barycentrics may
          // run slightly negative at triangle edges; that just extrapolates
          // the texture plane of the same quad, which is exact. Depth and
          // mask stay point-sampled at the pixel center.
          int acc[3] = {0, 0, 0};
          for (int sy = 0; sy < 4; ++sy) {
            for (int sx2 = 0; sx2 < 4; ++sx2) {
              const uint64_t jh = detail::hash_combine(
                  (static_cast<uint64_t>(y) << 24) ^ (static_cast<uint64_t>(x) << 8) ^
                      static_cast<uint64_t>(sy * 4 + sx2),
                  0xa11a5ull);
              const double fx2 = x - 0.5 + (sx2 + (jh & 0xffff) / 65536.0) / 4.0;
              const double fy2 = y - 0.5 + (sy + ((jh >> 16) & 0xffff) / 65536.0) / 4.0;
              const double m0 =
                  ((px[1] - fx2) * (py[2] - fy2) - (px[2] - fx2) * (py[1] - fy2)) * inv_area;
              const double m1 =
                  ((px[2] - fx2) * (py[0] - fy2) - (px[0] - fx2) * (py[2] - fy2)) * inv_area;
              const double m2 = 1.0 - m0 - m1;
              double ws = m0 * iw[0] + m1 * iw[1] + m2 * iw[2];
              if (!(ws > 1e-9)) ws = w;
              const double ss = (m0 * su[0] + m1 * su[1] + m2 * su[2]) / ws;
              const double tt = (m0 * tv[0] + m1 * tv[1] + m2 * tv[2]) / ws;
              const auto rgb = texture_color(q.tex, q.prim_id, ss, tt);
              for (int c = 0; c < 3; ++c) acc[c] += rgb[c];
            }
          }
          for (int c = 0; c < 3; ++c)
            frame.rgb.at(x, y, c) = static_cast<uint8_t>(
                std::clamp<long>(std::lround(acc[c] / 16.0), 0, 255));
          mask.labels.at(x, y) = q.code;
          truth.owner.at(x, y) = q.owner;
          truth.depth_exact.at(x, y) = z;
        }
      }
    }
  }

  // Noise and quantization.
  std::mt19937_64 depth_rng(detail::hash_combine(spec.seed, 0x0de9u * 1000003ull + frame_idx));
  std::mt19937_64 pixel_rng(detail::hash_combine(spec.seed, 0x9148u * 1000003ull + frame_idx));
  std::normal_distribution<double> dnoise(0.0, spec.depth_sigma > 0 ? spec.depth_sigma : 1.0);
  std::normal_distribution<double> pnoise(0.0, spec.pixel_sigma > 0 ? spec.pixel_sigma : 1.0);
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      double z = truth.depth_exact.at(x, y);
      if (z > 0.0) {
        if (spec.depth_sigma > 0) z += dnoise(depth_rng);
        const long long raw = std::llround(z * k.depth_scale);
        frame.depth.at(x, y) = static_cast<uint16_t>(std::clamp<long long>(raw, 0, 65535));
      }
      if (spec.pixel_sigma > 0) {
        for (int c = 0; c < 3; ++c) {
          const double v = frame.rgb.at(x, y, c) + pnoise(pixel_rng);
          frame.rgb.at(x, y, c) = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
        }
      }
    }
  }

  frame.mask = std::move(mask);
  frame.gray = to_gray(frame.rgb);

  for (size_t oi = 0; oi < spec.objects.size(); ++oi) {
    RenderTruth::ObjectState os;
    os.name = spec.objects[oi].name;
    os.code = spec.code_of(oi);
    os.two = spec.objects[oi].pose_at(t);
    // Centroid speed by forward difference; last frame reuses the previous
    // interval so constant-velocity tracks report a constant speed.
    const int i0 = (frame_idx + 1 < spec.frames) ? frame_idx : frame_idx - 1;
    if (i0 >= 0 && spec.frames > 1) {
      const Vec3 c0 = spec.objects[oi].pose_at(spec.timestamp(i0)).t();
      const Vec3 c1 = spec.objects[oi].pose_at(spec.timestamp(i0 + 1)).t();
      os.speed = (c1 - c0).norm() * spec.fps;
    }
    truth.objects.push_back(std::move(os));
  }
  return {std::move(frame), std::move(truth)};
}

/// Ground-truth forward flow from frame i to i+1, derived from exact depth
/// and the known rigid motions. Zero where no surface or no target
/// projection.
inline ImageF make_gt_flow(const SceneSpec& spec, int frame_idx, const RenderTruth& truth) {
  const Intrinsics& k = spec.intrinsics;
  ImageF flow(k.width, k.height, 2, 0.0f);
  if (frame_idx + 1 >= spec.frames) return flow;
  const double t0 = spec.timestamp(frame_idx);
  const double t1 = spec.timestamp(frame_idx + 1);
  const Pose tcw1 = spec.camera_at(t1).inverse();
  std::vector<Pose> motions;  // world(t0) -> world(t1) per object
  for (const auto& o : spec.objects)
    motions.push_back(o.pose_at(t1) * o.pose_at(t0).inverse());
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const double z = truth.depth_exact.at(x, y);
      if (z <= 0.0) continue;
      const Vec3 p_cam((x - k.cx) / k.fx * z, (y - k.cy) / k.fy * z, z);
      Vec3 p_world = truth.cam_twc * p_cam;
      const int owner = truth.owner.at(x, y);
      if (owner >= 0) p_world = motions[owner] * p_world;
      const auto px = project(tcw1 * p_world, k);
      if (!px) continue;
      flow.at(x, y, 0) = static_cast<float>(px->u - x);
      flow.at(x, y, 1) = static_cast<float>(px->v - y);
    }
  }
  return flow;
}

/// Trunk keypoints for person-like objects: shoulders at height fraction
/// 0.82 at +/-0.4 width, mid-hip at fraction 0.48 centered, all at
/// mid-depth. Local y points down (toward the feet) in scenes that follow
/// the camera convention.
inline std::vector<JointKeypoint> make_keypoints(const SceneSpec& spec, int frame_idx) {
  const Intrinsics& k = spec.intrinsics;
  const double t = spec.timestamp(frame_idx);
  const Pose tcw = spec.camera_at(t).inverse();
  std::vector<JointKeypoint> out;
  for (size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const auto& o = spec.objects[oi];
    if (!o.emit_keypoints) continue;
    const Pose two = o.pose_at(t);
    const double sx = o.size.x(), sy = o.size.y();
    const struct {
      const char* joint;
      Vec3 local;
    } joints[3] = {
        {"left_shoulder", Vec3(-0.4 * sx, (0.5 - 0.82) * sy, 0.0)},
        {"right_shoulder", Vec3(0.4 * sx, (0.5 - 0.82) * sy, 0.0)},
        {"mid_hip", Vec3(0.0, (0.5 - 0.48) * sy, 0.0)},
    };
    for (const auto& j : joints) {
      const auto px = project(tcw * (two * j.local), k);
      if (!px) continue;
      out.push_back({spec.code_of(oi), j.joint, *px, 1.0});
    }
  }
  return out;
}

/// Writes the full TUM-layout sequence with ground truth. Returns the
/// per-frame truths for tests that need exact geometry.
inline std::vector<RenderTruth> emit_sequence(const SceneSpec& spec,
                                              const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  spec.validate();
  fs::create_directories(out_dir / "rgb");
  fs::create_directories(out_dir / "depth");
  fs::create_directories(out_dir / "masks");
  if (spec.emit_flow) fs::create_directories(out_dir / "flow");
  bool any_keypoints = false;
  for (const auto& o : spec.objects) any_keypoints |= o.emit_keypoints;
  if (any_keypoints) fs::create_directories(out_dir / "keypoints");

  std::vector<IndexEntry> rgb_idx, depth_idx, mask_idx, flow_idx, kp_idx;
  Trajectory gt;
  std::ofstream objects_gt(out_dir / "objects_gt.txt");
  objects_gt << "# frame timestamp name class_id code tx ty tz qx qy qz qw speed_mps\n";

  std::vector<RenderTruth> truths;
  truths.reserve(spec.frames);
  char stamp[64], line[512];
  for (int i = 0; i < spec.frames; ++i) {
    auto [frame, truth] = render(spec, i);
    std::snprintf(stamp, sizeof stamp, "%.6f", frame.timestamp);
    const std::string base = stamp;

    write_pnm(out_dir / "rgb" / (base + ".ppm"), frame.rgb);
    rgb_idx.push_back({frame.timestamp, "rgb/" + base + ".ppm"});
    write_pnm16(out_dir / "depth" / (base + ".pgm"), frame.depth);
    depth_idx.push_back({frame.timestamp, "depth/" + base + ".pgm"});
    write_mask(out_dir / "masks" / (base + ".pgm"), *frame.mask);
    mask_idx.push_back({frame.timestamp, base + ".pgm"});
    if (spec.emit_flow && i + 1 < spec.frames) {
      write_flo(out_dir / "flow" / (base + ".flo"), make_gt_flow(spec, i, truth));
      flow_idx.push_back({frame.timestamp, base + ".flo"});
    }
    if (any_keypoints) {
      write_keypoints(out_dir / "keypoints" / (base + ".txt"), make_keypoints(spec, i));
      kp_idx.push_back({frame.timestamp, base + ".txt"});
    }

    gt.push_back(frame.timestamp, truth.cam_twc);
    for (const auto& os : truth.objects) {
      const auto q = pose_to_quaternion(os.two);
      std::snprintf(line, sizeof line,
                    "%d %.6f %s %d %u %.9g %.9g %.9g %.9g %.9g %.9g %.9g %.6f\n", i,
                    frame.timestamp, os.name.c_str(), ClassRegistry::class_of(os.code), os.code,
                    q[0], q[1], q[2], q[3], q[4], q[5], q[6], os.speed);
      objects_gt << line;
    }
    truths.push_back(std::move(truth));
  }

  write_index_file(out_dir / "rgb.txt", rgb_idx, "timestamp filename");
  write_index_file(out_dir / "depth.txt", depth_idx, "timestamp filename");
  write_index_file(out_dir / "masks" / "masks.txt", mask_idx, "timestamp filename");
  if (spec.emit_flow) write_index_file(out_dir / "flow" / "flow.txt", flow_idx, "timestamp filename");
  if (any_keypoints)
    write_index_file(out_dir / "keypoints" / "keypoints.txt", kp_idx, "timestamp filename");
  write_class_registry(out_dir / "masks" / "classes.txt", spec.classes);
  write_trajectory(out_dir / "groundtruth.txt", gt);
  write_intrinsics(out_dir / "intrinsics.txt", spec.intrinsics);
  return truths;
}

// ---------------------------------------------------------------------------
// Scene file grammar
//
// Plain-text sections with key=value lines, '#' comments:
//
//   [scene]       frames, fps, seed, depth_sigma, pixel_sigma, emit_flow
//   [intrinsics]  fx fy cx cy width height depth_scale
//   [class]       id, name, prior                       (repeatable)
//   [camera]      waypoint = t tx ty tz qx qy qz qw     (repeatable key)
//   [box]         center = x y z, size = x y z, checker|noise = cell, seed
//   [plane]       center, axis = x|y|z, size = su sv, checker|noise, seed
//   [object]      name, class, size, checker|noise, seed, keypoints,
//                 waypoint = t tx ty tz qx qy qz qw     (repeatable key)

inline SceneSpec parse_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene " + path.string());
  SceneSpec spec;
  std::string section;
  std::string line;
  int line_no = 0;
  int class_id = -1;
  std::string class_name;
  bool class_prior = false;

  auto flush_class = [&]() {
    if (section == "class") {
      if (class_id < 0) detail::parse_fail(path, line_no, "[class] needs an id");
      spec.classes.add(class_id, class_name.empty() ? "class" + std::to_string(class_id) : class_name,
                       class_prior);
      class_id = -1;
      class_name.clear();
      class_prior = false;
    }
  };

  auto parse_vec3 = [&](const std::string& v) {
    auto tok = detail::split_ws(v);
    if (tok.size() != 3) detail::parse_fail(path, line_no, "expected three numbers");
    return Vec3(std::stod(tok[0]), std::stod(tok[1]), std::stod(tok[2]));
  };
  auto parse_waypoint = [&](const std::string& v) {
    auto tok = detail::split_ws(v);
    if (tok.size() != 8) detail::parse_fail(path, line_no, "waypoint needs 't tx ty tz qx qy qz qw'");
    double f[8];
    for (int i = 0; i < 8; ++i) f[i] = std::stod(tok[i]);
    return TimedPose{f[0], pose_from_quaternion(f[1], f[2], f[3], f[4], f[5], f[6], f[7])};
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_comment_or_blank(line)) continue;
    std::string trimmed;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c)) || !trimmed.empty()) trimmed += c;
    while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.back())))
      trimmed.pop_back();

    if (trimmed.front() == '[') {
      if (trimmed.back() != ']') detail::parse_fail(path, line_no, "unterminated section header");
      flush_class();
      section = trimmed.substr(1, trimmed.size() - 2);
      if (section == "box") spec.boxes.emplace_back();
      else if (section == "plane") spec.planes.emplace_back();
      else if (section == "object") spec.objects.emplace_back();
      else if (section != "scene" && section != "intrinsics" && section != "camera" &&
               section != "class")
        detail::parse_fail(path, line_no, "unknown section [" + section + "]");
      continue;
    }

    const auto eq = trimmed.find('=');
    if (eq == std::string::npos) detail::parse_fail(path, line_no, "expected key = value");
    std::string key = trimmed.substr(0, eq);
    std::string value = trimmed.substr(eq + 1);
    while (!key.empty() && std::isspace(static_cast<unsigned char>(key.back()))) key.pop_back();
    while (!value.empty() && std::isspace(static_cast<unsigned char>(value.front())))
      value.erase(value.begin());

    try {
      if (section == "scene") {
        if (key == "frames") spec.frames = std::stoi(value);
        else if (key == "fps") spec.fps = std::stod(value);
        else if (key == "seed") spec.seed = std::stoull(value);
        else if (key == "depth_sigma") spec.depth_sigma = std::stod(value);
        else if (key == "pixel_sigma") spec.pixel_sigma = std::stod(value);
        else if (key == "emit_flow") spec.emit_flow = std::stoi(value) != 0;
        else detail::parse_fail(path, line_no, "unknown key '" + key + "' in [scene]");
      } else if (section == "intrinsics") {
        if (key == "fx") spec.intrinsics.fx = std::stod(value);
        else if (key == "fy") spec.intrinsics.fy = std::stod(value);
        else if (key == "cx") spec.intrinsics.cx = std::stod(value);
        else if (key == "cy") spec.intrinsics.cy = std::stod(value);
        else if (key == "width") spec.intrinsics.width = std::stoi(value);
        else if (key == "height") spec.intrinsics.height = std::stoi(value);
        else if (key == "depth_scale") spec.intrinsics.depth_scale = std::stod(value);
        else detail::parse_fail(path, line_no, "unknown key '" + key + "' in [intrinsics]");
      } else if (section == "class") {
        if (key == "id") class_id = std::stoi(value);
        else if (key == "name") class_name = value;
        else if (key == "prior") class_prior = std::stoi(value) != 0;
        else detail::parse_fail(path, line_no, "unknown key '" + key + "' in [class]");
      } else if (section == "camera") {
        if (key == "waypoint") spec.camera.push_back(parse_waypoint(value));
        else detail::parse_fail(path, line_no, "unknown key '" + key + "' in [camera]");
      } else if (section == "box") {
        auto& b = spec.boxes.back();
        if (key == "center") b.center = parse_vec3(value);
        else if (key == "size") b.size = parse_vec3(value);
        else if (key == "checker") { b.tex.kind = TextureSpec::Kind::checker; b.tex.cell = std::stod(value); }
        else if (key == "noise") { b.tex.kind = TextureSpec::Kind::noise; b.tex.cell = std::stod(value); }
        else if (key == "seed") b.tex.seed = static_cast<uint32_t>(std::stoul(value));
        else detail::parse_fail(path, line_no, "unknown key '" + key + "' in [box]");
      } else if (section == "plane") {
        auto& p = spec.planes.back();
        if (key == "center") p.center = parse_vec3(value);
        else if (key == "axis") {
          if (value == "x") p.axis = 0;
          else if (value == "y") p.axis = 1;
          else if (value == "z") p.axis = 2;
          else detail::parse_fail(path, line_no, "axis must be x, y, or z");
        } else if (key == "size") {
          auto tok = detail::split_ws(value);
          if (tok.size() != 2) detail::parse_fail(path, line_no, "plane size needs 'su sv'");
          p.su = std::stod(tok[0]);
          p.sv = std::stod(tok[1]);
        } else if (key == "checker") { p.tex.kind = TextureSpec::Kind::checker; p.tex.cell = std::stod(value); }
        else if (key == "noise") { p.tex.kind = TextureSpec::Kind::noise; p.tex.cell = std::stod(value); }
        else if (key == "seed") p.tex.seed = static_cast<uint32_t>(std::stoul(value));
        else detail::parse_fail(path, line_no, "unknown key '" + key + "' in [plane]");
      } else if (section == "object") {
        auto& o = spec.objects.back();
        if (key == "name") o.name = value;
        else if (key == "class") o.class_id = std::stoi(value);
        else if (key == "size") o.size = parse_vec3(value);
        else if (key == "checker") { o.tex.kind = TextureSpec::Kind::checker; o.tex.cell = std::stod(value); }
        else if (key == "noise") { o.tex.kind = TextureSpec::Kind::noise; o.tex.cell = std::stod(value); }
        else if (key == "seed") o.tex.seed = static_cast<uint32_t>(std::stoul(value));
        else if (key == "keypoints") o.emit_keypoints = std::stoi(value) != 0;
        else if (key == "waypoint") o.track.push_back(parse_waypoint(value));
        else detail::parse_fail(path, line_no, "unknown key '" + key + "' in [object]");
      } else {
        detail::parse_fail(path, line_no, "key outside any section");
      }
    } catch (const std::invalid_argument& e) {
      detail::parse_fail(path, line_no, e.what());
    } catch (const std::out_of_range&) {
      detail::parse_fail(path, line_no, "number out of range");
    }
  }
  flush_class();
  spec.validate();
  return spec;
}

}  // namespace dyvo
