// Static-world mapping: a sparse map of descriptor-tagged 3D points for
// tracking, offline dense fusion of keyframe depth into a colored cloud with
// dynamic content excluded, and a log-odds occupancy octree over that cloud.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "dyvo/features.hpp"
#include "dyvo/geometry.hpp"
#include "dyvo/sequence_io.hpp"

namespace dyvo {

struct MapPoint {
  Vec3 position = Vec3::Zero();  // world frame, running average over observations
  Descriptor descriptor{};
  int observations = 1;
  int last_seen = 0;      // frame index
  int last_seen_kf = 0;   // keyframe ordinal
  AnchorPatch anchor{};   // appearance at the creating detection
  int anchor_octave = 0;  // pyramid level the anchor was sampled on
  // Local surface triplet for appearance warping: the anchor's surface point
  // and the surface points a few pixels right and down of it in the creating
  // view. Projecting all three into a new view yields the affine that maps
  // anchor offsets into that view. Frozen at creation, like the anchor.
  std::array<Vec3, 3> warp_tri{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
};

/// Pixel pitch of the warp triplet's right/down offsets.
constexpr double kWarpTriStep = 4.0;

/// Sparse map owned by the tracking loop. Points are created at keyframes,
/// refreshed by per-frame observations, and culled after going unobserved
/// for a configurable number of keyframes.
class SparseMap {
 public:
  int keyframe_count() const { return kf_; }
  void begin_keyframe() { ++kf_; }

  const std::vector<MapPoint>& points() const { return points_; }
  size_t size() const { return points_.size(); }

  /// Indices of points seen within the last `window` keyframes.
  std::vector<int> local_indices(int window = 10) const {
    std::vector<int> out;
    for (size_t i = 0; i < points_.size(); ++i)
      if (points_[i].last_seen_kf > kf_ - window) out.push_back(static_cast<int>(i));
    return out;
  }

  /// Re-observation: bump the count and fold the new world position into the
  /// running average.
  void observe(int index, const Vec3& world, int frame_index) {
    MapPoint& mp = points_.at(index);
    ++mp.observations;
    mp.position += (world - mp.position) / mp.observations;
    mp.last_seen = frame_index;
    mp.last_seen_kf = kf_;
  }

  /// Per-frame visibility refresh: keeps a tracked point inside the local
  /// window and clear of the cull without re-estimating its geometry. The
  /// position fold is reserved for observe(): a point re-measured under
  /// every frame's estimated pose and folded back in would absorb that
  /// pose's error, and the next pose would be solved against the map it
  /// just biased.
  void touch(int index, int frame_index) {
    MapPoint& mp = points_.at(index);
    mp.last_seen = frame_index;
    mp.last_seen_kf = kf_;
  }

  /// Keyframe insertion. A feature becomes a map point when it has valid
  /// depth, is not labeled with a prior-dynamic class, is not on an instance
  /// flagged dynamic this frame, and is not marked in `skip` (already
  /// associated with an existing point). Near-duplicates of a local point
  /// (within 2 cm and descriptor distance < 30) are dropped: re-inserting
  /// the same corner under a fresh identity would later defeat the matcher's
  /// ratio test. Returns the number of points inserted.
  int insert_features(const std::vector<FeaturePoint>& features, const std::vector<bool>& skip,
                      const std::set<uint32_t>& flagged, const ClassRegistry& registry,
                      const Pose& twc, const Intrinsics& k, int frame_index) {
    const auto local = local_indices();
    int inserted = 0;
    for (size_t i = 0; i < features.size(); ++i) {
      if (!skip.empty() && skip[i]) continue;
      const FeaturePoint& f = features[i];
      if (f.raw_depth == 0) continue;
      if (f.label_code != 0 && registry.prior_dynamic_code(f.label_code)) continue;
      if (flagged.count(f.label_code)) continue;
      const auto cam = back_project(f.px, f.raw_depth, k);
      if (!cam) continue;
      const Vec3 world = twc * *cam;
      bool duplicate = false;
      for (int li : local) {
        if ((points_[li].position - world).norm() < 0.02 &&
            hamming(points_[li].descriptor, f.descriptor) < 30) {
          duplicate = true;
          break;
        }
      }
      if (duplicate) continue;
      MapPoint mp;
      mp.position = world;
      mp.descriptor = f.descriptor;
      mp.last_seen = frame_index;
      mp.last_seen_kf = kf_;
      mp.anchor = f.patch;
      mp.anchor_octave = f.octave;
      // Surface triplet from the measured depth slope; a fronto-parallel
      // offset stands in when the slope runs the depth out of range.
      mp.warp_tri[0] = world;
      auto tri = [&](double du, double dv, double dz) {
        const Pixel q{f.px.u + du, f.px.v + dv};
        auto c = back_project(q, f.raw_depth + dz, k);
        if (!c) c = back_project(q, f.raw_depth, k);
        return c ? twc * *c : world;
      };
      mp.warp_tri[1] = tri(kWarpTriStep, 0.0, kWarpTriStep * f.dzdu);
      mp.warp_tri[2] = tri(0.0, kWarpTriStep, kWarpTriStep * f.dzdv);
      points_.push_back(mp);
      ++inserted;
    }
    return inserted;
  }

  /// Drops points unobserved for `max_age` keyframes.
  void cull(int max_age = 30) {
    std::vector<MapPoint> kept;
    kept.reserve(points_.size());
    for (auto& mp : points_)
      if (kf_ - mp.last_seen_kf < max_age) kept.push_back(std::move(mp));
    points_ = std::move(kept);
  }

 private:
  std::vector<MapPoint> points_;
  int kf_ = 0;
};

namespace detail {

/// Inverse of the affine that carries anchor-patch offsets into a view at
/// `pose` (world to camera), on a pyramid level with pixel scales (sx, sy).
/// Projects the point's surface triplet and differences the results.
/// nullopt when the triplet leaves the view or the warp degenerates, which
/// the caller treats as an unusable match.
inline std::optional<Eigen::Matrix2d> anchor_warp_inverse(const MapPoint& mp, const Pose& pose,
                                                          const Intrinsics& k, double sx,
                                                          double sy) {
  const auto p0 = project(pose * mp.warp_tri[0], k);
  const auto pu = project(pose * mp.warp_tri[1], k);
  const auto pv = project(pose * mp.warp_tri[2], k);
  if (!p0 || !pu || !pv) return std::nullopt;
  // Full-resolution affine, then conjugate by the level scales on both
  // sides (anchor level and current level share the pyramid geometry).
  Eigen::Matrix2d a;
  a(0, 0) = (pu->u - p0->u) / kWarpTriStep;
  a(0, 1) = (pv->u - p0->u) / kWarpTriStep;
  a(1, 0) = (pu->v - p0->v) / kWarpTriStep;
  a(1, 1) = (pv->v - p0->v) / kWarpTriStep;
  a(0, 1) *= sy / sx;
  a(1, 0) *= sx / sy;
  const double det = a.determinant();
  if (!(det > 0.25 && det < 4.0)) return std::nullopt;
  Eigen::Matrix2d inv;
  inv(0, 0) = a(1, 1) / det;
  inv(0, 1) = -a(0, 1) / det;
  inv(1, 0) = -a(1, 0) / det;
  inv(1, 1) = a(0, 0) / det;
  return inv;
}

}  // namespace detail

/// Everything dense fusion needs about one keyframe, captured at tracking
/// time. `flagged` holds instance codes identified as dynamic at this frame.
struct KeyframeRecord {
  int frame_index = 0;
  double timestamp = 0.0;
  Pose twc;  // camera to world
  Image8 rgb;
  Image16 depth;
  std::optional<PanopticMask> mask;
  std::set<uint32_t> flagged;
};

/// Offline dense fusion over keyframes. Valid-depth pixels that are not
/// under a prior-dynamic class and not under an instance flagged dynamic at
/// that keyframe are back-projected and colored. Points snap to the centers
/// of a resolution/2 voxel grid, first point per voxel wins, so no two
/// output points are closer than resolution/2. With `filter_dynamic` false
/// the mask checks are skipped (the ghosting comparison baseline).
/// `provenance`, when given, receives the source keyframe index per point.
inline std::vector<CloudPoint> fuse_dense(const std::vector<KeyframeRecord>& keyframes,
                                          const ClassRegistry& registry, const Intrinsics& k,
                                          double resolution = 0.05, bool filter_dynamic = true,
                                          std::vector<int>* provenance = nullptr) {
  const double h = resolution / 2.0;
  std::set<std::tuple<long long, long long, long long>> seen;
  std::vector<CloudPoint> cloud;
  if (provenance) provenance->clear();
  for (size_t kfi = 0; kfi < keyframes.size(); ++kfi) {
    const KeyframeRecord& kf = keyframes[kfi];
    for (int y = 0; y < kf.depth.height; ++y) {
      for (int x = 0; x < kf.depth.width; ++x) {
        const uint16_t raw = kf.depth.at(x, y);
        if (raw == 0) continue;
        if (filter_dynamic && kf.mask) {
          const uint32_t code = kf.mask->at(x, y);
          if (code != 0 &&
              (registry.prior_dynamic_code(code) || kf.flagged.count(code)))
            continue;
        }
        const auto cam = back_project({static_cast<double>(x), static_cast<double>(y)}, raw, k);
        if (!cam) continue;
        const Vec3 p = kf.twc * *cam;
        const std::tuple<long long, long long, long long> key(
            static_cast<long long>(std::floor(p.x() / h)),
            static_cast<long long>(std::floor(p.y() / h)),
            static_cast<long long>(std::floor(p.z() / h)));
        if (!seen.insert(key).second) continue;
        CloudPoint cp;
        cp.p = Vec3((std::get<0>(key) + 0.5) * h, (std::get<1>(key) + 0.5) * h,
                    (std::get<2>(key) + 0.5) * h);
        cp.rgb = {kf.rgb.at(x, y, 0), kf.rgb.at(x, y, 1), kf.rgb.at(x, y, 2)};
        cloud.push_back(cp);
        if (provenance) provenance->push_back(static_cast<int>(kfi));
      }
    }
  }
  return cloud;
}

struct OctreeLeaf {
  Vec3 center = Vec3::Zero();
  double log_odds = 0.0;
};

/// Occupancy octree: each inserted point raises its leaf's log-odds by the
/// hit increment, clamped to [-2, 3.5]; a leaf is occupied above 0. Only
/// hits are modeled (no free-space rays).
class OctreeMap {
 public:
  static constexpr double kHitIncrement = 0.85;
  static constexpr double kLogOddsMin = -2.0;
  static constexpr double kLogOddsMax = 3.5;

  OctreeMap() = default;

  double resolution() const { return res_; }
  int depth() const { return depth_; }
  bool empty() const { return nodes_.empty(); }

  std::optional<double> log_odds_at(const Vec3& p) const {
    if (nodes_.empty()) return std::nullopt;
    long long ix, iy, iz;
    if (!leaf_index(p, ix, iy, iz)) return std::nullopt;
    int node = 0;
    for (int level = depth_ - 1; level >= 0; --level) {
      const int child = nodes_[node].child[child_bits(ix, iy, iz, level)];
      if (child < 0) return std::nullopt;
      node = child;
    }
    return nodes_[node].log_odds;
  }

  bool occupied(const Vec3& p) const {
    const auto lo = log_odds_at(p);
    return lo.has_value() && *lo > 0.0;
  }

  /// Occupied leaves sorted by center coordinates.
  std::vector<OctreeLeaf> occupied_leaves() const {
    std::vector<OctreeLeaf> out;
    if (!nodes_.empty()) collect(0, depth_, 0, 0, 0, out);
    std::sort(out.begin(), out.end(), [](const OctreeLeaf& a, const OctreeLeaf& b) {
      return std::tie(a.center.x(), a.center.y(), a.center.z()) <
             std::tie(b.center.x(), b.center.y(), b.center.z());
    });
    return out;
  }

  friend OctreeMap build_octree(const std::vector<CloudPoint>& cloud, double resolution);

 private:
  struct Node {
    std::array<int, 8> child = {-1, -1, -1, -1, -1, -1, -1, -1};
    double log_odds = 0.0;
  };

  static int child_bits(long long ix, long long iy, long long iz, int level) {
    return static_cast<int>(((ix >> level) & 1) | (((iy >> level) & 1) << 1) |
                            (((iz >> level) & 1) << 2));
  }

  bool leaf_index(const Vec3& p, long long& ix, long long& iy, long long& iz) const {
    const long long n = 1ll << depth_;
    const Vec3 rel = (p - origin_) / res_;
    ix = static_cast<long long>(std::floor(rel.x()));
    iy = static_cast<long long>(std::floor(rel.y()));
    iz = static_cast<long long>(std::floor(rel.z()));
    return ix >= 0 && iy >= 0 && iz >= 0 && ix < n && iy < n && iz < n;
  }

  void insert(const Vec3& p) {
    long long ix, iy, iz;
    if (!leaf_index(p, ix, iy, iz)) {
      // Points on the far boundary of the root cube belong to the last leaf.
      const long long n = (1ll << depth_) - 1;
      ix = std::clamp(ix, 0ll, n);
      iy = std::clamp(iy, 0ll, n);
      iz = std::clamp(iz, 0ll, n);
    }
    int node = 0;
    for (int level = depth_ - 1; level >= 0; --level) {
      const int b = child_bits(ix, iy, iz, level);
      if (nodes_[node].child[b] < 0) {
        nodes_[node].child[b] = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
      }
      node = nodes_[node].child[b];
    }
    nodes_[node].log_odds =
        std::clamp(nodes_[node].log_odds + kHitIncrement, kLogOddsMin, kLogOddsMax);
  }

  void collect(int node, int level, long long ix, long long iy, long long iz,
               std::vector<OctreeLeaf>& out) const {
    if (level == 0) {
      if (nodes_[node].log_odds > 0.0)
        out.push_back({origin_ + Vec3((ix + 0.5) * res_, (iy + 0.5) * res_, (iz + 0.5) * res_),
                       nodes_[node].log_odds});
      return;
    }
    for (int b = 0; b < 8; ++b) {
      const int child = nodes_[node].child[b];
      if (child < 0) continue;
      collect(child, level - 1,
              (ix << 1) | (b & 1), (iy << 1) | ((b >> 1) & 1), (iz << 1) | ((b >> 2) & 1), out);
    }
  }

  double res_ = 0.05;
  int depth_ = 0;
  Vec3 origin_ = Vec3::Zero();
  std::vector<Node> nodes_;
};

/// Builds the octree over a cloud: root cube side = resolution * 2^depth
/// with depth the smallest value covering the cloud extent. An empty cloud
/// yields an empty map.
inline OctreeMap build_octree(const std::vector<CloudPoint>& cloud, double resolution = 0.05) {
  if (resolution <= 0) throw std::invalid_argument("octree: resolution must be positive");
  OctreeMap map;
  map.res_ = resolution;
  if (cloud.empty()) return map;
  Vec3 lo = cloud[0].p, hi = cloud[0].p;
  for (const auto& cp : cloud) {
    lo = lo.cwiseMin(cp.p);
    hi = hi.cwiseMax(cp.p);
  }
  const double extent = (hi - lo).maxCoeff();
  double side = resolution;
  int depth = 0;
  while (side < extent) {
    side *= 2;
    ++depth;
  }
  map.depth_ = depth;
  map.origin_ = lo;
  map.nodes_.emplace_back();
  for (const auto& cp : cloud) map.insert(cp.p);
  return map;
}

inline void write_octree(const std::filesystem::path& path, const OctreeMap& map) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write octree " + path.string());
  char line[160];
  std::snprintf(line, sizeof line, "resolution %.6g\n", map.resolution());
  out << line;
  for (const auto& leaf : map.occupied_leaves()) {
    std::snprintf(line, sizeof line, "%.6f %.6f %.6f %.4f\n", leaf.center.x(), leaf.center.y(),
                  leaf.center.z(), leaf.log_odds);
    out << line;
  }
  if (!out) throw IoError("short write " + path.string());
}

/// Reads back the text form: the resolution and the occupied leaf list.
inline std::pair<double, std::vector<OctreeLeaf>> read_octree(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read octree " + path.string());
  std::string word;
  double res = 0;
  if (!(in >> word >> res) || word != "resolution")
    throw IoError("octree " + path.string() + ": bad header");
  std::vector<OctreeLeaf> leaves;
  OctreeLeaf leaf;
  while (in >> leaf.center.x() >> leaf.center.y() >> leaf.center.z() >> leaf.log_odds)
    leaves.push_back(leaf);
  return {res, leaves};
}

}  // namespace dyvo
