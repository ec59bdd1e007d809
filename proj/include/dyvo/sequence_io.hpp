// TUM-layout RGB-D sequence loading plus the text formats the pipeline
// exchanges: index files ("timestamp filename"), trajectories (8-field TUM
// lines), panoptic masks with a class registry sidecar, Middlebury .flo
// fields, skeleton keypoint files, and ASCII point clouds.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dyvo/geometry.hpp"
#include "dyvo/image.hpp"

namespace dyvo {

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline bool is_comment_or_blank(const std::string& line) {
  for (char c : line) {
    if (c == '#') return true;
    if (!std::isspace(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

[[noreturn]] inline void parse_fail(const std::filesystem::path& path, int line_no,
                                    const std::string& what) {
  throw IoError(path.filename().string() + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Class registry and panoptic masks

struct ClassInfo {
  std::string name;
  bool prior_dynamic = false;
};

/// Panoptic label codes pack class and instance as class_id * 1000 +
/// instance_index (instance >= 1 for thing pixels, code 0 = unlabeled stuff).
class ClassRegistry {
 public:
  static constexpr uint32_t kInstanceBase = 1000;

  static int class_of(uint32_t code) { return static_cast<int>(code / kInstanceBase); }
  static int instance_of(uint32_t code) { return static_cast<int>(code % kInstanceBase); }

  void add(int id, const std::string& name, bool prior_dynamic) {
    classes_[id] = ClassInfo{name, prior_dynamic};
  }
  bool contains(int id) const { return classes_.count(id) > 0; }
  const ClassInfo& info(int id) const {
    auto it = classes_.find(id);
    if (it == classes_.end())
      throw std::out_of_range("class registry: unknown class id " + std::to_string(id));
    return it->second;
  }
  /// Unregistered classes count as static things rather than erroring: a
  /// mask may carry labels the deployment never declared a prior for.
  bool prior_dynamic_code(uint32_t code) const {
    if (code == 0) return false;
    auto it = classes_.find(class_of(code));
    return it != classes_.end() && it->second.prior_dynamic;
  }
  const std::map<int, ClassInfo>& classes() const { return classes_; }
  bool empty() const { return classes_.empty(); }

 private:
  std::map<int, ClassInfo> classes_;
};

/// classes.txt lines: "class_id name prior_flag".
inline ClassRegistry read_class_registry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open class registry " + path.string());
  ClassRegistry reg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_comment_or_blank(line)) continue;
    auto tok = detail::split_ws(line);
    if (tok.size() != 3) detail::parse_fail(path, line_no, "expected 'class_id name prior_flag'");
    try {
      reg.add(std::stoi(tok[0]), tok[1], std::stoi(tok[2]) != 0);
    } catch (const std::logic_error&) {
      detail::parse_fail(path, line_no, "malformed class entry");
    }
  }
  return reg;
}

inline void write_class_registry(const std::filesystem::path& path, const ClassRegistry& reg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write class registry " + path.string());
  out << "# class_id name prior_flag\n";
  for (const auto& [id, info] : reg.classes())
    out << id << " " << info.name << " " << (info.prior_dynamic ? 1 : 0) << "\n";
}

struct PanopticMask {
  Image<uint32_t> labels;

  uint32_t at(int x, int y) const { return labels.at(x, y); }

  /// Sorted unique nonzero codes present in the mask.
  std::vector<uint32_t> instance_codes() const {
    std::set<uint32_t> codes;
    for (uint32_t c : labels.data)
      if (c != 0) codes.insert(c);
    return {codes.begin(), codes.end()};
  }
};

/// Loads a 16-bit label image and validates every code against the registry.
inline PanopticMask load_mask(const std::filesystem::path& path, const ClassRegistry& reg) {
  Image16 raw = read_pnm16(path);
  PanopticMask mask;
  mask.labels = Image<uint32_t>(raw.width, raw.height, 1);
  std::set<uint32_t> seen;
  for (size_t i = 0; i < raw.data.size(); ++i) {
    mask.labels.data[i] = raw.data[i];
    if (raw.data[i] != 0) seen.insert(raw.data[i]);
  }
  for (uint32_t code : seen) {
    const int cid = ClassRegistry::class_of(code);
    if (!reg.contains(cid))
      throw IoError("mask " + path.filename().string() + ": unknown class id " +
                    std::to_string(cid) + " (code " + std::to_string(code) + ")");
    if (ClassRegistry::instance_of(code) == 0)
      throw IoError("mask " + path.filename().string() + ": thing code " +
                    std::to_string(code) + " has instance index 0");
  }
  return mask;
}

inline void write_mask(const std::filesystem::path& path, const PanopticMask& mask) {
  Image16 raw(mask.labels.width, mask.labels.height, 1);
  for (size_t i = 0; i < raw.data.size(); ++i) {
    if (mask.labels.data[i] > 65535)
      throw IoError("mask code exceeds 16-bit file range");
    raw.data[i] = static_cast<uint16_t>(mask.labels.data[i]);
  }
  write_pnm16(path, raw);
}

// ---------------------------------------------------------------------------
// Timestamp association

/// Greedy mutual nearest-neighbor pairing of two timestamp lists. Candidate
/// pairs within max_diff are taken in order of |dt| (ties broken by index so
/// the result is symmetric in the argument order); each index is used once.
/// The result is sorted by the first index.
inline std::vector<std::pair<int, int>> associate(const std::vector<double>& a,
                                                  const std::vector<double>& b,
                                                  double max_diff) {
  struct Cand {
    double dt;
    int i, j;
  };
  std::vector<int> order_b(b.size());
  for (size_t j = 0; j < b.size(); ++j) order_b[j] = static_cast<int>(j);
  std::sort(order_b.begin(), order_b.end(), [&](int x, int y) { return b[x] < b[y]; });

  std::vector<Cand> cands;
  for (size_t i = 0; i < a.size(); ++i) {
    // Window of b values within tolerance of a[i].
    auto lo = std::lower_bound(order_b.begin(), order_b.end(), a[i] - max_diff,
                               [&](int j, double v) { return b[j] < v; });
    for (auto it = lo; it != order_b.end() && b[*it] <= a[i] + max_diff; ++it)
      cands.push_back({std::abs(a[i] - b[*it]), static_cast<int>(i), *it});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
    if (x.dt != y.dt) return x.dt < y.dt;
    const int xmin = std::min(x.i, x.j), ymin = std::min(y.i, y.j);
    if (xmin != ymin) return xmin < ymin;
    const int xmax = std::max(x.i, x.j), ymax = std::max(y.i, y.j);
    if (xmax != ymax) return xmax < ymax;
    return x.i < y.i;
  });

  std::vector<char> used_a(a.size(), 0), used_b(b.size(), 0);
  std::vector<std::pair<int, int>> pairs;
  for (const Cand& c : cands) {
    if (used_a[c.i] || used_b[c.j]) continue;
    used_a[c.i] = used_b[c.j] = 1;
    pairs.emplace_back(c.i, c.j);
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

// ---------------------------------------------------------------------------
// Index files ("timestamp filename")

struct IndexEntry {
  double timestamp;
  std::string filename;
};

inline std::vector<IndexEntry> read_index_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open index file " + path.string());
  std::vector<IndexEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_comment_or_blank(line)) continue;
    auto tok = detail::split_ws(line);
    if (tok.size() != 2) detail::parse_fail(path, line_no, "expected 'timestamp filename'");
    try {
      entries.push_back({std::stod(tok[0]), tok[1]});
    } catch (const std::logic_error&) {
      detail::parse_fail(path, line_no, "malformed timestamp");
    }
    if (entries.size() > 1 && entries.back().timestamp <= entries[entries.size() - 2].timestamp)
      detail::parse_fail(path, line_no, "timestamps must strictly increase");
  }
  return entries;
}

inline void write_index_file(const std::filesystem::path& path,
                             const std::vector<IndexEntry>& entries,
                             const std::string& header) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write index file " + path.string());
  if (!header.empty()) out << "# " << header << "\n";
  char buf[64];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%.6f", e.timestamp);
    out << buf << " " << e.filename << "\n";
  }
}

// ---------------------------------------------------------------------------
// Skeleton keypoints

struct JointKeypoint {
  uint32_t instance_code = 0;
  std::string joint;
  Pixel px;
  double confidence = 0.0;
};

inline std::vector<JointKeypoint> read_keypoints(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open keypoint file " + path.string());
  std::vector<JointKeypoint> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_comment_or_blank(line)) continue;
    auto tok = detail::split_ws(line);
    if (tok.size() != 5)
      detail::parse_fail(path, line_no, "expected 'instance_id joint_name u v confidence'");
    try {
      out.push_back({static_cast<uint32_t>(std::stoul(tok[0])), tok[1],
                     Pixel{std::stod(tok[2]), std::stod(tok[3])}, std::stod(tok[4])});
    } catch (const std::logic_error&) {
      detail::parse_fail(path, line_no, "malformed keypoint entry");
    }
  }
  return out;
}

inline void write_keypoints(const std::filesystem::path& path,
                            const std::vector<JointKeypoint>& kps) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write keypoint file " + path.string());
  char buf[128];
  for (const auto& kp : kps) {
    std::snprintf(buf, sizeof buf, "%u %s %.3f %.3f %.3f\n", kp.instance_code,
                  kp.joint.c_str(), kp.px.u, kp.px.v, kp.confidence);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Dense optical flow (.flo)

inline constexpr float kFloMagic = 202021.25f;

inline void write_flo(const std::filesystem::path& path, const ImageF& flow) {
  if (flow.channels != 2) throw IoError("flo: flow field must have 2 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("flo: cannot open " + path.string() + " for writing");
  const float magic = kFloMagic;
  const int32_t w = flow.width, h = flow.height;
  out.write(reinterpret_cast<const char*>(&magic), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(flow.data.data()),
            static_cast<std::streamsize>(flow.data.size() * sizeof(float)));
  if (!out) throw IoError("flo: short write on " + path.string());
}

inline ImageF read_flo(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("flo: cannot open " + path.string());
  float magic = 0.0f;
  int32_t w = 0, h = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in || magic != kFloMagic) throw IoError("flo: bad magic in " + path.string());
  if (w <= 0 || h <= 0) throw IoError("flo: bad dimensions in " + path.string());
  ImageF flow(w, h, 2);
  in.read(reinterpret_cast<char*>(flow.data.data()),
          static_cast<std::streamsize>(flow.data.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(flow.data.size() * sizeof(float)))
    throw IoError("flo: truncated data in " + path.string());
  return flow;
}

// ---------------------------------------------------------------------------
// Trajectories (TUM 8-field lines, camera-to-world)

struct Trajectory {
  std::vector<double> timestamps;
  std::vector<Pose> poses;

  size_t size() const { return timestamps.size(); }
  void push_back(double t, const Pose& p) {
    timestamps.push_back(t);
    poses.push_back(p);
  }
};

inline Trajectory read_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trajectory " + path.string());
  Trajectory traj;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_comment_or_blank(line)) continue;
    auto tok = detail::split_ws(line);
    if (tok.size() != 8)
      detail::parse_fail(path, line_no, "expected 8 fields 'ts tx ty tz qx qy qz qw'");
    double v[8];
    try {
      for (int i = 0; i < 8; ++i) v[i] = std::stod(tok[i]);
    } catch (const std::logic_error&) {
      detail::parse_fail(path, line_no, "malformed number");
    }
    try {
      traj.push_back(v[0], pose_from_quaternion(v[1], v[2], v[3], v[4], v[5], v[6], v[7]));
    } catch (const std::invalid_argument& e) {
      detail::parse_fail(path, line_no, e.what());
    }
  }
  return traj;
}

inline void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write trajectory " + path.string());
  out << "# timestamp tx ty tz qx qy qz qw\n";
  char buf[256];
  for (size_t i = 0; i < traj.size(); ++i) {
    const auto q = pose_to_quaternion(traj.poses[i]);
    std::snprintf(buf, sizeof buf, "%.6f %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n",
                  traj.timestamps[i], q[0], q[1], q[2], q[3], q[4], q[5], q[6]);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// ASCII point clouds

struct CloudPoint {
  Vec3 p = Vec3::Zero();
  std::array<uint8_t, 3> rgb = {0, 0, 0};
};

inline void write_cloud(const std::filesystem::path& path, const std::vector<CloudPoint>& pts) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write cloud " + path.string());
  out << pts.size() << "\n";
  char buf[160];
  for (const auto& pt : pts) {
    std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f %d %d %d\n", pt.p.x(), pt.p.y(), pt.p.z(),
                  pt.rgb[0], pt.rgb[1], pt.rgb[2]);
    out << buf;
  }
}

inline std::vector<CloudPoint> read_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cloud " + path.string());
  size_t count = 0;
  if (!(in >> count)) throw IoError("cloud " + path.string() + ": missing count header");
  std::vector<CloudPoint> pts;
  pts.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    CloudPoint pt;
    int r, g, b;
    if (!(in >> pt.p.x() >> pt.p.y() >> pt.p.z() >> r >> g >> b))
      throw IoError("cloud " + path.string() + ": truncated at point " + std::to_string(i));
    pt.rgb = {static_cast<uint8_t>(r), static_cast<uint8_t>(g), static_cast<uint8_t>(b)};
    pts.push_back(pt);
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Camera intrinsics sidecar

inline Intrinsics read_intrinsics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open intrinsics " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_comment_or_blank(line)) continue;
    auto tok = detail::split_ws(line);
    if (tok.size() != 7)
      detail::parse_fail(path, line_no, "expected 'fx fy cx cy width height depth_scale'");
    Intrinsics k;
    try {
      k.fx = std::stod(tok[0]);
      k.fy = std::stod(tok[1]);
      k.cx = std::stod(tok[2]);
      k.cy = std::stod(tok[3]);
      k.width = std::stoi(tok[4]);
      k.height = std::stoi(tok[5]);
      k.depth_scale = std::stod(tok[6]);
    } catch (const std::logic_error&) {
      detail::parse_fail(path, line_no, "malformed intrinsics");
    }
    if (!k.valid()) detail::parse_fail(path, line_no, "intrinsics fail validation");
    return k;
  }
  throw IoError("intrinsics " + path.string() + ": empty file");
}

inline void write_intrinsics(const std::filesystem::path& path, const Intrinsics& k) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write intrinsics " + path.string());
  char buf[192];
  std::snprintf(buf, sizeof buf, "# fx fy cx cy width height depth_scale\n%.9g %.9g %.9g %.9g %d %d %.9g\n",
                k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale);
  out << buf;
}

// ---------------------------------------------------------------------------
// Sequences

struct Frame {
  int index = -1;
  double timestamp = 0.0;
  Image8 rgb;
  Image8 gray;
  Image16 depth;
  std::optional<PanopticMask> mask;
  std::optional<ImageF> flow;  // forward flow, this frame to the next
  std::vector<JointKeypoint> keypoints;
};

struct SequenceConfig {
  double assoc_tolerance = 0.02;  // seconds
  double depth_scale = 5000.0;    // raw units per meter
  bool require_mask = false;
};

struct SequencePaths {
  std::filesystem::path dir;        // holds rgb.txt and depth.txt
  std::filesystem::path masks;      // holds masks.txt and classes.txt; empty = none
  std::filesystem::path flow;       // holds flow.txt; empty = none
  std::filesystem::path keypoints;  // holds keypoints.txt; empty = none
};

/// Associated frame entries; images load lazily through load().
class Sequence {
 public:
  struct Entry {
    double timestamp = 0.0;
    std::filesystem::path rgb, depth, mask, flow, keypoints;  // empty = absent
  };

  static Sequence open(const SequencePaths& paths, const SequenceConfig& cfg) {
    Sequence seq;
    seq.cfg_ = cfg;
    const auto rgb_list = read_index_file(paths.dir / "rgb.txt");
    const auto depth_list = read_index_file(paths.dir / "depth.txt");
    std::vector<double> rgb_ts, depth_ts;
    for (const auto& e : rgb_list) rgb_ts.push_back(e.timestamp);
    for (const auto& e : depth_list) depth_ts.push_back(e.timestamp);

    const auto pairs = associate(rgb_ts, depth_ts, cfg.assoc_tolerance);
    seq.skipped_ = static_cast<int>(rgb_list.size() - pairs.size());
    for (const auto& [i, j] : pairs) {
      Entry e;
      e.timestamp = rgb_list[i].timestamp;
      e.rgb = paths.dir / rgb_list[i].filename;
      e.depth = paths.dir / depth_list[j].filename;
      seq.entries_.push_back(std::move(e));
    }

    auto attach = [&](const std::filesystem::path& root, const std::string& index_name,
                      auto assign) {
      if (root.empty()) return;
      const auto list = read_index_file(root / index_name);
      std::vector<double> ts, frame_ts;
      for (const auto& e : list) ts.push_back(e.timestamp);
      for (const auto& e : seq.entries_) frame_ts.push_back(e.timestamp);
      for (const auto& [fi, li] : associate(frame_ts, ts, cfg.assoc_tolerance))
        assign(seq.entries_[fi], root / list[li].filename);
    };
    attach(paths.masks, "masks.txt", [](Entry& e, std::filesystem::path p) { e.mask = std::move(p); });
    attach(paths.flow, "flow.txt", [](Entry& e, std::filesystem::path p) { e.flow = std::move(p); });
    attach(paths.keypoints, "keypoints.txt",
           [](Entry& e, std::filesystem::path p) { e.keypoints = std::move(p); });

    if (!paths.masks.empty()) seq.registry_ = read_class_registry(paths.masks / "classes.txt");

    if (cfg.require_mask) {
      std::vector<Entry> kept;
      for (auto& e : seq.entries_) {
        if (e.mask.empty()) {
          ++seq.skipped_;
          continue;
        }
        kept.push_back(std::move(e));
      }
      seq.entries_ = std::move(kept);
    }
    return seq;
  }

  size_t size() const { return entries_.size(); }
  const Entry& entry(size_t i) const { return entries_.at(i); }
  const ClassRegistry& registry() const { return registry_; }
  const SequenceConfig& config() const { return cfg_; }

  /// Number of index entries dropped during association plus frames that
  /// failed to load.
  int skipped() const { return skipped_; }

  /// Loads one frame; unreadable image data skips the frame and bumps the
  /// skip counter instead of failing the run.
  std::optional<Frame> load(size_t i) {
    const Entry& e = entries_.at(i);
    Frame f;
    f.index = static_cast<int>(i);
    f.timestamp = e.timestamp;
    try {
      f.rgb = read_pnm(e.rgb);
      f.depth = read_pnm16(e.depth);
      if (!e.mask.empty()) f.mask = load_mask(e.mask, registry_);
      if (!e.flow.empty()) f.flow = read_flo(e.flow);
      if (!e.keypoints.empty()) f.keypoints = read_keypoints(e.keypoints);
    } catch (const IoError&) {
      ++skipped_;
      return std::nullopt;
    }
    f.gray = to_gray(f.rgb);
    return f;
  }

 private:
  std::vector<Entry> entries_;
  ClassRegistry registry_;
  SequenceConfig cfg_;
  int skipped_ = 0;
};

/// Convenience opener: picks up masks/, flow/, keypoints/ subdirectories
/// automatically when their index files exist.
inline Sequence load_sequence(const std::filesystem::path& dir, const SequenceConfig& cfg) {
  namespace fs = std::filesystem;
  SequencePaths paths;
  paths.dir = dir;
  if (fs::exists(dir / "masks" / "masks.txt")) paths.masks = dir / "masks";
  if (fs::exists(dir / "flow" / "flow.txt")) paths.flow = dir / "flow";
  if (fs::exists(dir / "keypoints" / "keypoints.txt")) paths.keypoints = dir / "keypoints";
  return Sequence::open(paths, cfg);
}

}  // namespace dyvo
