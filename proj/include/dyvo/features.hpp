// Sparse feature front end: multi-scale FAST-style corners with steered
// 256-bit binary descriptors and mutual-best Hamming matching. Everything is
// deterministic for a fixed image and config: the sampling pattern is frozen
// from a fixed seed and all tie-breaks are lexicographic.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "dyvo/geometry.hpp"
#include "dyvo/image.hpp"
#include "dyvo/sequence_io.hpp"

namespace dyvo {

using Descriptor = std::array<uint64_t, 4>;  // 256 bits

inline int hamming(const Descriptor& a, const Descriptor& b) {
  int d = 0;
  for (int i = 0; i < 4; ++i) d += std::popcount(a[i] ^ b[i]);
  return d;
}

// Appearance anchor stored with every keypoint: a 13x13 intensity patch
// sampled at the subpixel corner on its own pyramid level. Descriptors decide
// which landmark a feature is; the anchor patch decides where it is, to a
// fraction of a pixel, via align_patch below.
constexpr int kAnchorRadius = 6;
using AnchorPatch = std::array<uint8_t, (2 * kAnchorRadius + 1) * (2 * kAnchorRadius + 1)>;

struct FeaturePoint {
  Pixel px;                 // level-0 pixel coordinates
  int octave = 0;
  double angle = 0.0;       // radians, intensity-centroid orientation
  Descriptor descriptor{};
  uint16_t raw_depth = 0;   // sensor units at the keypoint, 0 = invalid
  uint32_t label_code = 0;  // panoptic code under the keypoint, 0 = stuff
  AnchorPatch patch{};      // appearance at px on level `octave`
  // Local depth slope, sensor units per level-0 pixel. Zero when neighbor
  // depth is missing, which falls back to a fronto-parallel surface model.
  double dzdu = 0.0, dzdv = 0.0;
};

struct FeatureConfig {
  int n_features = 1000;
  int levels = 8;
  double scale_factor = 1.2;
  int fast_threshold = 20;  // intensity units
  int cell_size = 30;       // retention grid pitch, level-0 pixels

  void validate() const {
    if (n_features <= 0) throw std::invalid_argument("features: n_features must be positive");
    if (scale_factor <= 1.0) throw std::invalid_argument("features: scale_factor must exceed 1");
    if (levels < 1 || fast_threshold <= 0 || cell_size <= 0)
      throw std::invalid_argument("features: bad config");
  }
};

namespace detail {

// Rotated descriptor offsets reach 13*sqrt(2) ~ 18.4 px, plus 2 px for the
// 5x5 smoothing window and a little slack for the orientation patch.
constexpr int kPatchRadius = 15;   // orientation patch
constexpr int kBorder = 21;        // keypoint margin at its own level

constexpr std::array<std::array<int, 2>, 16> kCircle = {{{0, -3},
                                                         {1, -3},
                                                         {2, -2},
                                                         {3, -1},
                                                         {3, 0},
                                                         {3, 1},
                                                         {2, 2},
                                                         {1, 3},
                                                         {0, 3},
                                                         {-1, 3},
                                                         {-2, 2},
                                                         {-3, 1},
                                                         {-3, 0},
                                                         {-3, -1},
                                                         {-2, -2},
                                                         {-1, -3}}};

struct PatternPair {
  int8_t x1, y1, x2, y2;
};

/// The 256 comparison pairs, generated once from a fixed seed and frozen.
/// Any fixed pattern works; freezing it keeps descriptors comparable across
/// runs and builds.
inline const std::array<PatternPair, 256>& descriptor_pattern() {
  static const std::array<PatternPair, 256> pattern = [] {
    std::array<PatternPair, 256> p{};
    std::mt19937 rng(42);
    auto coord = [&rng] { return static_cast<int8_t>(static_cast<int>(rng() % 27) - 13); };
    for (auto& pair : p) {
      pair.x1 = coord();
      pair.y1 = coord();
      pair.x2 = coord();
      pair.y2 = coord();
    }
    return p;
  }();
  return pattern;
}

/// Segment test on the 16-pixel circle: at least 9 contiguous pixels all
/// brighter than center + t or all darker than center - t. Returns the sum
/// of absolute differences over the longest qualifying arc, 0 if none.
inline int fast_score(const Image8& img, int x, int y, int t) {
  const int ip = img.at(x, y);
  int vals[16], cls[16];
  for (int i = 0; i < 16; ++i) {
    vals[i] = img.at(x + kCircle[i][0], y + kCircle[i][1]);
    cls[i] = vals[i] > ip + t ? 1 : (vals[i] < ip - t ? -1 : 0);
  }
  int best_len = 0, best_end = 0;
  for (int sign : {1, -1}) {
    int run = 0;
    for (int i = 0; i < 32; ++i) {
      if (cls[i & 15] == sign) {
        ++run;
        const int len = std::min(run, 16);
        if (len > best_len) {
          best_len = len;
          best_end = i;
        }
      } else {
        run = 0;
      }
    }
  }
  if (best_len < 9) return 0;
  int score = 0;
  for (int i = best_end - best_len + 1; i <= best_end; ++i)
    score += std::abs(vals[i & 15] - ip);
  return score;
}

inline int box_sum(const std::vector<uint32_t>& integral, int stride, int x, int y, int r) {
  return static_cast<int>(integral[static_cast<size_t>(y + r + 1) * stride + (x + r + 1)] -
                          integral[static_cast<size_t>(y - r) * stride + (x + r + 1)] -
                          integral[static_cast<size_t>(y + r + 1) * stride + (x - r)] +
                          integral[static_cast<size_t>(y - r) * stride + (x - r)]);
}

}  // namespace detail

/// Intensity-centroid orientation over a circular patch. Needs
/// detail::kPatchRadius pixels of margin around (x, y).
inline double patch_orientation(const Image8& img, int x, int y) {
  long long m10 = 0, m01 = 0;
  constexpr int r = detail::kPatchRadius;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      if (dx * dx + dy * dy > r * r) continue;
      const int v = img.at(x + dx, y + dy);
      m10 += static_cast<long long>(dx) * v;
      m01 += static_cast<long long>(dy) * v;
    }
  }
  if (m10 == 0 && m01 == 0) return 0.0;
  return std::atan2(static_cast<double>(m01), static_cast<double>(m10));
}

/// 256-bit descriptor: pairwise comparisons of 5x5-smoothed intensity at the
/// pattern offsets rotated by `angle`. `integral` must be the integral image
/// of `img`. Needs detail::kBorder pixels of margin around (x, y).
inline Descriptor binary_descriptor(const Image8& img, const std::vector<uint32_t>& integral,
                                    int x, int y, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const int stride = img.width + 1;
  Descriptor d{};
  const auto& pattern = detail::descriptor_pattern();
  for (int i = 0; i < 256; ++i) {
    const auto& p = pattern[i];
    const int x1 = x + static_cast<int>(std::lround(p.x1 * c - p.y1 * s));
    const int y1 = y + static_cast<int>(std::lround(p.x1 * s + p.y1 * c));
    const int x2 = x + static_cast<int>(std::lround(p.x2 * c - p.y2 * s));
    const int y2 = y + static_cast<int>(std::lround(p.x2 * s + p.y2 * c));
    if (detail::box_sum(integral, stride, x1, y1, 2) < detail::box_sum(integral, stride, x2, y2, 2))
      d[i >> 6] |= uint64_t(1) << (i & 63);
  }
  return d;
}

namespace detail {

/// The detection pyramid. Shared with the tracking side so anchor patches
/// captured here can be re-aligned against an identically built pyramid.
inline std::vector<Image8> build_pyramid(const Image8& gray, int levels, double scale_factor) {
  std::vector<Image8> pyramid;
  pyramid.reserve(static_cast<size_t>(levels));
  pyramid.push_back(gray);
  for (int l = 1; l < levels; ++l) {
    const Image8& prev = pyramid.back();
    const int w = std::max(1, static_cast<int>(std::lround(prev.width / scale_factor)));
    const int h = std::max(1, static_cast<int>(std::lround(prev.height / scale_factor)));
    pyramid.push_back(resize_bilinear(prev, w, h));
  }
  return pyramid;
}

/// 13x13 patch copied pixel for pixel around (x, y). Deliberately not
/// interpolated: a template resampled at a fractional position carries a
/// position-dependent blur that biases later alignment, while a straight
/// byte copy is exact. The caller keeps (x, y) at least kAnchorRadius
/// pixels inside the image.
inline AnchorPatch capture_anchor(const Image8& img, int x, int y) {
  AnchorPatch patch{};
  int idx = 0;
  for (int py = -kAnchorRadius; py <= kAnchorRadius; ++py)
    for (int px = -kAnchorRadius; px <= kAnchorRadius; ++px, ++idx)
      patch[idx] = img.at(x + px, y + py);
  return patch;
}

}  // namespace detail

/// Translation-only inverse-compositional alignment of an anchor patch around
/// (u, v) in `img`. Template gradients come from the stored patch, so the 2x2
/// normal matrix is fixed across iterations. On success updates (u, v) and
/// returns the mean absolute intensity residual over the inner window;
/// nullopt when the patch leaves the image or has no gradient.
inline std::optional<double> align_patch(const Image8& img, const AnchorPatch& patch, double& u,
                                         double& v, int max_iters = 12, double eps = 0.01) {
  constexpr int ra = kAnchorRadius;
  constexpr int r = kAnchorRadius - 1;  // inner window, gradients need a ring
  constexpr int dim = 2 * ra + 1;
  constexpr int n = (2 * r + 1) * (2 * r + 1);
  double tmpl[n], gx[n], gy[n];
  double h00 = 0, h01 = 0, h11 = 0;
  int idx = 0;
  for (int py = -r; py <= r; ++py) {
    for (int px = -r; px <= r; ++px, ++idx) {
      const int at = (py + ra) * dim + (px + ra);
      tmpl[idx] = patch[at];
      gx[idx] = 0.5 * (patch[at + 1] - patch[at - 1]);
      gy[idx] = 0.5 * (patch[at + dim] - patch[at - dim]);
      h00 += gx[idx] * gx[idx];
      h01 += gx[idx] * gy[idx];
      h11 += gy[idx] * gy[idx];
    }
  }
  const double det = h00 * h11 - h01 * h01;
  if (det <= 1e-12) return std::nullopt;
  const double m = r + 2;
  auto inside = [&](double x, double y) {
    return x >= m && y >= m && x <= img.width - 1 - m && y <= img.height - 1 - m;
  };
  for (int it = 0; it < max_iters; ++it) {
    if (!inside(u, v)) return std::nullopt;
    double bx = 0, by = 0;
    idx = 0;
    for (int py = -r; py <= r; ++py)
      for (int px = -r; px <= r; ++px, ++idx) {
        const double diff = bilinear(img, u + px, v + py) - tmpl[idx];
        bx += gx[idx] * diff;
        by += gy[idx] * diff;
      }
    const double su = (h11 * bx - h01 * by) / det;
    const double sv = (h00 * by - h01 * bx) / det;
    if (!std::isfinite(su) || !std::isfinite(sv)) return std::nullopt;
    u -= su;
    v -= sv;
    if (std::hypot(su, sv) < eps) break;
  }
  if (!inside(u, v)) return std::nullopt;
  double sum = 0;
  idx = 0;
  for (int py = -r; py <= r; ++py)
    for (int px = -r; px <= r; ++px, ++idx) sum += std::abs(bilinear(img, u + px, v + py) - tmpl[idx]);
  return sum / n;
}

/// Affine-compensated variant of align_patch. `a_inv` maps offsets around
/// (u, v) in `img` to offsets around the anchor center; the template is
/// resampled through it, so the translation solve compares like with like
/// even when viewpoint change has scaled or foreshortened the patch. The
/// inner window shrinks by one ring to keep warped lookups, including their
/// gradient neighbors, inside the stored anchor; warps that still reach
/// outside it are rejected.
inline std::optional<double> align_patch_affine(const Image8& img, const AnchorPatch& patch,
                                                const Eigen::Matrix2d& a_inv, double& u,
                                                double& v, int max_iters = 12,
                                                double eps = 0.01) {
  constexpr int ra = kAnchorRadius;
  constexpr int r = kAnchorRadius - 2;  // inner window, warped gradient ring
  constexpr int dim = 2 * ra + 1;
  constexpr int n = (2 * r + 1) * (2 * r + 1);
  if (!a_inv.allFinite()) return std::nullopt;
  // Every lookup is a_inv * x +- one unit for gradients, |x|_inf <= r; the
  // row-sum norm bounds them inside the patch.
  const double reach =
      r * std::max(std::abs(a_inv(0, 0)) + std::abs(a_inv(0, 1)),
                   std::abs(a_inv(1, 0)) + std::abs(a_inv(1, 1)));
  if (reach + 1.0 > ra - 1e-6) return std::nullopt;

  auto tpl = [&](double x, double y) {
    const double fx = x + ra, fy = y + ra;
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const double ax = fx - x0, ay = fy - y0;
    const int at = y0 * dim + x0;
    return (1 - ax) * ((1 - ay) * patch[at] + ay * patch[at + dim]) +
           ax * ((1 - ay) * patch[at + 1] + ay * patch[at + dim + 1]);
  };

  double tmpl[n], gx[n], gy[n];
  double h00 = 0, h01 = 0, h11 = 0;
  int idx = 0;
  for (int py = -r; py <= r; ++py) {
    for (int px = -r; px <= r; ++px, ++idx) {
      const double wx = a_inv(0, 0) * px + a_inv(0, 1) * py;
      const double wy = a_inv(1, 0) * px + a_inv(1, 1) * py;
      tmpl[idx] = tpl(wx, wy);
      // Chain rule: gradient w.r.t. current-image offsets is a_inv^T times
      // the patch gradient at the warped position.
      const double pgx = 0.5 * (tpl(wx + 1, wy) - tpl(wx - 1, wy));
      const double pgy = 0.5 * (tpl(wx, wy + 1) - tpl(wx, wy - 1));
      gx[idx] = a_inv(0, 0) * pgx + a_inv(1, 0) * pgy;
      gy[idx] = a_inv(0, 1) * pgx + a_inv(1, 1) * pgy;
      h00 += gx[idx] * gx[idx];
      h01 += gx[idx] * gy[idx];
      h11 += gy[idx] * gy[idx];
    }
  }
  const double det = h00 * h11 - h01 * h01;
  if (det <= 1e-12) return std::nullopt;
  const double m = r + 2;
  auto inside = [&](double x, double y) {
    return x >= m && y >= m && x <= img.width - 1 - m && y <= img.height - 1 - m;
  };
  for (int it = 0; it < max_iters; ++it) {
    if (!inside(u, v)) return std::nullopt;
    double bx = 0, by = 0;
    idx = 0;
    for (int py = -r; py <= r; ++py)
      for (int px = -r; px <= r; ++px, ++idx) {
        const double diff = bilinear(img, u + px, v + py) - tmpl[idx];
        bx += gx[idx] * diff;
        by += gy[idx] * diff;
      }
    const double su = (h11 * bx - h01 * by) / det;
    const double sv = (h00 * by - h01 * bx) / det;
    if (!std::isfinite(su) || !std::isfinite(sv)) return std::nullopt;
    u -= su;
    v -= sv;
    if (std::hypot(su, sv) < eps) break;
  }
  if (!inside(u, v)) return std::nullopt;
  double sum = 0;
  idx = 0;
  for (int py = -r; py <= r; ++py)
    for (int px = -r; px <= r; ++px, ++idx)
      sum += std::abs(bilinear(img, u + px, v + py) - tmpl[idx]);
  return sum / n;
}

/// Multi-scale corner detection. Corners pass the segment test at their own
/// pyramid level, survive 3x3 non-max suppression, and are thinned on a
/// level-0 grid: one corner per cell per pass, passes repeating until
/// n_features is reached. Output is sorted by (octave, score desc, u, v).
inline std::vector<FeaturePoint> detect(const Image8& gray, const FeatureConfig& cfg) {
  cfg.validate();
  if (gray.empty() || gray.channels != 1)
    throw std::invalid_argument("features: detect wants a nonempty single-channel image");

  const std::vector<Image8> pyramid =
      detail::build_pyramid(gray, cfg.levels, cfg.scale_factor);

  struct Corner {
    int level, x, y, score;
    double u0, v0;  // level-0 coordinates
  };
  std::vector<Corner> corners;
  constexpr int b = detail::kBorder;
  for (int l = 0; l < cfg.levels; ++l) {
    const Image8& img = pyramid[l];
    if (img.width < 2 * b + 2 || img.height < 2 * b + 2) continue;
    std::vector<int> score(static_cast<size_t>(img.width) * img.height, 0);
    for (int y = b; y < img.height - b; ++y)
      for (int x = b; x < img.width - b; ++x)
        score[static_cast<size_t>(y) * img.width + x] =
            detail::fast_score(img, x, y, cfg.fast_threshold);

    const double sx = static_cast<double>(gray.width) / img.width;
    const double sy = static_cast<double>(gray.height) / img.height;
    for (int y = b; y < img.height - b; ++y) {
      for (int x = b; x < img.width - b; ++x) {
        const int sc = score[static_cast<size_t>(y) * img.width + x];
        if (sc == 0) continue;
        // 3x3 non-max suppression; score ties go to the smaller (y, x).
        bool keep = true;
        for (int dy = -1; dy <= 1 && keep; ++dy) {
          for (int dx = -1; dx <= 1 && keep; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int ns = score[static_cast<size_t>(y + dy) * img.width + (x + dx)];
            if (ns > sc || (ns == sc && (dy < 0 || (dy == 0 && dx < 0)))) keep = false;
          }
        }
        if (keep)
          corners.push_back({l, x, y, sc, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5});
      }
    }
  }

  // Grid retention at level 0: rank corners inside each cell, then take one
  // rank per pass over the cells until the budget fills.
  const int ncx = (gray.width + cfg.cell_size - 1) / cfg.cell_size;
  const int ncy = (gray.height + cfg.cell_size - 1) / cfg.cell_size;
  std::vector<std::vector<int>> cells(static_cast<size_t>(ncx) * ncy);
  for (size_t i = 0; i < corners.size(); ++i) {
    const int cxi = std::clamp(static_cast<int>(corners[i].u0) / cfg.cell_size, 0, ncx - 1);
    const int cyi = std::clamp(static_cast<int>(corners[i].v0) / cfg.cell_size, 0, ncy - 1);
    cells[static_cast<size_t>(cyi) * ncx + cxi].push_back(static_cast<int>(i));
  }
  auto better = [&](int a, int c) {
    const Corner &ca = corners[a], &cc = corners[c];
    if (ca.score != cc.score) return ca.score > cc.score;
    if (ca.level != cc.level) return ca.level < cc.level;
    if (ca.u0 != cc.u0) return ca.u0 < cc.u0;
    return ca.v0 < cc.v0;
  };
  for (auto& cell : cells) std::sort(cell.begin(), cell.end(), better);
  std::vector<int> kept;
  size_t max_rank = 0;
  for (const auto& cell : cells) max_rank = std::max(max_rank, cell.size());
  for (size_t rank = 0; rank < max_rank && kept.size() < static_cast<size_t>(cfg.n_features);
       ++rank)
    for (const auto& cell : cells) {
      if (rank >= cell.size()) continue;
      kept.push_back(cell[rank]);
      if (kept.size() == static_cast<size_t>(cfg.n_features)) break;
    }

  std::sort(kept.begin(), kept.end(), [&](int a, int c) {
    const Corner &ca = corners[a], &cc = corners[c];
    if (ca.level != cc.level) return ca.level < cc.level;
    if (ca.score != cc.score) return ca.score > cc.score;
    if (ca.u0 != cc.u0) return ca.u0 < cc.u0;
    return ca.v0 < cc.v0;
  });

  std::vector<FeaturePoint> out;
  out.reserve(kept.size());
  int last_level = -1;
  std::vector<uint32_t> integral;
  for (int idx : kept) {
    const Corner& c = corners[idx];
    if (c.level != last_level) {
      integral = integral_image(pyramid[c.level]);
      last_level = c.level;
    }
    FeaturePoint f;
    f.px = {c.u0, c.v0};
    f.octave = c.level;
    f.angle = patch_orientation(pyramid[c.level], c.x, c.y);
    f.descriptor = binary_descriptor(pyramid[c.level], integral, c.x, c.y, f.angle);
    f.patch = detail::capture_anchor(pyramid[c.level], c.x, c.y);
    out.push_back(f);
  }
  return out;
}

/// Fills raw_depth, label_code, and the local depth slope from the frame
/// data at each keypoint's nearest level-0 pixel. Out-of-bounds lookups
/// leave the defaults. The slope comes from central differences two pixels
/// out, one-sided when a neighbor is missing.
inline void annotate_features(std::vector<FeaturePoint>& features, const Image16& depth,
                              const PanopticMask* mask) {
  auto slope = [&](int x, int y, int dx, int dy) {
    const bool neg = depth.in_bounds(x - 2 * dx, y - 2 * dy) && depth.at(x - 2 * dx, y - 2 * dy);
    const bool pos = depth.in_bounds(x + 2 * dx, y + 2 * dy) && depth.at(x + 2 * dx, y + 2 * dy);
    if (neg && pos)
      return (depth.at(x + 2 * dx, y + 2 * dy) - static_cast<double>(depth.at(x - 2 * dx, y - 2 * dy))) / 4.0;
    if (pos) return (depth.at(x + 2 * dx, y + 2 * dy) - static_cast<double>(depth.at(x, y))) / 2.0;
    if (neg) return (depth.at(x, y) - static_cast<double>(depth.at(x - 2 * dx, y - 2 * dy))) / 2.0;
    return 0.0;
  };
  for (auto& f : features) {
    const int x = static_cast<int>(std::lround(f.px.u));
    const int y = static_cast<int>(std::lround(f.px.v));
    if (!depth.empty() && depth.in_bounds(x, y)) {
      f.raw_depth = depth.at(x, y);
      if (f.raw_depth) {
        f.dzdu = slope(x, y, 1, 0);
        f.dzdv = slope(x, y, 0, 1);
      }
    }
    if (mask && mask->labels.in_bounds(x, y)) f.label_code = mask->at(x, y);
  }
}

struct Match {
  int ia = -1, ib = -1;
  int distance = 0;
};

/// Mutual-best Hamming matching with an absolute distance gate and a
/// best/second-best ratio gate applied on both sides. Ties prefer the lower
/// index, so the result is symmetric in its arguments.
inline std::vector<Match> match(const std::vector<FeaturePoint>& a,
                                const std::vector<FeaturePoint>& b, int max_distance = 64,
                                double max_ratio = 0.9) {
  std::vector<Match> out;
  if (a.empty() || b.empty()) return out;
  constexpr int kInf = std::numeric_limits<int>::max();

  auto best_two = [](const std::vector<FeaturePoint>& from, const FeaturePoint& q) {
    int best = kInf, second = kInf, best_idx = -1;
    for (size_t j = 0; j < from.size(); ++j) {
      const int d = hamming(q.descriptor, from[j].descriptor);
      if (d < best) {
        second = best;
        best = d;
        best_idx = static_cast<int>(j);
      } else if (d < second) {
        second = d;
      }
    }
    return std::array<int, 3>{best_idx, best, second};
  };

  std::vector<std::array<int, 3>> fwd(a.size());
  for (size_t i = 0; i < a.size(); ++i) fwd[i] = best_two(b, a[i]);
  std::vector<std::array<int, 3>> rev(b.size());
  for (size_t j = 0; j < b.size(); ++j) rev[j] = best_two(a, b[j]);

  auto ratio_ok = [max_ratio](int best, int second) {
    return second == kInf || best <= max_ratio * second;
  };
  for (size_t i = 0; i < a.size(); ++i) {
    const auto [j, d, d2a] = fwd[i];
    if (j < 0 || d > max_distance) continue;
    const auto [i_back, db, d2b] = rev[j];
    if (i_back != static_cast<int>(i)) continue;
    if (!ratio_ok(d, d2a) || !ratio_ok(db, d2b)) continue;
    out.push_back({static_cast<int>(i), j, d});
  }
  return out;
}

}  // namespace dyvo
