// Sparse point tracking between consecutive grayscale frames: pyramidal
// inverse-compositional patch alignment, or a bilinear lookup into a dense
// flow field when one is supplied. Used as the point-correspondence oracle
// for dynamic-object tracking.
#pragma once

#include <cmath>
#include <vector>

#include "dyvo/image.hpp"
#include "dyvo/geometry.hpp"

namespace dyvo {

struct FlowConfig {
  int levels = 3;          // pyramid levels, factor 2
  int patch_radius = 5;    // 11x11 patches
  int max_iters = 20;
  double eps = 0.01;       // convergence step, pixels
  double max_residual = 20.0;  // mean abs intensity after alignment

  void validate() const {
    if (levels < 1 || patch_radius < 1 || max_iters < 1 || eps <= 0 || max_residual <= 0)
      throw std::invalid_argument("flow: bad config");
  }
};

struct FlowResult {
  Pixel curr;
  bool tracked = false;
  double residual = 0.0;  // mean abs intensity difference over the patch
};

namespace detail {

inline Image8 half_scale(const Image8& img) {
  return resize_bilinear(img, std::max(1, img.width / 2), std::max(1, img.height / 2));
}

/// Mean absolute intensity difference between the template patch at `tp` in
/// `a` and the patch at `tp + d` in `b`.
inline double patch_residual(const Image8& a, const Image8& b, double tx, double ty, double dx,
                             double dy, int r) {
  double sum = 0;
  for (int py = -r; py <= r; ++py)
    for (int px = -r; px <= r; ++px)
      sum += std::abs(bilinear(a, tx + px, ty + py) - bilinear(b, tx + dx + px, ty + dy + py));
  return sum / ((2 * r + 1) * (2 * r + 1));
}

}  // namespace detail

/// Tracks `points` from `prev` into `curr`. With `dense_flow` (2-channel,
/// same size as the images) the displacement is a bilinear lookup; otherwise
/// coarse-to-fine least-squares alignment. A point is lost when its
/// destination leaves the image or the aligned patch still disagrees by more
/// than cfg.max_residual.
inline std::vector<FlowResult> track_points(const Image8& prev, const Image8& curr,
                                            const std::vector<Pixel>& points,
                                            const ImageF* dense_flow = nullptr,
                                            const FlowConfig& cfg = FlowConfig{}) {
  cfg.validate();
  if (prev.width != curr.width || prev.height != curr.height)
    throw std::invalid_argument("flow: image sizes differ");
  std::vector<FlowResult> out(points.size());

  if (dense_flow) {
    for (size_t i = 0; i < points.size(); ++i) {
      const Pixel& p = points[i];
      if (!prev.in_bounds(static_cast<int>(p.u), static_cast<int>(p.v))) continue;
      const double du = bilinear(*dense_flow, p.u, p.v, 0);
      const double dv = bilinear(*dense_flow, p.u, p.v, 1);
      out[i].curr = {p.u + du, p.v + dv};
      out[i].tracked = curr.in_bounds(static_cast<int>(out[i].curr.u),
                                      static_cast<int>(out[i].curr.v));
    }
    return out;
  }

  std::vector<Image8> pyr_prev{prev}, pyr_curr{curr};
  for (int l = 1; l < cfg.levels; ++l) {
    pyr_prev.push_back(detail::half_scale(pyr_prev.back()));
    pyr_curr.push_back(detail::half_scale(pyr_curr.back()));
  }

  const int r = cfg.patch_radius;
  const int n = (2 * r + 1) * (2 * r + 1);
  std::vector<double> tmpl(n), gx(n), gy(n);

  for (size_t i = 0; i < points.size(); ++i) {
    const Pixel& p = points[i];
    double du = 0, dv = 0;  // displacement at the current level's scale

    for (int l = cfg.levels - 1; l >= 0; --l) {
      const Image8& a = pyr_prev[l];
      const Image8& b = pyr_curr[l];
      const double scale = static_cast<double>(1 << l);
      const double tx = p.u / scale, ty = p.v / scale;
      // Gradient and bilinear sampling both need one extra pixel.
      const double m = r + 2;
      if (tx < m || ty < m || tx > a.width - 1 - m || ty > a.height - 1 - m) {
        if (l > 0) {
          du *= 2;
          dv *= 2;
        }
        continue;
      }

      // Template and its gradient come from the previous frame only, so the
      // 2x2 normal matrix is fixed across iterations.
      double h00 = 0, h01 = 0, h11 = 0;
      int idx = 0;
      for (int py = -r; py <= r; ++py) {
        for (int px = -r; px <= r; ++px, ++idx) {
          tmpl[idx] = bilinear(a, tx + px, ty + py);
          gx[idx] = 0.5 * (bilinear(a, tx + px + 1, ty + py) - bilinear(a, tx + px - 1, ty + py));
          gy[idx] = 0.5 * (bilinear(a, tx + px, ty + py + 1) - bilinear(a, tx + px, ty + py - 1));
          h00 += gx[idx] * gx[idx];
          h01 += gx[idx] * gy[idx];
          h11 += gy[idx] * gy[idx];
        }
      }
      const double det = h00 * h11 - h01 * h01;
      if (det > 1e-12) {
        for (int it = 0; it < cfg.max_iters; ++it) {
          const double wx = tx + du, wy = ty + dv;
          if (wx < m || wy < m || wx > b.width - 1 - m || wy > b.height - 1 - m) break;
          double bx = 0, by = 0;
          idx = 0;
          for (int py = -r; py <= r; ++py) {
            for (int px = -r; px <= r; ++px, ++idx) {
              const double diff = bilinear(b, wx + px, wy + py) - tmpl[idx];
              bx += gx[idx] * diff;
              by += gy[idx] * diff;
            }
          }
          const double sx = (h11 * bx - h01 * by) / det;
          const double sy = (h00 * by - h01 * bx) / det;
          if (!std::isfinite(sx) || !std::isfinite(sy)) break;
          du -= sx;
          dv -= sy;
          if (std::hypot(sx, sy) < cfg.eps) break;
        }
      }
      if (l > 0) {
        du *= 2;
        dv *= 2;
      }
    }

    FlowResult& res = out[i];
    res.curr = {p.u + du, p.v + dv};
    const double m0 = r + 2;
    const bool inside = res.curr.u >= m0 && res.curr.v >= m0 &&
                        res.curr.u <= curr.width - 1 - m0 &&
                        res.curr.v <= curr.height - 1 - m0 && p.u >= m0 && p.v >= m0 &&
                        p.u <= prev.width - 1 - m0 && p.v <= prev.height - 1 - m0;
    if (!inside) continue;
    res.residual = detail::patch_residual(prev, curr, p.u, p.v, du, dv, r);
    res.tracked = res.residual <= cfg.max_residual;
  }
  return out;
}

}  // namespace dyvo
