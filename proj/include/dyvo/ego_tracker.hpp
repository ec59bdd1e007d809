// Per-frame camera pose estimation against a sparse map of static points:
// descriptor matching, EPnP inside RANSAC with a constant-velocity prior,
// Huber-weighted refinement, and depth-difference identification of moving
// objects that carry no dynamic class prior.
#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "dyvo/features.hpp"
#include "dyvo/map_builder.hpp"
#include "dyvo/pnp.hpp"
#include "dyvo/sequence_io.hpp"

namespace dyvo {

/// Ablation axis: Baseline ignores semantics entirely, SemanticOnly drops
/// prior-dynamic-class pixels, Full additionally identifies and drops
/// non-prior instances that the depth-difference test flags as moving.
enum class SystemMode { Baseline, SemanticOnly, Full };

inline const char* to_string(SystemMode m) {
  switch (m) {
    case SystemMode::Baseline: return "baseline";
    case SystemMode::SemanticOnly: return "semantic";
    case SystemMode::Full: return "full";
  }
  return "?";
}

struct EgoConfig {
  FeatureConfig features;
  PnPConfig pnp;
  double tau_z = 0.4;          // depth-difference threshold, meters
  double dyn_fraction = 0.30;  // instance flagged when exceeded (strict)
  int depth_stride = 4;        // sampling lattice inside instance masks
  int local_window = 10;       // keyframes, local-map horizon
  int map_cull_age = 30;       // keyframes without observation
  double kf_tracked_ratio = 0.7;
  double kf_translation = 0.1;   // meters since last keyframe
  double kf_rotation_deg = 5.0;  // degrees since last keyframe
  int match_max_distance = 64;
  double match_max_ratio = 0.9;
  // Anchor alignment of matched measurements. Descriptor matching brings a
  // feature within a pixel or two of its map point; aligning the point's
  // anchor patch then relocates it to a fraction of a pixel, which is what
  // keeps PnP above the geometric noise floor.
  bool refine_matches = true;
  int refine_iters = 12;
  double refine_max_shift = 2.0;      // pixels at the anchor's level
  double refine_max_residual = 14.0;  // mean abs intensity after alignment

  void validate() const {
    features.validate();
    pnp.validate();
    if (tau_z <= 0 || dyn_fraction <= 0 || depth_stride <= 0 || local_window <= 0 ||
        map_cull_age <= 0)
      throw std::invalid_argument("ego: config values must be positive");
    if (refine_iters <= 0 || refine_max_shift <= 0 || refine_max_residual <= 0)
      throw std::invalid_argument("ego: config values must be positive");
  }
};

struct EgoResult {
  Pose pose;  // world -> camera
  std::vector<std::pair<int, int>> inlier_matches;  // (map point index, feature index)
  std::set<uint32_t> nonprior_dynamic_ids;
  int tracked_feature_count = 0;
  bool lost = false;
  bool keyframe = false;
};

/// Depth-difference test over the previous frame's non-prior thing
/// instances. Every `stride`-th masked pixel with valid depth is warped
/// into the current frame through both poses; the point is dynamic when the
/// projected depth disagrees with the measured depth at the warped pixel by
/// more than tau_z. An instance is flagged when its dynamic fraction
/// strictly exceeds `min_fraction`. Points that leave the frame or land on
/// missing depth carry no evidence either way.
inline std::set<uint32_t> identify_nonprior_dynamic(
    const Image16& prev_depth, const PanopticMask& prev_mask, const Pose& prev_pose,
    const Image16& curr_depth, const Pose& curr_pose, const Intrinsics& k,
    const ClassRegistry& registry, double tau_z = 0.4, double min_fraction = 0.30,
    int stride = 4) {
  const Pose prev_twc = prev_pose.inverse();
  std::map<uint32_t, std::pair<int, int>> counts;  // code -> (dynamic, valid)
  for (int y = 0; y < prev_depth.height; y += stride) {
    for (int x = 0; x < prev_depth.width; x += stride) {
      const uint32_t code = prev_mask.at(x, y);
      if (code == 0 || registry.prior_dynamic_code(code)) continue;
      const auto cam = back_project({static_cast<double>(x), static_cast<double>(y)},
                                    prev_depth.at(x, y), k);
      if (!cam) continue;
      const Vec3 p_curr = curr_pose * (prev_twc * *cam);
      const auto px = project(p_curr, k);
      if (!px) continue;
      const int u = static_cast<int>(std::lround(px->u));
      const int v = static_cast<int>(std::lround(px->v));
      if (!curr_depth.in_bounds(u, v) || curr_depth.at(u, v) == 0) continue;
      auto& c = counts[code];
      ++c.second;
      if (std::abs(p_curr.z() - curr_depth.at(u, v) / k.depth_scale) > tau_z) ++c.first;
    }
  }
  std::set<uint32_t> flagged;
  for (const auto& [code, c] : counts)
    if (c.first > min_fraction * c.second) flagged.insert(code);
  return flagged;
}

class EgoTracker {
 public:
  EgoTracker(const Intrinsics& k, const ClassRegistry& registry, EgoConfig cfg = {},
             SystemMode mode = SystemMode::Full)
      : k_(k),
        // Baseline mode never consults semantics; an empty registry turns
        // every label into a static thing.
        registry_(mode == SystemMode::Baseline ? ClassRegistry{} : registry),
        cfg_(cfg),
        mode_(mode) {
    cfg_.validate();
  }

  SystemMode mode() const { return mode_; }
  const SparseMap& map() const { return map_; }
  int frame_count() const { return frame_count_; }

  EgoResult track(const Frame& frame) {
    EgoResult res;
    auto feats = detect(frame.gray, cfg_.features);
    annotate_features(feats, frame.depth, frame.mask ? &*frame.mask : nullptr);

    if (frame_count_ == 0) {
      res.pose = Pose{};  // the world frame is the first camera frame
      initialize(feats, res, frame);
      return res;
    }
    if (need_reinit_) {
      res.pose = velocity_ * pose_;
      map_ = SparseMap{};
      initialize(feats, res, frame);
      need_reinit_ = false;
      return res;
    }

    // Associate current features with the local map by descriptor.
    const auto local = map_.local_indices(cfg_.local_window);
    std::vector<FeaturePoint> proxies(local.size());
    for (size_t i = 0; i < local.size(); ++i)
      proxies[i].descriptor = map_.points()[local[i]].descriptor;
    auto matches = match(proxies, feats, cfg_.match_max_distance, cfg_.match_max_ratio);

    if (mode_ != SystemMode::Baseline) {
      std::erase_if(matches, [&](const Match& m) {
        return registry_.prior_dynamic_code(feats[m.ib].label_code);
      });
    }

    // Features on occlusion boundaries are parallax artifacts and take no
    // part in pose estimation; see occlusion_boundary.
    const auto boundary = occlusion_boundary(feats, frame);
    std::erase_if(matches, [&](const Match& m) { return boundary[m.ib]; });

    // Subpixel measurement refinement: align each matched map point's anchor
    // patch around the descriptor match, warped by the affine its surface
    // triplet predicts under the motion model. A match whose anchor cannot
    // be re-found photometrically is dropped outright: its detected corner
    // is as suspect as its alignment, and half-occluded corners that slip
    // through carry multi-pixel coherent error. The refined position is
    // kept beside the feature rather than in it, so features later inserted
    // as new map points still carry the patch captured at their own pixel.
    const Pose prediction = velocity_ * pose_;
    std::vector<Pixel> measured(feats.size());
    for (size_t i = 0; i < feats.size(); ++i) measured[i] = feats[i].px;
    if (cfg_.refine_matches && !matches.empty()) {
      const auto pyramid =
          detail::build_pyramid(frame.gray, cfg_.features.levels, cfg_.features.scale_factor);
      std::vector<Match> kept;
      kept.reserve(matches.size());
      for (const auto& m : matches) {
        const MapPoint& mp = map_.points()[local[m.ia]];
        const int l = std::min(mp.anchor_octave, static_cast<int>(pyramid.size()) - 1);
        const Image8& img = pyramid[l];
        const double sx = static_cast<double>(frame.gray.width) / img.width;
        const double sy = static_cast<double>(frame.gray.height) / img.height;
        const auto a_inv = detail::anchor_warp_inverse(mp, prediction, k_, sx, sy);
        if (!a_inv) continue;
        const FeaturePoint& f = feats[m.ib];
        double u = (f.px.u + 0.5) / sx - 0.5;
        double v = (f.px.v + 0.5) / sy - 0.5;
        const double u_seed = u, v_seed = v;
        const auto residual = align_patch_affine(img, mp.anchor, *a_inv, u, v, cfg_.refine_iters);
        if (!residual || *residual > cfg_.refine_max_residual) continue;
        if (std::hypot(u - u_seed, v - v_seed) > cfg_.refine_max_shift) continue;
        measured[m.ib] = {(u + 0.5) * sx - 0.5, (v + 0.5) * sy - 0.5};
        kept.push_back(m);
      }
      matches = std::move(kept);
    }

    auto build_corr = [&](const std::set<uint32_t>& excluded) {
      std::vector<Correspondence> corr;
      std::vector<std::pair<int, int>> ids;  // (map index, feature index)
      for (const auto& m : matches) {
        if (excluded.count(feats[m.ib].label_code)) continue;
        corr.push_back({map_.points()[local[m.ia]].position, measured[m.ib]});
        ids.emplace_back(local[m.ia], m.ib);
      }
      return std::make_pair(std::move(corr), std::move(ids));
    };

    auto [corr, ids] = build_corr({});
    PnPConfig pnp_cfg = cfg_.pnp;
    pnp_cfg.seed = cfg_.pnp.seed + static_cast<uint64_t>(frame_count_) * 0x9e3779b97f4a7c15ull;
    const auto rr = ransac_pnp(corr, k_, pnp_cfg, &prediction);
    if (!rr) {
      res.lost = true;
      res.pose = prediction;
      pose_ = prediction;  // advance the prior so the re-init starts nearby
      prev_valid_ = false;
      need_reinit_ = true;
      ++frame_count_;
      return res;
    }

    std::vector<Correspondence> in_corr;
    for (int i : rr->inliers) in_corr.push_back(corr[i]);
    Pose pose = refine_pose(rr->pose, in_corr, k_, cfg_.pnp.refine_iters);

    if (mode_ == SystemMode::Full && prev_valid_ && prev_mask_.has_value() &&
        !frame.depth.empty()) {
      res.nonprior_dynamic_ids =
          identify_nonprior_dynamic(prev_depth_, *prev_mask_, prev_pose_, frame.depth, pose,
                                    k_, registry_, cfg_.tau_z, cfg_.dyn_fraction,
                                    cfg_.depth_stride);
      if (!res.nonprior_dynamic_ids.empty()) {
        // Re-solve with flagged instances dropped from the match set.
        std::tie(corr, ids) = build_corr(res.nonprior_dynamic_ids);
        std::vector<Correspondence> kept;
        for (const auto& c : corr)
          if (detail::reprojection_error_sq(pose, c, k_) <
              cfg_.pnp.inlier_px * cfg_.pnp.inlier_px)
            kept.push_back(c);
        if (static_cast<int>(kept.size()) >= cfg_.pnp.min_inliers)
          pose = refine_pose(pose, kept, k_, cfg_.pnp.refine_iters);
      }
    }

    // Final inlier set under the final pose; the result invariant is that
    // every reported inlier reprojects within the gate.
    const double thr_sq = cfg_.pnp.inlier_px * cfg_.pnp.inlier_px;
    for (size_t i = 0; i < corr.size(); ++i) {
      if (detail::reprojection_error_sq(pose, corr[i], k_) < thr_sq)
        res.inlier_matches.push_back(ids[i]);
    }
    res.tracked_feature_count = static_cast<int>(res.inlier_matches.size());
    res.pose = pose;

    // The initialization keyframe records an insertion count, which is not
    // comparable with tracked-match counts; the first tracked frame anchors
    // the real reference level.
    if (ref_from_init_) {
      ref_tracked_ = res.tracked_feature_count;
      ref_from_init_ = false;
    }
    const Pose rel = pose * kf_pose_.inverse();
    const bool kf = res.tracked_feature_count < cfg_.kf_tracked_ratio * ref_tracked_ ||
                    rel.t().norm() > cfg_.kf_translation ||
                    rotation_angle(rel.r()) > cfg_.kf_rotation_deg * M_PI / 180.0;

    // Tracked points stay current every frame, but their geometry is folded
    // only when the map itself updates at a keyframe, reading depth at the
    // (possibly refined) measurement pixel.
    const Pose twc = pose.inverse();
    std::vector<bool> skip(feats.size(), false);
    for (const auto& [mi, fi] : res.inlier_matches) {
      skip[fi] = true;
      if (!kf) {
        map_.touch(mi, frame_count_);
        continue;
      }
      const int xi = static_cast<int>(std::lround(measured[fi].u));
      const int yi = static_cast<int>(std::lround(measured[fi].v));
      std::optional<Vec3> cam;
      if (!frame.depth.empty() && frame.depth.in_bounds(xi, yi) && frame.depth.at(xi, yi) != 0)
        cam = back_project(measured[fi], frame.depth.at(xi, yi), k_);
      if (cam)
        map_.observe(mi, twc * *cam, frame_count_);
      else
        map_.touch(mi, frame_count_);
    }

    if (kf) {
      res.keyframe = true;
      for (size_t i = 0; i < feats.size(); ++i)
        if (boundary[i]) skip[i] = true;
      map_.begin_keyframe();
      map_.insert_features(feats, skip, res.nonprior_dynamic_ids, registry_, twc, k_,
                           frame_count_);
      map_.cull(cfg_.map_cull_age);
      ref_tracked_ = res.tracked_feature_count;
      kf_pose_ = pose;
    }

    velocity_ = pose * pose_.inverse();
    pose_ = pose;
    remember(frame, pose);
    ++frame_count_;
    return res;
  }

 private:
  /// Features whose anchor footprint crosses a depth discontinuity sit on an
  /// occlusion boundary. Such corners are parallax artifacts: they move with
  /// viewpoint as the background slides behind the edge, and both descriptor
  /// and anchor patch mix two surfaces. They take no part in pose estimation
  /// and never enter the map.
  std::vector<bool> occlusion_boundary(const std::vector<FeaturePoint>& feats,
                                       const Frame& frame) const {
    std::vector<bool> out(feats.size(), false);
    if (frame.depth.empty()) return out;
    // Per-level footprint scales, replicating the detection pyramid's dims.
    std::vector<double> sxs(cfg_.features.levels), sys(cfg_.features.levels);
    int w = frame.gray.width, h = frame.gray.height;
    for (int l = 0; l < cfg_.features.levels; ++l) {
      sxs[l] = static_cast<double>(frame.gray.width) / w;
      sys[l] = static_cast<double>(frame.gray.height) / h;
      w = std::max(1, static_cast<int>(std::lround(w / cfg_.features.scale_factor)));
      h = std::max(1, static_cast<int>(std::lround(h / cfg_.features.scale_factor)));
    }
    for (size_t i = 0; i < feats.size(); ++i) {
      const FeaturePoint& f = feats[i];
      if (f.raw_depth == 0) continue;
      const double rx = (kAnchorRadius + 1) * sxs[f.octave];
      const double ry = (kAnchorRadius + 1) * sys[f.octave];
      for (int dy = -1; dy <= 1 && !out[i]; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int xi = static_cast<int>(std::lround(f.px.u + dx * rx));
          const int yi = static_cast<int>(std::lround(f.px.v + dy * ry));
          if (!frame.depth.in_bounds(xi, yi) || frame.depth.at(xi, yi) == 0 ||
              std::abs(frame.depth.at(xi, yi) - static_cast<double>(f.raw_depth)) >
                  0.25 * f.raw_depth) {
            out[i] = true;
            break;
          }
        }
    }
    return out;
  }

  void initialize(const std::vector<FeaturePoint>& feats, EgoResult& res, const Frame& frame) {
    map_.begin_keyframe();
    std::vector<bool> skip = occlusion_boundary(feats, frame);
    const int inserted = map_.insert_features(feats, skip, {}, registry_, res.pose.inverse(),
                                              k_, frame_count_);
    res.keyframe = true;
    res.tracked_feature_count = inserted;
    ref_tracked_ = inserted;
    ref_from_init_ = true;
    kf_pose_ = res.pose;
    velocity_ = Pose{};
    pose_ = res.pose;
    remember(frame, res.pose);
    ++frame_count_;
  }

  void remember(const Frame& frame, const Pose& pose) {
    prev_depth_ = frame.depth;
    prev_mask_ = frame.mask;
    prev_pose_ = pose;
    prev_valid_ = !frame.depth.empty();
  }

  Intrinsics k_;
  ClassRegistry registry_;
  EgoConfig cfg_;
  SystemMode mode_;

  SparseMap map_;
  int frame_count_ = 0;
  bool need_reinit_ = false;
  Pose pose_;      // last frame, world -> camera
  Pose velocity_;  // pose_k * pose_{k-1}^-1
  Pose kf_pose_;
  int ref_tracked_ = 0;
  bool ref_from_init_ = false;

  Image16 prev_depth_;
  std::optional<PanopticMask> prev_mask_;
  Pose prev_pose_;
  bool prev_valid_ = false;
};

}  // namespace dyvo
