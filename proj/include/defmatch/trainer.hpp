#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "defmatch/descriptor.hpp"
#include "defmatch/geometry.hpp"
#include "defmatch/keypoint.hpp"
#include "defmatch/losses.hpp"
#include "defmatch/matcher.hpp"

namespace defmatch {

struct TrainConfig {
  int steps = 200;
  double lr = 0.05;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  double alpha = 0.25;
  double gamma = 2.0;
  double tau = 0.1;
  double t_rel = 1.0;
  double t_det = 0.1;
  int peaky_window = 5;
  double p_norm = 2.0;
  double match_radius = 5.0;

  int gt_count = 16;       // ground-truth correspondences sampled per scene
  int top_k = 4;           // stage-2 keypoints per image, plus as many random ones
  double nms_threshold = 0.05;
  int nms_window = 5;

  void validate() const {
    if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be positive");
    if (!(lr >= 0.0)) throw std::invalid_argument("TrainConfig: negative learning rate");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("TrainConfig: clip_norm must be positive");
    if (gt_count < 1 || top_k < 1) throw std::invalid_argument("TrainConfig: counts must be positive");
  }
};

struct TrainResult {
  std::vector<std::string> columns;          // "step", "loss_total", components
  std::vector<std::vector<double>> curve;    // one row per step
};

inline void write_curve_csv(const TrainResult& result, const std::filesystem::path& path,
                            bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("write_curve_csv: cannot open " + path.string());
  if (!append) {
    for (std::size_t i = 0; i < result.columns.size(); ++i)
      out << (i ? "," : "") << result.columns[i];
    out << "\n";
  }
  char buf[64];
  for (const auto& row : result.curve) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i == 0) {
        out << static_cast<long long>(row[0]);
      } else {
        std::snprintf(buf, sizeof buf, ",%.17g", row[i]);
        out << buf;
      }
    }
    out << "\n";
  }
}

namespace detail {

// Global-norm gradient clipping followed by a plain descent step; gradients
// are consumed (zeroed) afterwards.
inline void apply_sgd_step(const std::vector<Tensor*>& params, double lr, double clip_norm) {
  double sq = 0.0;
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) {
    grads.push_back(p->grad());
    for (double g : grads.back()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor = norm > clip_norm ? clip_norm / norm : 1.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor* p = params[k];
    for (std::int64_t i = 0; i < p->size(); ++i)
      p->at(static_cast<int>(i)) -= lr * factor * grads[k][static_cast<std::size_t>(i)];
    p->zero_grad();
  }
}

// Patch-grid ground-truth matchability: a cell is positive when any
// correspondence endpoint lands inside it.
inline Tensor rasterize_matchability(const GroundTruthMatches& gt, int hc, int wc, int k,
                                     bool second_image) {
  Tensor m(Shape{hc, wc}, 0.0);
  for (const auto& r : gt.rows) {
    const int cx = static_cast<int>((second_image ? r[2] : r[0]) / k);
    const int cy = static_cast<int>((second_image ? r[3] : r[1]) / k);
    if (cx >= 0 && cx < wc && cy >= 0 && cy < hc) m.at(cy, cx) = 1.0;
  }
  return m;
}

inline std::vector<Keypoint> gt_keypoints(const GroundTruthMatches& gt, bool second_image) {
  std::vector<Keypoint> kps;
  for (const auto& r : gt.rows)
    kps.push_back({second_image ? r[2] : r[0], second_image ? r[3] : r[1], 1.0});
  return kps;
}

inline PointWarp scene_warp(const ScenePair& scene, int direction) {
  return [&scene, direction](double x, double y, double* wx, double* wy) {
    std::vector<unsigned char> valid;
    const std::vector<Vec2> out = warp_points({{x, y}}, scene, direction, &valid);
    if (!valid[0]) return false;
    *wx = out[0].x;
    *wy = out[0].y;
    return true;
  };
}

}  // namespace detail

// Stage 1: full-batch descent on the descriptor objective
// L_D = L_focal + L_matchability over the given scenes. The keypoint branch is
// not involved; ground truth comes from the scenes' analytic warps.
inline TrainResult train_descriptor_branch(const std::vector<ScenePair>& scenes,
                                           DescriptorNetParams& desc,
                                           const TrainConfig& cfg) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train_descriptor_branch: no scenes");

  struct SceneData {
    GroundTruthMatches gt;
    std::vector<Keypoint> kps1, kps2;
    Tensor m_gt1, m_gt2;
  };
  const int k = desc.cfg.patch;
  std::vector<SceneData> data;
  for (const ScenePair& sp : scenes) {
    SceneData d;
    d.gt = gt_correspondences(sp, cfg.gt_count);
    if (d.gt.rows.empty())
      throw std::invalid_argument("train_descriptor_branch: scene without correspondences");
    d.kps1 = detail::gt_keypoints(d.gt, false);
    d.kps2 = detail::gt_keypoints(d.gt, true);
    d.m_gt1 = detail::rasterize_matchability(d.gt, sp.height() / k, sp.width() / k, k, false);
    d.m_gt2 = detail::rasterize_matchability(d.gt, sp.height() / k, sp.width() / k, k, true);
    data.push_back(std::move(d));
  }

  TrainResult result;
  result.columns = {"step", "loss_total", "loss_focal", "loss_match"};
  const std::vector<Tensor*> params = desc.parameters();

  for (int step = 0; step < cfg.steps; ++step) {
    GradTape tape;
    Tensor focal_total = Tensor::scalar(0.0);
    Tensor match_total = Tensor::scalar(0.0);
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      const ScenePair& sp = scenes[si];
      const SceneData& d = data[si];
      const DescriptorField f1 = describe(sp.img1, desc);
      const DescriptorField f2 = describe(sp.img2, desc);
      const Tensor d1 = sample_descriptors(f1, d.kps1, sp.height(), sp.width());
      const Tensor d2 = sample_descriptors(f2, d.kps2, sp.height(), sp.width());
      const Tensor p = dual_softmax(score_matrix(d1, d2, cfg.tau));
      std::vector<std::pair<int, int>> diag;
      for (int i = 0; i < p.extent(0); ++i) diag.push_back({i, i});
      focal_total = add(focal_total,
                        focal_matching_loss(gather_entries(p, diag), cfg.alpha, cfg.gamma));
      const Tensor match1 = matchability_loss(f1.m, d.m_gt1, cfg.alpha, cfg.gamma);
      const Tensor match2 = matchability_loss(f2.m, d.m_gt2, cfg.alpha, cfg.gamma);
      match_total = add(match_total, scale(add(match1, match2), 0.5));
    }
    const double inv = 1.0 / static_cast<double>(scenes.size());
    const Tensor focal = scale(focal_total, inv);
    const Tensor match = scale(match_total, inv);
    const Tensor total = add(focal, match);
    if (!std::isfinite(total.value()))
      throw std::runtime_error("train_descriptor_branch: loss diverged at step " +
                               std::to_string(step));
    result.curve.push_back(
        {static_cast<double>(step), total.value(), focal.value(), match.value()});
    tape.backward(total);
    detail::apply_sgd_step(params, cfg.lr, cfg.clip_norm);
  }
  return result;
}

// Stage 2: keypoint-branch descent with the descriptor branch frozen.
// Keypoints are the top-K DKD detections plus K random non-maximum positions;
// the objective is L_reprojection + L_reliability + L_peaky with the matching
// probabilities treated as constants.
inline TrainResult train_keypoint_branch(const std::vector<ScenePair>& scenes,
                                         DescriptorNetParams& desc, KeypointNetParams& kp,
                                         const TrainConfig& cfg) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train_keypoint_branch: no scenes");
  for (Tensor* t : desc.parameters()) t->set_requires_grad(false);

  TrainResult result;
  result.columns = {"step", "loss_total", "loss_reproj", "loss_reliab", "loss_peaky"};
  const std::vector<Tensor*> params = kp.parameters();
  std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 1);

  // The descriptor branch is frozen, so each scene's fields are constant
  // across steps; only the sampling positions change.
  std::vector<std::pair<DescriptorField, DescriptorField>> fields;
  fields.reserve(scenes.size());
  for (const ScenePair& sp : scenes)
    fields.emplace_back(describe(sp.img1, desc), describe(sp.img2, desc));

  struct View {
    Tensor score;              // full score map, in the graph
    std::vector<Keypoint> centers;
    Tensor positions;          // [N x 2], DKD-refined rows then random rows
    Tensor descriptors;        // [N x C], constants (descriptor branch frozen)
  };

  auto build_view = [&](const Tensor& img) {
    View v;
    v.score = score_map(img, kp);
    DetectConfig dc;
    dc.nms_window = cfg.nms_window;
    dc.threshold = cfg.nms_threshold;
    dc.t_det = cfg.t_det;
    dc.max_keypoints = cfg.top_k;
    std::vector<Keypoint> centers = nms_local_max(v.score, dc.nms_window, dc.threshold);
    centers = topk_keypoints(centers, cfg.top_k);

    const int h = v.score.extent(0), w = v.score.extent(1);
    const int margin = (cfg.nms_window - 1) / 2;
    std::vector<Tensor> rows;
    for (const Keypoint& c : centers) {
      const int cx = static_cast<int>(std::lround(c.x));
      const int cy = static_cast<int>(std::lround(c.y));
      Tensor base(Shape{2});
      base.at(0) = cx;
      base.at(1) = cy;
      const Tensor off = dkd_offset(gather_window(v.score, cy, cx, dc.nms_window), dc.t_det);
      rows.push_back(add(base, reshape(off, Shape{2})));
      v.centers.push_back(c);
    }
    // Random non-maximum fillers keep the detector honest away from peaks;
    // they carry no positional gradient.
    for (int i = 0; i < cfg.top_k; ++i) {
      Tensor base(Shape{2});
      base.at(0) = margin + uniform01(rng) * (w - 1 - 2 * margin);
      base.at(1) = margin + uniform01(rng) * (h - 1 - 2 * margin);
      rows.push_back(base);
      v.centers.push_back({base.at(0), base.at(1), 0.0});
    }
    v.positions = stack_rows(rows);
    return v;
  };

  for (int step = 0; step < cfg.steps; ++step) {
    GradTape tape;
    Tensor reproj_total = Tensor::scalar(0.0);
    Tensor reliab_total = Tensor::scalar(0.0);
    Tensor peaky_total = Tensor::scalar(0.0);
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      const ScenePair& sp = scenes[si];
      View v1 = build_view(sp.img1);
      View v2 = build_view(sp.img2);
      const PointWarp w12 = detail::scene_warp(sp, 1);
      const PointWarp w21 = detail::scene_warp(sp, 2);

      reproj_total = add(reproj_total,
                         reprojection_loss(v1.positions, v2.positions, w12, w21,
                                           cfg.match_radius));

      // Frozen descriptors at the current keypoints give the matching matrix.
      const DescriptorField& f1 = fields[si].first;
      const DescriptorField& f2 = fields[si].second;
      std::vector<Keypoint> kv1, kv2;
      for (int i = 0; i < v1.positions.extent(0); ++i)
        kv1.push_back({std::clamp(v1.positions.at(i, 0), 0.0, sp.width() - 1.0),
                       std::clamp(v1.positions.at(i, 1), 0.0, sp.height() - 1.0), 1.0});
      for (int i = 0; i < v2.positions.extent(0); ++i)
        kv2.push_back({std::clamp(v2.positions.at(i, 0), 0.0, sp.width() - 1.0),
                       std::clamp(v2.positions.at(i, 1), 0.0, sp.height() - 1.0), 1.0});
      const Tensor p = dual_softmax(score_matrix(
                                        sample_descriptors(f1, kv1, sp.height(), sp.width()),
                                        sample_descriptors(f2, kv2, sp.height(), sp.width()),
                                        cfg.tau))
                           .detached();

      auto side = [&](const View& src, const View& dst, const Tensor& prob,
                      const PointWarp& warp, bool transpose) {
        ReliabilitySide out;
        std::vector<unsigned char> valid;
        const Tensor warped = apply_warp(src.positions, warp, &valid);
        std::vector<std::pair<int, int>> pairs;
        for (int i = 0; i < src.positions.extent(0); ++i) {
          if (!valid[static_cast<std::size_t>(i)]) continue;
          int best = -1;
          double best_d = cfg.match_radius;
          for (int j = 0; j < dst.positions.extent(0); ++j) {
            const double dd = std::hypot(warped.at(i, 0) - dst.positions.at(j, 0),
                                         warped.at(i, 1) - dst.positions.at(j, 1));
            if (dd <= best_d) {
              best_d = dd;
              best = j;
            }
          }
          if (best >= 0) pairs.push_back({i, best});
        }
        if (pairs.empty()) return out;
        // Score samples stay in the graph through both the map and the
        // keypoint positions.
        std::vector<std::pair<int, int>> prob_idx;
        std::vector<Tensor> src_rows, warped_rows;
        for (const auto& [i, j] : pairs) {
          prob_idx.push_back(transpose ? std::pair<int, int>{j, i}
                                       : std::pair<int, int>{i, j});
          src_rows.push_back(reshape(slice_rows(src.positions, i, i + 1), Shape{2}));
          warped_rows.push_back(reshape(slice_rows(warped, i, i + 1), Shape{2}));
        }
        const int m = static_cast<int>(pairs.size());
        out.s_src = reshape(bilinear_sample(src.score, stack_rows(src_rows)), Shape{m});
        out.s_dst = reshape(bilinear_sample(dst.score, stack_rows(warped_rows)), Shape{m});
        out.p = gather_entries(prob, prob_idx);
        return out;
      };
      const ReliabilitySide s1 = side(v1, v2, p, w12, false);
      const ReliabilitySide s2 = side(v2, v1, p, w21, true);
      reliab_total = add(reliab_total, reliability_loss(s1, s2, cfg.t_rel));

      peaky_total = add(peaky_total, peaky_loss(v1.score, v1.centers, cfg.peaky_window,
                                                cfg.t_det, cfg.p_norm));
      peaky_total = add(peaky_total, peaky_loss(v2.score, v2.centers, cfg.peaky_window,
                                                cfg.t_det, cfg.p_norm));
    }
    const double inv = 1.0 / static_cast<double>(scenes.size());
    const Tensor reproj = scale(reproj_total, inv);
    const Tensor reliab = scale(reliab_total, inv);
    const Tensor peaky = scale(peaky_total, 0.5 * inv);
    const Tensor total = add(add(reproj, reliab), peaky);
    if (!std::isfinite(total.value()))
      throw std::runtime_error("train_keypoint_branch: loss diverged at step " +
                               std::to_string(step));
    result.curve.push_back({static_cast<double>(step), total.value(), reproj.value(),
                            reliab.value(), peaky.value()});
    tape.backward(total);
    detail::apply_sgd_step(params, cfg.lr, cfg.clip_norm);
  }
  return result;
}

}  // namespace defmatch
