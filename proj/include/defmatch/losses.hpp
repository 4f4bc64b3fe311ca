#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "defmatch/image_ops.hpp"
#include "defmatch/keypoint.hpp"
#include "defmatch/ops.hpp"

namespace defmatch {

// Focal matching loss over the diagonal of the dual-softmax matrix: the mean
// of -alpha * (1 - P)^gamma * log(P). Entries at or below zero are clamped to
// 1e-12 and reported through the flag.
inline Tensor focal_matching_loss(const Tensor& p_diag, double alpha, double gamma,
                                  bool* clamped = nullptr) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("focal_matching_loss: alpha");
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_matching_loss: gamma");
  if (p_diag.size() < 1) throw std::invalid_argument("focal_matching_loss: empty input");
  if (clamped) {
    *clamped = false;
    for (double v : p_diag.data())
      if (v < 1e-12) *clamped = true;
  }
  const Tensor pc = clamp(p_diag, 1e-12, 1.0);
  const Tensor focal = pow_const(add_const(neg(pc), 1.0), gamma);
  return mean(scale(mul(focal, neg(log(pc))), alpha));
}

// Matchability loss: per-pixel binary cross-entropy against the rasterized
// ground truth, focal-weighted by lambda = exp(-L_BCE); the per-pixel term is
// alpha * (1 - lambda)^gamma * L_BCE, averaged over the map.
inline Tensor matchability_loss(const Tensor& m, const Tensor& m_gt, double alpha,
                                double gamma) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("matchability_loss: alpha");
  if (!(gamma >= 0.0)) throw std::invalid_argument("matchability_loss: gamma");
  if (m.shape() != m_gt.shape())
    throw std::invalid_argument("matchability_loss: shape mismatch");
  if (m.size() < 1) throw std::invalid_argument("matchability_loss: empty input");
  for (double g : m_gt.data())
    if (g != 0.0 && g != 1.0)
      throw std::invalid_argument("matchability_loss: ground truth must be binary");

  const Tensor mc = clamp(m, 1e-12, 1.0 - 1e-12);
  const Tensor gt = m_gt.detached();
  const Tensor bce = neg(add(mul(gt, log(mc)),
                             mul(add_const(neg(gt), 1.0), log(add_const(neg(mc), 1.0)))));
  const Tensor lam = exp(neg(bce));
  const Tensor focal = pow_const(add_const(neg(lam), 1.0), gamma);
  return mean(scale(mul(focal, bce), alpha));
}

// One direction of a depth-and-pose warp on loose points. Returns false for
// points whose warp is undefined.
using PointWarp = std::function<bool(double x, double y, double* wx, double* wy)>;

// Differentiable warp of an [N x 2] point tensor. The value path evaluates the
// warp exactly; the backward path uses a 2x2 central-difference Jacobian per
// point, frozen at forward time. Invalid points produce zero rows, a cleared
// validity flag, and no gradient.
inline Tensor apply_warp(const Tensor& pts, const PointWarp& warp,
                         std::vector<unsigned char>* valid) {
  if (pts.rank() != 2 || pts.extent(1) != 2)
    throw std::invalid_argument("apply_warp: points must be [N x 2]");
  const int n = pts.extent(0);
  Tensor out(Shape{n, 2});
  std::vector<unsigned char> mask(static_cast<std::size_t>(n), 0);
  std::vector<double> jac(static_cast<std::size_t>(n) * 4, 0.0);

  const double h = 1e-4;
  for (int i = 0; i < n; ++i) {
    const double x = pts.at(i, 0), y = pts.at(i, 1);
    double wx, wy, xp, yp, xm, ym;
    if (!warp(x, y, &wx, &wy)) continue;
    if (!(warp(x + h, y, &xp, &yp) && warp(x - h, y, &xm, &ym))) continue;
    const double j00 = (xp - xm) / (2.0 * h), j10 = (yp - ym) / (2.0 * h);
    if (!(warp(x, y + h, &xp, &yp) && warp(x, y - h, &xm, &ym))) continue;
    jac[static_cast<std::size_t>(i) * 4 + 0] = j00;                    // dwx/dx
    jac[static_cast<std::size_t>(i) * 4 + 2] = j10;                    // dwy/dx
    jac[static_cast<std::size_t>(i) * 4 + 1] = (xp - xm) / (2.0 * h);  // dwx/dy
    jac[static_cast<std::size_t>(i) * 4 + 3] = (yp - ym) / (2.0 * h);  // dwy/dy
    out.at(i, 0) = wx;
    out.at(i, 1) = wy;
    mask[static_cast<std::size_t>(i)] = 1;
  }
  if (valid) *valid = mask;

  if (detail::track({&pts})) {
    out.set_requires_grad(true);
    auto pn = pts.handle(), on = out.handle();
    GradTape::record(on, [pn, on, jac, mask, n] {
      if (on->grad.empty()) return;
      for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const double gx = on->grad[static_cast<std::size_t>(i) * 2];
        const double gy = on->grad[static_cast<std::size_t>(i) * 2 + 1];
        const double* j = &jac[static_cast<std::size_t>(i) * 4];
        detail::accum(pn, static_cast<std::size_t>(i) * 2, gx * j[0] + gy * j[2]);
        detail::accum(pn, static_cast<std::size_t>(i) * 2 + 1, gx * j[1] + gy * j[3]);
      }
    });
  }
  return out;
}

namespace detail {

// Differentiable per-row Euclidean distance between selected rows of two
// [N x 2] tensors; pairs is a list of (row in a, row in b).
inline Tensor row_pair_distances(const Tensor& a, const Tensor& b,
                                 const std::vector<std::pair<int, int>>& pairs) {
  std::vector<std::pair<int, int>> ia, ib;
  for (const auto& [i, j] : pairs) {
    ia.push_back({i, 0});
    ia.push_back({i, 1});
    ib.push_back({j, 0});
    ib.push_back({j, 1});
  }
  const Tensor diff = sub(gather_entries(a, ia), gather_entries(b, ib));
  const Tensor sq = reshape(mul(diff, diff), Shape{static_cast<int>(pairs.size()), 2});
  Tensor ones(Shape{2, 1}, 1.0);
  return sqrt(reshape(matmul(sq, ones), Shape{static_cast<int>(pairs.size())}));
}

}  // namespace detail

// Symmetric reprojection loss: warp each keypoint set into the other image,
// pair it with the nearest counterpart within match_radius (nearest neighbours
// are chosen on values and frozen), and average the pair distances. Keypoints
// with no valid warp or no neighbour in range are excluded.
inline Tensor reprojection_loss(const Tensor& kps1, const Tensor& kps2,
                                const PointWarp& warp12, const PointWarp& warp21,
                                double match_radius = 5.0, bool* empty = nullptr) {
  if (!(match_radius > 0.0))
    throw std::invalid_argument("reprojection_loss: match radius must be positive");

  auto direction = [&](const Tensor& src, const Tensor& dst, const PointWarp& warp,
                       int* count) -> Tensor {
    std::vector<unsigned char> valid;
    const Tensor warped = apply_warp(src, warp, &valid);
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < src.extent(0); ++i) {
      if (!valid[static_cast<std::size_t>(i)]) continue;
      int best = -1;
      double best_d = match_radius;
      for (int j = 0; j < dst.extent(0); ++j) {
        const double d = std::hypot(warped.at(i, 0) - dst.at(j, 0),
                                    warped.at(i, 1) - dst.at(j, 1));
        if (d <= best_d) {
          best_d = d;
          best = j;
        }
      }
      if (best >= 0) pairs.push_back({i, best});
    }
    *count = static_cast<int>(pairs.size());
    if (pairs.empty()) return Tensor::scalar(0.0);
    return mean(detail::row_pair_distances(warped, dst, pairs));
  };

  int n12 = 0, n21 = 0;
  const Tensor d12 = direction(kps1, kps2, warp12, &n12);
  const Tensor d21 = direction(kps2, kps1, warp21, &n21);
  if (empty) *empty = n12 == 0 && n21 == 0;
  return scale(add(d12, d21), 0.5);
}

// Matched quantities for one direction of the reliability loss: source-image
// scores, scores sampled at the warped positions, and the matching
// probabilities of the paired entries. All tensors share extent [M].
struct ReliabilitySide {
  Tensor s_src;
  Tensor s_dst;
  Tensor p;

  bool empty() const { return !s_src.defined() || s_src.size() == 0; }
};

namespace detail {

inline Tensor reliability_side_loss(const ReliabilitySide& side, double t_rel) {
  if (side.s_src.shape() != side.s_dst.shape() || side.s_src.shape() != side.p.shape())
    throw std::invalid_argument("reliability_loss: side tensors disagree in shape");
  const Tensor r = defmatch::exp(scale(add_const(side.p, -1.0), 1.0 / t_rel));
  const Tensor w = mul(side.s_src, side.s_dst);
  const Tensor wn = bcast_div(w, sum(w));
  return sum(mul(wn, add_const(neg(r), 1.0)));
}

}  // namespace detail

// Score-weighted unreliability, symmetrized over the two directions: per side
// the weights s_src * s_dst are normalized to sum to one and applied to
// (1 - r) with r = exp((P - 1) / t_rel). Empty sides contribute zero.
inline Tensor reliability_loss(const ReliabilitySide& side1, const ReliabilitySide& side2,
                               double t_rel = 1.0, bool* empty = nullptr) {
  if (!(t_rel > 0.0)) throw std::invalid_argument("reliability_loss: t_rel must be positive");
  if (empty) *empty = side1.empty() && side2.empty();
  const Tensor l1 = side1.empty() ? Tensor::scalar(0.0)
                                  : detail::reliability_side_loss(side1, t_rel);
  const Tensor l2 = side2.empty() ? Tensor::scalar(0.0)
                                  : detail::reliability_side_loss(side2, t_rel);
  return scale(add(l1, l2), 0.5);
}

// Peakiness loss: for each interior keypoint take the N x N window, soften it
// with temperature t_det, and accumulate the softmax-weighted p-norm distance
// to the soft location, scaled by 1/N^2. Border keypoints are skipped and
// counted.
inline Tensor peaky_loss(const Tensor& s, const std::vector<Keypoint>& kps, int n,
                         double t_det, double p_norm = 2.0, int* skipped = nullptr) {
  if (s.rank() != 2) throw std::invalid_argument("peaky_loss: score map must be [H x W]");
  if (n < 1 || n % 2 == 0) throw std::invalid_argument("peaky_loss: window extent must be odd");
  if (!(t_det > 0.0)) throw std::invalid_argument("peaky_loss: t_det must be positive");
  if (!(p_norm >= 1.0)) throw std::invalid_argument("peaky_loss: p_norm must be >= 1");

  const int h = s.extent(0), w = s.extent(1), m = (n - 1) / 2;
  Tensor dxs(Shape{n * n}), dys(Shape{n * n});
  for (int dy = -m; dy <= m; ++dy)
    for (int dx = -m; dx <= m; ++dx) {
      dxs.at((dy + m) * n + (dx + m)) = dx;
      dys.at((dy + m) * n + (dx + m)) = dy;
    }

  if (skipped) *skipped = 0;
  Tensor total = Tensor::scalar(0.0);
  int used = 0;
  for (const Keypoint& kp : kps) {
    const int cx = static_cast<int>(std::lround(kp.x));
    const int cy = static_cast<int>(std::lround(kp.y));
    if (cx < m || cx >= w - m || cy < m || cy >= h - m) {
      if (skipped) ++*skipped;
      continue;
    }
    const Tensor sp = softmax(reshape(gather_window(s, cy, cx, n), Shape{n * n}), t_det);
    const Tensor ddx = bcast_sub(dxs, dot(sp, dxs));
    const Tensor ddy = bcast_sub(dys, dot(sp, dys));
    Tensor dist;
    if (p_norm == 2.0) {
      dist = defmatch::sqrt(add(mul(ddx, ddx), mul(ddy, ddy)));
    } else {
      dist = pow_const(add(pow_const(defmatch::abs(ddx), p_norm),
                           pow_const(defmatch::abs(ddy), p_norm)),
                       1.0 / p_norm);
    }
    total = add(total, scale(dot(dist, sp), 1.0 / (n * n)));
    ++used;
  }
  if (used == 0) return total;
  return scale(total, 1.0 / used);
}

}  // namespace defmatch
