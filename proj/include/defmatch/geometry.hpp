#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "defmatch/image_ops.hpp"
#include "defmatch/matcher.hpp"
#include "defmatch/tensor.hpp"

namespace defmatch {

enum class DepthProfile { plane, ridge, cloud };

struct SceneParams {
  int height = 64;
  int width = 64;
  DepthProfile profile = DepthProfile::plane;
  double baseline = 0.25;      // world units between camera centres; 0 = pure rotation
  double rotation_mag = 0.12;  // radians of extra random rotation
};

// Two calibrated views of one procedurally textured heightfield. World frame =
// camera-1 frame; camera 2 maps X to R*X + t with t = baseline * t_dir.
// Depth maps store the camera-frame z per pixel, <= 0 where the ray missed.
struct ScenePair {
  Eigen::Matrix3d k1 = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d k2 = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t_dir = Eigen::Vector3d::Zero();  // unit, or zero when baseline == 0
  double baseline = 0.0;
  Tensor img1, img2;      // [H x W x 3], values in [0,1]
  Tensor depth1, depth2;  // [H x W]
  std::uint64_t seed = 0;
  DepthProfile profile = DepthProfile::plane;
  Eigen::Matrix3d h_gt = Eigen::Matrix3d::Zero();  // plane-induced homography, 1 -> 2
  bool has_homography = false;

  Eigen::Vector3d t() const { return baseline * t_dir; }
  int height() const { return img1.extent(0); }
  int width() const { return img1.extent(1); }
};

namespace detail {

// Heightfield z = g(x, y) plus its gradient; slopes are kept small enough that
// every camera ray crosses the surface exactly once.
struct Surface {
  DepthProfile profile;
  double z0 = 5.0;
  double ax = 0.0, ay = 0.0;  // plane slopes
  double amp = 0.0, wx = 0.0, wy = 0.0;  // ridge
  struct Harmonic {
    double a, kx, ky, phase;
  };
  std::vector<Harmonic> cloud;

  double value(double x, double y) const {
    switch (profile) {
      case DepthProfile::plane:
        return z0 + ax * x + ay * y;
      case DepthProfile::ridge:
        return z0 + amp * std::sin(wx * x) * std::cos(wy * y);
      case DepthProfile::cloud: {
        double z = z0;
        for (const Harmonic& h : cloud) z += h.a * std::sin(h.kx * x + h.ky * y + h.phase);
        return z;
      }
    }
    return z0;
  }

  void gradient(double x, double y, double* gx, double* gy) const {
    switch (profile) {
      case DepthProfile::plane:
        *gx = ax;
        *gy = ay;
        return;
      case DepthProfile::ridge:
        *gx = amp * wx * std::cos(wx * x) * std::cos(wy * y);
        *gy = -amp * wy * std::sin(wx * x) * std::sin(wy * y);
        return;
      case DepthProfile::cloud: {
        *gx = 0.0;
        *gy = 0.0;
        for (const Harmonic& h : cloud) {
          const double c = h.a * std::cos(h.kx * x + h.ky * y + h.phase);
          *gx += c * h.kx;
          *gy += c * h.ky;
        }
        return;
      }
    }
  }
};

inline Surface make_surface(DepthProfile profile, std::mt19937_64& rng) {
  Surface s;
  s.profile = profile;
  s.z0 = 4.5 + uniform01(rng);
  switch (profile) {
    case DepthProfile::plane:
      s.ax = 0.5 * (uniform01(rng) - 0.5);
      s.ay = 0.5 * (uniform01(rng) - 0.5);
      break;
    case DepthProfile::ridge:
      s.amp = 0.15 + 0.1 * uniform01(rng);
      s.wx = 1.0 + 1.2 * uniform01(rng);
      s.wy = 1.0 + 1.2 * uniform01(rng);
      break;
    case DepthProfile::cloud:
      for (int i = 0; i < 5; ++i) {
        const double ang = 6.283185307179586 * uniform01(rng);
        const double freq = 0.6 + 1.2 * uniform01(rng);
        // Total |a|*freq stays below 0.5 so the ray equation remains monotone.
        s.cloud.push_back({0.08 + 0.04 * uniform01(rng), freq * std::cos(ang),
                           freq * std::sin(ang), 6.283185307179586 * uniform01(rng)});
      }
      break;
  }
  return s;
}

// Procedural 3D albedo, shared by both views so the pair is photo-consistent.
struct SceneTexture {
  struct Wave {
    Eigen::Vector3d k;
    double phase, amp;
  };
  std::array<std::vector<Wave>, 3> channels;

  static SceneTexture make(std::mt19937_64& rng) {
    SceneTexture t;
    for (auto& ch : t.channels)
      for (int i = 0; i < 8; ++i) {
        Eigen::Vector3d k(uniform01(rng) - 0.5, uniform01(rng) - 0.5,
                          uniform01(rng) - 0.5);
        k *= (2.0 + 12.0 * uniform01(rng)) / k.norm();
        ch.push_back({k, 6.283185307179586 * uniform01(rng), 0.09 + 0.05 * uniform01(rng)});
      }
    return t;
  }

  double sample(int channel, const Eigen::Vector3d& x) const {
    double v = 0.5;
    for (const Wave& w : channels[channel]) v += w.amp * std::sin(w.k.dot(x) + w.phase);
    return std::min(1.0, std::max(0.0, v));
  }
};

// Depth along a ray origin + depth * dir (dir_z == 1) to the surface; <= 0 when
// the intersection fails. Newton on a monotone function, so divergence only
// happens for rays that leave the slab.
inline double intersect_depth(const Surface& s, const Eigen::Vector3d& origin,
                              const Eigen::Vector3d& dir) {
  if (s.profile == DepthProfile::plane) {
    const double den = dir(2) - s.ax * dir(0) - s.ay * dir(1);
    if (std::abs(den) < 1e-9) return -1.0;
    const double d = (s.z0 + s.ax * origin(0) + s.ay * origin(1) - origin(2)) / den;
    return d > 0.05 ? d : -1.0;
  }
  double d = (s.z0 - origin(2)) / dir(2);
  for (int it = 0; it < 25; ++it) {
    const Eigen::Vector3d p = origin + d * dir;
    const double phi = p(2) - s.value(p(0), p(1));
    double gx, gy;
    s.gradient(p(0), p(1), &gx, &gy);
    const double dphi = dir(2) - gx * dir(0) - gy * dir(1);
    if (std::abs(dphi) < 1e-6) return -1.0;
    d -= phi / dphi;
    if (!(d > 0.05 && d < 100.0)) return -1.0;
  }
  const Eigen::Vector3d p = origin + d * dir;
  if (std::abs(p(2) - s.value(p(0), p(1))) > 1e-9) return -1.0;
  return d;
}

}  // namespace detail

inline ScenePair synth_scene(std::uint64_t seed, const SceneParams& params) {
  if (params.height % 64 != 0 || params.width % 64 != 0 || params.height <= 0)
    throw std::invalid_argument("synth_scene: extents must be positive multiples of 64");
  if (params.baseline < 0.0)
    throw std::invalid_argument("synth_scene: negative baseline");

  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 12345);
  ScenePair sp;
  sp.seed = seed;
  sp.profile = params.profile;
  sp.baseline = params.baseline;

  const int h = params.height, w = params.width;
  const double f = 0.8 * w;
  sp.k1 << f, 0, (w - 1) / 2.0, 0, f, (h - 1) / 2.0, 0, 0, 1;
  sp.k2 = sp.k1;

  detail::Surface surf = detail::make_surface(params.profile, rng);
  detail::SceneTexture tex = detail::SceneTexture::make(rng);

  // Camera 2: place on a small arc around the surface, aim at the central
  // surface point, then tilt by a random extra rotation.
  const Eigen::Vector3d look_at(0.0, 0.0, surf.value(0.0, 0.0));
  Eigen::Vector3d c2 = Eigen::Vector3d::Zero();
  if (params.baseline > 0.0) {
    Eigen::Vector3d dir(uniform01(rng) - 0.5, uniform01(rng) - 0.5,
                        0.4 * (uniform01(rng) - 0.5));
    c2 = params.baseline * dir.normalized();
  }
  Eigen::Vector3d fwd = (look_at - c2).normalized();
  Eigen::Vector3d right = Eigen::Vector3d::UnitY().cross(fwd).normalized();
  Eigen::Vector3d down = fwd.cross(right);
  Eigen::Matrix3d r_look;
  r_look.row(0) = right;
  r_look.row(1) = down;
  r_look.row(2) = fwd;
  Eigen::Vector3d axis(uniform01(rng) - 0.5, uniform01(rng) - 0.5, uniform01(rng) - 0.5);
  axis.normalize();
  const double angle = params.rotation_mag * (uniform01(rng) - 0.5) * 2.0;
  sp.r = Eigen::AngleAxisd(angle, axis).toRotationMatrix() * r_look;
  const Eigen::Vector3d t = -sp.r * c2;
  if (params.baseline > 0.0) sp.t_dir = t / params.baseline;

  sp.img1 = Tensor(Shape{h, w, 3});
  sp.img2 = Tensor(Shape{h, w, 3});
  sp.depth1 = Tensor(Shape{h, w});
  sp.depth2 = Tensor(Shape{h, w});

  const Eigen::Matrix3d k1inv = sp.k1.inverse(), k2inv = sp.k2.inverse();
  const Eigen::Matrix3d rt = sp.r.transpose();
  for (int cam = 0; cam < 2; ++cam) {
    Tensor& img = cam == 0 ? sp.img1 : sp.img2;
    Tensor& dep = cam == 0 ? sp.depth1 : sp.depth2;
    const Eigen::Matrix3d kinv = cam == 0 ? k1inv : k2inv;
    const Eigen::Vector3d origin = cam == 0 ? Eigen::Vector3d::Zero() : c2;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        // Parameterised so the ray parameter equals camera-frame depth.
        const Eigen::Vector3d dir_cam = kinv * Eigen::Vector3d(j, i, 1.0);
        const Eigen::Vector3d dw = cam == 0 ? dir_cam : Eigen::Vector3d(rt * dir_cam);
        const double d = detail::intersect_depth(surf, origin, dw);
        dep.at(i, j) = d;
        if (d > 0.0) {
          const Eigen::Vector3d x = origin + d * dw;
          for (int c = 0; c < 3; ++c) img.at(i, j, c) = tex.sample(c, x);
        }
      }
  }

  if (params.profile == DepthProfile::plane) {
    // Plane -ax*x - ay*y + z = z0, so n^T X = z0 with n = (-ax, -ay, 1).
    const Eigen::Vector3d n(-surf.ax, -surf.ay, 1.0);
    sp.h_gt = sp.k2 * (sp.r + t * n.transpose() / surf.z0) * sp.k1.inverse();
    sp.h_gt /= sp.h_gt(2, 2);
    sp.has_homography = true;
  }
  return sp;
}

// Bilinear depth lookup that refuses to interpolate across invalid samples.
inline double sample_depth(const Tensor& depth, double x, double y) {
  const int h = depth.extent(0), w = depth.extent(1);
  if (!(x >= -1e-9 && x <= w - 1.0 + 1e-9 && y >= -1e-9 && y <= h - 1.0 + 1e-9))
    return -1.0;
  x = std::clamp(x, 0.0, w - 1.0);
  y = std::clamp(y, 0.0, h - 1.0);
  const auto tx = detail::axis_tap(x, w), ty = detail::axis_tap(y, h);
  const double v00 = depth.at(ty.i0, tx.i0), v01 = depth.at(ty.i0, tx.i1);
  const double v10 = depth.at(ty.i1, tx.i0), v11 = depth.at(ty.i1, tx.i1);
  if (v00 <= 0.0 || v01 <= 0.0 || v10 <= 0.0 || v11 <= 0.0) return -1.0;
  return (1 - ty.w) * ((1 - tx.w) * v00 + tx.w * v01) +
         ty.w * ((1 - tx.w) * v10 + tx.w * v11);
}

// Warp points between the two views through depth + pose. direction 1 maps
// image-1 points into image 2; direction 2 the reverse. Failures (missing
// depth, behind camera, out of frame) clear the validity flag.
inline std::vector<Vec2> warp_points(const std::vector<Vec2>& pts, const ScenePair& sp,
                                     int direction, std::vector<unsigned char>* valid) {
  if (direction != 1 && direction != 2)
    throw std::invalid_argument("warp_points: direction must be 1 or 2");
  const bool fwd = direction == 1;
  const Tensor& src_depth = fwd ? sp.depth1 : sp.depth2;
  const Eigen::Matrix3d& k_src = fwd ? sp.k1 : sp.k2;
  const Eigen::Matrix3d& k_dst = fwd ? sp.k2 : sp.k1;
  const Eigen::Matrix3d k_src_inv = k_src.inverse();
  const Eigen::Vector3d t = sp.t();
  const int h = fwd ? sp.depth2.extent(0) : sp.depth1.extent(0);
  const int w = fwd ? sp.depth2.extent(1) : sp.depth1.extent(1);

  std::vector<Vec2> out(pts.size(), Vec2{0.0, 0.0});
  if (valid) valid->assign(pts.size(), 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = sample_depth(src_depth, pts[i].x, pts[i].y);
    if (d <= 0.0) continue;
    const Eigen::Vector3d x_src = d * (k_src_inv * Eigen::Vector3d(pts[i].x, pts[i].y, 1.0));
    const Eigen::Vector3d x_dst =
        fwd ? Eigen::Vector3d(sp.r * x_src + t)
            : Eigen::Vector3d(sp.r.transpose() * (x_src - t));
    if (x_dst(2) <= 1e-9) continue;
    const Eigen::Vector3d p = k_dst * x_dst;
    const double px = p(0) / p(2), py = p(1) / p(2);
    out[i] = {px, py};
    // Hairline slack keeps exact-boundary pixels valid under fp round-off.
    if (px >= -1e-9 && px <= w - 1.0 + 1e-9 && py >= -1e-9 && py <= h - 1.0 + 1e-9 &&
        valid)
      (*valid)[i] = 1;
  }
  return out;
}

struct GroundTruthMatches {
  std::vector<std::array<double, 4>> rows;  // x1, y1, x2, y2
  bool complete = true;                     // false when fewer than requested survived
};

// Seeded sample of mutually consistent correspondences: forward warp valid and
// the round trip returns within half a pixel.
inline GroundTruthMatches gt_correspondences(const ScenePair& sp, int count) {
  if (count < 1) throw std::invalid_argument("gt_correspondences: count must be positive");
  std::mt19937_64 rng(sp.seed * 0x2545f4914f6cdd1dULL + 77);
  GroundTruthMatches out;
  const int h = sp.height(), w = sp.width();
  const int budget = count * 20;
  for (int it = 0; it < budget && static_cast<int>(out.rows.size()) < count; ++it) {
    const double x = uniform01(rng) * (w - 1);
    const double y = uniform01(rng) * (h - 1);
    std::vector<unsigned char> v1, v2;
    const std::vector<Vec2> fwd = warp_points({{x, y}}, sp, 1, &v1);
    if (!v1[0]) continue;
    const std::vector<Vec2> back = warp_points({fwd[0]}, sp, 2, &v2);
    if (!v2[0]) continue;
    if (std::hypot(back[0].x - x, back[0].y - y) > 0.5) continue;
    out.rows.push_back({x, y, fwd[0].x, fwd[0].y});
  }
  out.complete = static_cast<int>(out.rows.size()) == count;
  return out;
}

// Number of integer source pixels whose warp is valid and round-trip
// consistent within half a pixel.
inline int overlap_count(const ScenePair& sp, int direction = 1) {
  const int h = sp.height(), w = sp.width();
  std::vector<Vec2> pts;
  pts.reserve(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) pts.push_back({static_cast<double>(j), static_cast<double>(i)});
  std::vector<unsigned char> v1, v2;
  const std::vector<Vec2> fwd = warp_points(pts, sp, direction, &v1);
  const std::vector<Vec2> back = warp_points(fwd, sp, direction == 1 ? 2 : 1, &v2);
  int n = 0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (v1[i] && v2[i] &&
        std::hypot(back[i].x - pts[i].x, back[i].y - pts[i].y) <= 0.5)
      ++n;
  return n;
}

// Analytic fundamental matrix of the pair; undefined for pure rotation.
inline FundamentalMatrix gt_fundamental(const ScenePair& sp) {
  if (sp.baseline <= 0.0)
    throw std::invalid_argument("gt_fundamental: pure-rotation pair has no unique F");
  const Eigen::Vector3d t = sp.t();
  Eigen::Matrix3d tx;
  tx << 0, -t(2), t(1), t(2), 0, -t(0), -t(1), t(0), 0;
  return FundamentalMatrix(sp.k2.transpose().inverse() * (tx * sp.r) * sp.k1.inverse());
}

}  // namespace defmatch
