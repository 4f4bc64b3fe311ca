#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "defmatch/matcher.hpp"
#include "defmatch/tensor.hpp"

namespace defmatch {

struct RansacResult {
  FundamentalMatrix f;
  std::vector<unsigned char> inliers;
  int best_iteration = -1;
};

namespace detail {

inline std::vector<int> sample_distinct(std::mt19937_64& rng, int k, int n) {
  std::vector<int> idx(k);
  for (int i = 0; i < k; ++i) {
    bool fresh = false;
    while (!fresh) {
      idx[i] = static_cast<int>(uniform01(rng) * n);
      if (idx[i] >= n) idx[i] = n - 1;
      fresh = true;
      for (int j = 0; j < i; ++j) fresh = fresh && idx[j] != idx[i];
    }
  }
  return idx;
}

inline MatchSet select_matches(const MatchSet& m, const std::vector<int>& idx) {
  MatchSet out;
  out.kind = m.kind;
  for (int i : idx) out.pairs.push_back(m.pairs[i]);
  return out;
}

}  // namespace detail

// RANSAC over the eight-point solver with symmetric epipolar distance. Each
// iteration draws from its own seeded stream, so the result is independent of
// scheduling; ties in consensus size keep the earliest iteration.
inline RansacResult ransac_fundamental(const MatchSet& matches, int iterations,
                                       double inlier_thresh, std::uint64_t seed) {
  const int n = static_cast<int>(matches.pairs.size());
  if (n < 8) throw std::invalid_argument("ransac_fundamental: need at least 8 matches");
  if (iterations < 1 || inlier_thresh <= 0.0)
    throw std::invalid_argument("ransac_fundamental: bad iteration count or threshold");

  auto score = [&](const FundamentalMatrix& f, std::vector<unsigned char>* mask) {
    int count = 0;
    if (mask) mask->assign(n, 0);
    for (int i = 0; i < n; ++i) {
      const MatchPair& p = matches.pairs[i];
      const double d = symmetric_epipolar_distance(f, Vec2{p.x1, p.y1}, Vec2{p.x2, p.y2});
      if (d <= inlier_thresh) {
        ++count;
        if (mask) (*mask)[i] = 1;
      }
    }
    return count;
  };

  RansacResult best;
  int best_count = -1;
  for (int it = 0; it < iterations; ++it) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(it));
    const std::vector<int> idx = detail::sample_distinct(rng, 8, n);
    FundamentalMatrix f;
    try {
      f = estimate_fundamental(detail::select_matches(matches, idx));
    } catch (const std::exception&) {
      continue;  // degenerate minimal sample
    }
    const int count = score(f, nullptr);
    if (count > best_count) {
      best_count = count;
      best.f = f;
      best.best_iteration = it;
    }
  }
  if (best_count < 0)
    throw std::runtime_error("ransac_fundamental: every minimal sample was degenerate");

  best_count = score(best.f, &best.inliers);
  std::vector<int> inlier_idx;
  for (int i = 0; i < n; ++i)
    if (best.inliers[i]) inlier_idx.push_back(i);
  if (static_cast<int>(inlier_idx.size()) >= 8) {
    try {
      const FundamentalMatrix refit =
          estimate_fundamental(detail::select_matches(matches, inlier_idx));
      std::vector<unsigned char> refit_mask;
      // Keep the refit only when it does not shrink the consensus; a couple of
      // outliers inside the inlier set can otherwise poison the least squares.
      if (score(refit, &refit_mask) >= best_count) {
        best.f = refit;
        best.inliers = std::move(refit_mask);
      }
    } catch (const std::exception&) {
      // keep the minimal-sample model when the refit degenerates
    }
  }
  return best;
}

struct PoseEstimate {
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();  // unit norm; direction only
  bool translation_reliable = true;
  double median_triangulation_deg = 0.0;
};

namespace detail {

// Midpoint cheirality probe: intersect the two viewing rays in world
// (camera-1) coordinates and report whether the closest point lies in front of
// both cameras. Parallel rays (pure rotation) vote on ray direction instead,
// which is the correct limit for a point at infinity.
struct RayVote {
  bool in_front = false;
  double angle_deg = 0.0;  // parallax between the viewing rays
};

inline RayVote cheirality_vote(const Eigen::Matrix3d& r, const Eigen::Vector3d& t,
                               const Eigen::Vector3d& x1, const Eigen::Vector3d& x2) {
  const Eigen::Vector3d d1 = x1;                  // ray from camera 1 at the origin
  const Eigen::Vector3d d2 = r.transpose() * x2;  // ray from camera 2 at -R^T t
  const Eigen::Vector3d c2 = -(r.transpose() * t);
  const double a = d1.dot(d1), c = d2.dot(d2), h = d1.dot(d2);
  RayVote out;
  const double cosang = std::clamp(h / std::sqrt(a * c), -1.0, 1.0);
  out.angle_deg = std::acos(cosang) * 180.0 / 3.14159265358979323846;
  const double det = a * c - h * h;
  if (det <= 1e-14 * a * c) {
    out.in_front = h > 0.0;  // same direction: shared point at infinity ahead
    return out;
  }
  // argmin over s1, s2 of |s1 d1 - (c2 + s2 d2)|
  const double b1 = d1.dot(c2), b2 = d2.dot(c2);
  const double s1 = (c * b1 - h * b2) / det;
  const double s2 = (h * b1 - a * b2) / det;
  out.in_front = s1 > 0.0 && s2 > 0.0;
  return out;
}

}  // namespace detail

// Decompose F into (R, t) through the essential matrix, resolving the fourfold
// ambiguity by cheirality voting over the inlier matches. Throws when no
// candidate places any point in front of both cameras.
inline PoseEstimate recover_pose(const FundamentalMatrix& f, const Eigen::Matrix3d& k1,
                                 const Eigen::Matrix3d& k2, const MatchSet& matches) {
  if (matches.pairs.empty())
    throw std::invalid_argument("recover_pose: no matches");
  const Eigen::Matrix3d e_raw = k2.transpose() * f.f * k1;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e_raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  if (u.determinant() < 0) u = -u;
  if (v.determinant() < 0) v = -v;
  Eigen::Matrix3d wmat;
  wmat << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d r_a = u * wmat * v.transpose();
  const Eigen::Matrix3d r_b = u * wmat.transpose() * v.transpose();
  const Eigen::Vector3d t_u = u.col(2);

  const Eigen::Matrix3d k1inv = k1.inverse(), k2inv = k2.inverse();
  std::vector<Eigen::Vector3d> x1s, x2s;
  for (const MatchPair& p : matches.pairs) {
    x1s.push_back(k1inv * Eigen::Vector3d(p.x1, p.y1, 1.0));
    x2s.push_back(k2inv * Eigen::Vector3d(p.x2, p.y2, 1.0));
  }

  const std::array<std::pair<Eigen::Matrix3d, Eigen::Vector3d>, 4> candidates = {
      std::make_pair(r_a, t_u), std::make_pair(r_a, Eigen::Vector3d(-t_u)),
      std::make_pair(r_b, t_u), std::make_pair(r_b, Eigen::Vector3d(-t_u))};

  // A candidate passes cheirality only with a strict majority of points in
  // front of both cameras; accidental front-votes cannot rescue a reflected
  // or twisted solution.
  const int n_pts = static_cast<int>(x1s.size());
  int best_votes = 0, best_idx = -1;
  std::vector<double> best_angles;
  for (int c = 0; c < 4; ++c) {
    int votes = 0;
    std::vector<double> angles;
    for (std::size_t i = 0; i < x1s.size(); ++i) {
      const detail::RayVote v =
          detail::cheirality_vote(candidates[c].first, candidates[c].second, x1s[i], x2s[i]);
      if (v.in_front) {
        ++votes;
        angles.push_back(v.angle_deg);
      }
    }
    if (2 * votes > n_pts && votes > best_votes) {
      best_votes = votes;
      best_idx = c;
      best_angles = std::move(angles);
    }
  }
  if (best_idx < 0)
    throw std::runtime_error("recover_pose: cheirality check rejected all candidates");

  PoseEstimate out;
  out.r = candidates[best_idx].first;
  out.t = candidates[best_idx].second;
  std::sort(best_angles.begin(), best_angles.end());
  out.median_triangulation_deg =
      best_angles.empty() ? 0.0 : best_angles[best_angles.size() / 2];
  out.translation_reliable = out.median_triangulation_deg >= 0.05;
  return out;
}

inline double rotation_error_deg(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_gt) {
  const double c = std::clamp(((r_est.transpose() * r_gt).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / 3.14159265358979323846;
}

// Angle between translation directions, insensitive to the global sign.
inline double translation_error_deg(const Eigen::Vector3d& t_est, const Eigen::Vector3d& t_gt) {
  const double ne = t_est.norm(), ng = t_gt.norm();
  if (ne < 1e-12 || ng < 1e-12)
    throw std::invalid_argument("translation_error_deg: zero-length direction");
  const double c = std::clamp(std::abs(t_est.dot(t_gt)) / (ne * ng), 0.0, 1.0);
  return std::acos(c) * 180.0 / 3.14159265358979323846;
}

struct PoseError {
  double rotation_deg = 0.0;
  double translation_deg = 0.0;
  double combined() const { return std::max(rotation_deg, translation_deg); }
};

// Area under the recall-vs-error curve up to each threshold, normalised by the
// threshold. Errors are sorted, recall steps by 1/N per pose, and the curve is
// integrated exactly by the trapezoid rule with a flat extension to T.
inline std::vector<double> pose_auc(std::vector<double> errors,
                                    const std::vector<double>& thresholds) {
  if (errors.empty()) throw std::invalid_argument("pose_auc: empty error list");
  for (double t : thresholds)
    if (!(t > 0.0)) throw std::invalid_argument("pose_auc: thresholds must be positive");
  for (double& e : errors)
    if (!(e >= 0.0)) e = std::numeric_limits<double>::infinity();  // NaN counts as failure
  std::sort(errors.begin(), errors.end());
  const int n = static_cast<int>(errors.size());

  std::vector<double> out;
  for (double t : thresholds) {
    double area = 0.0, prev_e = 0.0, prev_r = 0.0;
    for (int i = 0; i < n && errors[i] < t; ++i) {
      const double r = static_cast<double>(i + 1) / n;
      area += (errors[i] - prev_e) * (prev_r + r) / 2.0;
      prev_e = errors[i];
      prev_r = r;
    }
    area += (t - prev_e) * prev_r;  // flat tail at the last reached recall
    out.push_back(area / t);
  }
  return out;
}

// Mean Euclidean error of the four image corners mapped by the estimated vs
// the true homography; non-invertible estimates count as failures.
inline double homography_corner_error(const Eigen::Matrix3d& h_est, const Eigen::Matrix3d& h_gt,
                                      int width, int height) {
  if (width < 2 || height < 2)
    throw std::invalid_argument("homography_corner_error: bad extents");
  if (std::abs(h_est.determinant()) < 1e-12 || !h_est.allFinite())
    return std::numeric_limits<double>::infinity();
  const std::array<Eigen::Vector3d, 4> corners = {
      Eigen::Vector3d(0, 0, 1), Eigen::Vector3d(width - 1, 0, 1),
      Eigen::Vector3d(width - 1, height - 1, 1), Eigen::Vector3d(0, height - 1, 1)};
  double total = 0.0;
  for (const Eigen::Vector3d& c : corners) {
    const Eigen::Vector3d a = h_est * c, b = h_gt * c;
    if (std::abs(a(2)) < 1e-12 || std::abs(b(2)) < 1e-12)
      return std::numeric_limits<double>::infinity();
    total += std::hypot(a(0) / a(2) - b(0) / b(2), a(1) / a(2) - b(1) / b(2));
  }
  return total / 4.0;
}

// Fraction of pairs whose corner error stays under each threshold.
inline std::vector<double> homography_mha(const std::vector<double>& corner_errors,
                                          const std::vector<double>& thresholds) {
  if (corner_errors.empty()) throw std::invalid_argument("homography_mha: empty error list");
  std::vector<double> out;
  for (double t : thresholds) {
    int hits = 0;
    for (double e : corner_errors)
      if (e <= t) ++hits;
    out.push_back(static_cast<double>(hits) / corner_errors.size());
  }
  return out;
}

// Hartley-normalised DLT homography fit; at least four correspondences.
inline Eigen::Matrix3d estimate_homography(const MatchSet& matches) {
  const int n = static_cast<int>(matches.pairs.size());
  if (n < 4) throw std::invalid_argument("estimate_homography: need at least 4 matches");

  auto normalizer = [&](bool second) {
    double cx = 0, cy = 0;
    for (const MatchPair& p : matches.pairs) {
      cx += second ? p.x2 : p.x1;
      cy += second ? p.y2 : p.y1;
    }
    cx /= n;
    cy /= n;
    double dist = 0;
    for (const MatchPair& p : matches.pairs)
      dist += std::hypot((second ? p.x2 : p.x1) - cx, (second ? p.y2 : p.y1) - cy);
    dist /= n;
    const double s = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
    Eigen::Matrix3d t;
    t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
    return t;
  };
  const Eigen::Matrix3d t1 = normalizer(false), t2 = normalizer(true);

  Eigen::MatrixXd a(2 * n, 9);
  for (int i = 0; i < n; ++i) {
    const MatchPair& p = matches.pairs[i];
    const Eigen::Vector3d q1 = t1 * Eigen::Vector3d(p.x1, p.y1, 1.0);
    const Eigen::Vector3d q2 = t2 * Eigen::Vector3d(p.x2, p.y2, 1.0);
    const double x1 = q1(0) / q1(2), y1 = q1(1) / q1(2);
    const double x2 = q2(0) / q2(2), y2 = q2(1) / q2(2);
    a.row(2 * i) << -x1, -y1, -1, 0, 0, 0, x2 * x1, x2 * y1, x2;
    a.row(2 * i + 1) << 0, 0, 0, -x1, -y1, -1, y2 * x1, y2 * y1, y2;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  if (svd.singularValues()(7) / svd.singularValues()(0) < 1e-10 &&
      svd.singularValues()(0) > 0)
    throw std::runtime_error("estimate_homography: degenerate configuration");
  const Eigen::VectorXd hv = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  Eigen::Matrix3d h = t2.inverse() * hn * t1;
  if (std::abs(h(2, 2)) > 1e-12) h /= h(2, 2);
  return h;
}

// RANSAC wrapper around the DLT homography with symmetric transfer error.
inline Eigen::Matrix3d ransac_homography(const MatchSet& matches, int iterations,
                                         double inlier_thresh, std::uint64_t seed) {
  const int n = static_cast<int>(matches.pairs.size());
  if (n < 4) throw std::invalid_argument("ransac_homography: need at least 4 matches");

  auto transfer_error = [](const Eigen::Matrix3d& h, const MatchPair& p) {
    const Eigen::Vector3d f = h * Eigen::Vector3d(p.x1, p.y1, 1.0);
    const Eigen::Vector3d b = h.inverse() * Eigen::Vector3d(p.x2, p.y2, 1.0);
    if (std::abs(f(2)) < 1e-12 || std::abs(b(2)) < 1e-12)
      return std::numeric_limits<double>::infinity();
    return 0.5 * (std::hypot(f(0) / f(2) - p.x2, f(1) / f(2) - p.y2) +
                  std::hypot(b(0) / b(2) - p.x1, b(1) / b(2) - p.y1));
  };

  Eigen::Matrix3d best = Eigen::Matrix3d::Identity();
  int best_count = -1;
  for (int it = 0; it < iterations; ++it) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(it));
    const std::vector<int> idx = detail::sample_distinct(rng, 4, n);
    Eigen::Matrix3d h;
    try {
      h = estimate_homography(detail::select_matches(matches, idx));
    } catch (const std::exception&) {
      continue;
    }
    int count = 0;
    for (const MatchPair& p : matches.pairs)
      if (transfer_error(h, p) <= inlier_thresh) ++count;
    if (count > best_count) {
      best_count = count;
      best = h;
    }
  }
  if (best_count < 0)
    throw std::runtime_error("ransac_homography: every minimal sample was degenerate");

  std::vector<int> inlier_idx;
  for (int i = 0; i < n; ++i)
    if (transfer_error(best, matches.pairs[i]) <= inlier_thresh) inlier_idx.push_back(i);
  if (static_cast<int>(inlier_idx.size()) >= 4) {
    try {
      best = estimate_homography(detail::select_matches(matches, inlier_idx));
    } catch (const std::exception&) {
    }
  }
  return best;
}

}  // namespace defmatch
