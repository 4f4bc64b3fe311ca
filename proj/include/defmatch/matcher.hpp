#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "defmatch/descriptor.hpp"
#include "defmatch/keypoint.hpp"
#include "defmatch/ops.hpp"
#include "defmatch/tensor.hpp"

namespace defmatch {

enum class MatchKind { sparse, coarse, refined };

struct MatchPair {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  double conf = 0.0;
};

struct MatchSet {
  MatchKind kind = MatchKind::sparse;
  std::vector<MatchPair> pairs;
  bool degraded = false;        // semi-dense fell back to sparse output
  int dropped_by_filter = 0;    // refinement drops (offset too large or bad line)
};

struct IndexMatch {
  int i = 0, j = 0;
  double conf = 0.0;
};

// S(i,j) = <d1_i, d2_j> / tau. Rows are expected unit-norm; stays on the tape.
inline Tensor score_matrix(const Tensor& d1, const Tensor& d2, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("score_matrix: tau must be positive");
  if (d1.rank() != 2 || d2.rank() != 2 || d1.extent(1) != d2.extent(1))
    throw std::invalid_argument("score_matrix: descriptor widths disagree");
  return scale(matmul(d1, transpose2(d2)), 1.0 / tau);
}

// Elementwise product of row-wise and column-wise softmax.
inline Tensor dual_softmax(const Tensor& s) {
  return mul(softmax_rows(s), softmax_cols(s));
}

// Mutual nearest neighbours of P with confidence strictly above the threshold.
// Argmax ties resolve to the smaller index on both axes.
inline std::vector<IndexMatch> mnn_filter(const Tensor& p, double threshold) {
  if (p.rank() != 2) throw std::invalid_argument("mnn_filter: rank-2 matrix expected");
  if (!(threshold >= 0.0 && threshold < 1.0))
    throw std::invalid_argument("mnn_filter: threshold must be in [0,1)");
  const int n1 = p.extent(0), n2 = p.extent(1);
  std::vector<int> row_best(n1, 0), col_best(n2, 0);
  for (int i = 0; i < n1; ++i)
    for (int j = 1; j < n2; ++j)
      if (p.at(i, j) > p.at(i, row_best[i])) row_best[i] = j;
  for (int j = 0; j < n2; ++j)
    for (int i = 1; i < n1; ++i)
      if (p.at(i, j) > p.at(col_best[j], j)) col_best[j] = i;
  std::vector<IndexMatch> out;
  for (int i = 0; i < n1; ++i) {
    const int j = row_best[i];
    if (col_best[j] == i && p.at(i, j) > threshold) out.push_back({i, j, p.at(i, j)});
  }
  return out;
}

inline MatchSet make_match_set(const std::vector<IndexMatch>& idx,
                               const std::vector<Keypoint>& kps1,
                               const std::vector<Keypoint>& kps2, MatchKind kind) {
  MatchSet out;
  out.kind = kind;
  for (const IndexMatch& m : idx) {
    const Keypoint& a = kps1.at(m.i);
    const Keypoint& b = kps2.at(m.j);
    out.pairs.push_back({a.x, a.y, b.x, b.y, m.conf});
  }
  return out;
}

// K most matchable patch centres in image pixels. Centre of patch (i,j) is
// ((j+0.5)k, (i+0.5)k); the matchability value rides along as the score.
inline std::vector<Keypoint> topk_coarse(const Tensor& m, int k_best, int patch) {
  if (m.rank() != 2) throw std::invalid_argument("topk_coarse: rank-2 map expected");
  if (k_best < 1) throw std::invalid_argument("topk_coarse: need K >= 1");
  if (patch < 1) throw std::invalid_argument("topk_coarse: patch must be positive");
  std::vector<Keypoint> all;
  all.reserve(static_cast<std::size_t>(m.extent(0)) * m.extent(1));
  for (int i = 0; i < m.extent(0); ++i)
    for (int j = 0; j < m.extent(1); ++j)
      all.push_back({(j + 0.5) * patch, (i + 0.5) * patch, m.at(i, j)});
  return topk_keypoints(std::move(all), k_best);
}

// Rank-2, unit-Frobenius fundamental matrix. Any input matrix is projected on
// construction, so estimates differing by a nonzero scale collapse to the same
// representative (the largest-magnitude entry is made positive).
struct FundamentalMatrix {
  Eigen::Matrix3d f = Eigen::Matrix3d::Zero();

  FundamentalMatrix() = default;
  explicit FundamentalMatrix(const Eigen::Matrix3d& raw) {
    if (!raw.allFinite())
      throw std::invalid_argument("FundamentalMatrix: non-finite entries");
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(raw,
                                          Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Vector3d s = svd.singularValues();
    if (s(0) <= 0.0) throw std::invalid_argument("FundamentalMatrix: zero matrix");
    s(2) = 0.0;
    f = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
    f /= f.norm();
    double biggest = 0.0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        if (std::abs(f(r, c)) > std::abs(biggest)) biggest = f(r, c);
    if (biggest < 0.0) f = -f;
  }
};

// Epipolar line of each point of image 1 in image 2: L = F * (x, y, 1).
inline std::vector<std::array<double, 3>> epipolar_lines(const FundamentalMatrix& fm,
                                                         const std::vector<Vec2>& pts) {
  std::vector<std::array<double, 3>> out;
  out.reserve(pts.size());
  for (const Vec2& p : pts) {
    const Eigen::Vector3d l = fm.f * Eigen::Vector3d(p.x, p.y, 1.0);
    out.push_back({l(0), l(1), l(2)});
  }
  return out;
}

// Mean of the two point-to-line distances (p2 to F p1, p1 to F^T p2), in px.
inline double symmetric_epipolar_distance(const FundamentalMatrix& fm, const Vec2& p1,
                                          const Vec2& p2) {
  const Eigen::Vector3d h1(p1.x, p1.y, 1.0), h2(p2.x, p2.y, 1.0);
  const Eigen::Vector3d l2 = fm.f * h1, l1 = fm.f.transpose() * h2;
  const double n2 = std::hypot(l2(0), l2(1)), n1 = std::hypot(l1(0), l1(1));
  if (n2 == 0.0 || n1 == 0.0) return std::numeric_limits<double>::infinity();
  return 0.5 * (std::abs(h2.dot(l2)) / n2 + std::abs(h1.dot(l1)) / n1);
}

// Normalized eight-point estimate. Throws on fewer than eight pairs or on a
// configuration whose stacked constraint matrix is rank-deficient.
inline FundamentalMatrix estimate_fundamental(const MatchSet& matches) {
  const int n = static_cast<int>(matches.pairs.size());
  if (n < 8) throw std::invalid_argument("estimate_fundamental: need at least 8 matches");

  auto normalizer = [n](auto&& get) {
    double cx = 0.0, cy = 0.0;
    for (int i = 0; i < n; ++i) {
      auto [x, y] = get(i);
      cx += x;
      cy += y;
    }
    cx /= n;
    cy /= n;
    double md = 0.0;
    for (int i = 0; i < n; ++i) {
      auto [x, y] = get(i);
      md += std::hypot(x - cx, y - cy);
    }
    md /= n;
    const double s = md > 0.0 ? std::sqrt(2.0) / md : 1.0;
    Eigen::Matrix3d t;
    t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
    return t;
  };
  const Eigen::Matrix3d t1 = normalizer([&](int i) {
    return std::pair<double, double>(matches.pairs[i].x1, matches.pairs[i].y1);
  });
  const Eigen::Matrix3d t2 = normalizer([&](int i) {
    return std::pair<double, double>(matches.pairs[i].x2, matches.pairs[i].y2);
  });

  Eigen::MatrixXd a(n, 9);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d p1 =
        t1 * Eigen::Vector3d(matches.pairs[i].x1, matches.pairs[i].y1, 1.0);
    const Eigen::Vector3d p2 =
        t2 * Eigen::Vector3d(matches.pairs[i].x2, matches.pairs[i].y2, 1.0);
    a.row(i) << p2(0) * p1(0), p2(0) * p1(1), p2(0), p2(1) * p1(0), p2(1) * p1(1),
        p2(1), p1(0), p1(1), 1.0;
  }
  // Full V: the minimal case is 8x9 and thin V would omit the null direction.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(7) / sv(0) < 1e-10)
    throw std::runtime_error("estimate_fundamental: degenerate point configuration");
  const Eigen::VectorXd fv = svd.matrixV().col(8);
  Eigen::Matrix3d fn;
  fn << fv(0), fv(1), fv(2), fv(3), fv(4), fv(5), fv(6), fv(7), fv(8);
  return FundamentalMatrix(t2.transpose() * fn * t1);
}

// Snap each coarse match in image 2 onto the epipolar line of its image-1
// point. The line normal is unit-normalized first, which makes the projection
// exact and scale-free; eps only guards against a vanishing normal. Pairs whose
// correction exceeds the patch size in Chebyshev norm are dropped and counted.
inline MatchSet refine_semi_dense(const MatchSet& coarse, const FundamentalMatrix& fm,
                                  int patch, double eps = 1e-9) {
  if (patch < 1) throw std::invalid_argument("refine_semi_dense: patch must be positive");
  if (eps <= 0.0) throw std::invalid_argument("refine_semi_dense: eps must be positive");
  MatchSet out;
  out.kind = MatchKind::refined;
  for (const MatchPair& m : coarse.pairs) {
    const Eigen::Vector3d l = fm.f * Eigen::Vector3d(m.x1, m.y1, 1.0);
    const double n2 = l(0) * l(0) + l(1) * l(1);
    if (n2 < eps) {
      ++out.dropped_by_filter;
      continue;
    }
    const double inv = 1.0 / std::sqrt(n2);
    const double a = l(0) * inv, b = l(1) * inv, c = l(2) * inv;
    const double d = a * m.x2 + b * m.y2 + c;
    const double dx = -a * d, dy = -b * d;
    if (std::max(std::abs(dx), std::abs(dy)) > patch) {
      ++out.dropped_by_filter;
      continue;
    }
    out.pairs.push_back({m.x1, m.y1, m.x2 + dx, m.y2 + dy, m.conf});
  }
  return out;
}

struct PipelineWeights {
  KeypointNetParams kp;
  DescriptorNetParams desc;
};

struct MatcherConfig {
  int top_k = 500;            // sparse keypoints per image
  int coarse_top_k = 500;     // matchable patches per image
  double tau = 0.1;
  double mnn_threshold = 0.01;
  int nms_window = 5;
  double nms_threshold = 0.2;
  double t_det = 0.1;
  double eps = 1e-9;
};

using FundamentalEstimator = std::function<FundamentalMatrix(const MatchSet&)>;

namespace detail {

struct ImageFeatures {
  std::vector<Keypoint> kps;
  Tensor desc;  // [N x C], unit rows; undefined when kps is empty
  DescriptorField field;
};

inline ImageFeatures extract_features(const Tensor& image, const PipelineWeights& w,
                                      const MatcherConfig& cfg) {
  ImageFeatures out;
  Tensor s = score_map(image, w.kp);
  DetectConfig dc{cfg.nms_window, cfg.nms_threshold, cfg.t_det, cfg.top_k};
  out.kps = detect_keypoints(s, dc);
  out.field = describe(image, w.desc);
  if (!out.kps.empty())
    out.desc = sample_descriptors(out.field, out.kps, image.extent(0), image.extent(1));
  return out;
}

// Descriptor rows for coarse patch centres, read straight off the coarse grid.
inline Tensor coarse_descriptors(const DescriptorField& field,
                                 const std::vector<Keypoint>& centres) {
  const int c = field.d.extent(2);
  Tensor rows(Shape{static_cast<int>(centres.size()), c});
  for (std::size_t r = 0; r < centres.size(); ++r) {
    const int i = static_cast<int>(centres[r].y / field.k);
    const int j = static_cast<int>(centres[r].x / field.k);
    for (int ch = 0; ch < c; ++ch) rows.at(static_cast<int>(r), ch) = field.d.at(i, j, ch);
  }
  return l2_normalize_rows(rows);
}

}  // namespace detail

inline MatchSet match_sparse(const Tensor& img1, const Tensor& img2,
                             const PipelineWeights& w, const MatcherConfig& cfg) {
  detail::ImageFeatures f1 = detail::extract_features(img1, w, cfg);
  detail::ImageFeatures f2 = detail::extract_features(img2, w, cfg);
  if (f1.kps.empty() || f2.kps.empty()) return MatchSet{MatchKind::sparse, {}, false, 0};
  Tensor p = dual_softmax(score_matrix(f1.desc, f2.desc, cfg.tau));
  return make_match_set(mnn_filter(p, cfg.mnn_threshold), f1.kps, f2.kps,
                        MatchKind::sparse);
}

// Full semi-dense pipeline. The fundamental matrix comes from the sparse stage
// through `estimator` (plain eight-point by default); fewer than eight sparse
// matches flips the degraded flag and returns the sparse set unchanged.
inline MatchSet match_semi_dense(const Tensor& img1, const Tensor& img2,
                                 const PipelineWeights& w, const MatcherConfig& cfg,
                                 const FundamentalEstimator& estimator = {}) {
  detail::ImageFeatures f1 = detail::extract_features(img1, w, cfg);
  detail::ImageFeatures f2 = detail::extract_features(img2, w, cfg);
  MatchSet sparse{MatchKind::sparse, {}, false, 0};
  if (!f1.kps.empty() && !f2.kps.empty()) {
    Tensor p = dual_softmax(score_matrix(f1.desc, f2.desc, cfg.tau));
    sparse = make_match_set(mnn_filter(p, cfg.mnn_threshold), f1.kps, f2.kps,
                            MatchKind::sparse);
  }
  if (static_cast<int>(sparse.pairs.size()) < 8) {
    sparse.degraded = true;
    return sparse;
  }
  const FundamentalMatrix fm = estimator ? estimator(sparse) : estimate_fundamental(sparse);

  std::vector<Keypoint> c1 = topk_coarse(f1.field.m, cfg.coarse_top_k, f1.field.k);
  std::vector<Keypoint> c2 = topk_coarse(f2.field.m, cfg.coarse_top_k, f2.field.k);
  Tensor pc = dual_softmax(score_matrix(detail::coarse_descriptors(f1.field, c1),
                                        detail::coarse_descriptors(f2.field, c2),
                                        cfg.tau));
  MatchSet coarse = make_match_set(mnn_filter(pc, cfg.mnn_threshold), c1, c2,
                                   MatchKind::coarse);
  return refine_semi_dense(coarse, fm, f1.field.k, cfg.eps);
}

}  // namespace defmatch
