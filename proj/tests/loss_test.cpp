#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "defmatch/grad_check.hpp"
#include "defmatch/losses.hpp"

namespace dm = defmatch;

namespace {

dm::Tensor row_points(const std::vector<std::pair<double, double>>& pts) {
  dm::Tensor t(dm::Shape{static_cast<int>(pts.size()), 2});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t.at(static_cast<int>(i), 0) = pts[i].first;
    t.at(static_cast<int>(i), 1) = pts[i].second;
  }
  return t;
}

const dm::PointWarp kIdentityWarp = [](double x, double y, double* wx, double* wy) {
  *wx = x;
  *wy = y;
  return true;
};

}  // namespace

TEST(Focal, HandValuesAndOptimum) {
  dm::Tensor perfect(dm::Shape{4}, 1.0);
  EXPECT_NEAR(dm::focal_matching_loss(perfect, 0.25, 2.0).value(), 0.0, 1e-15);

  dm::Tensor half(dm::Shape{3}, 0.5);
  EXPECT_NEAR(dm::focal_matching_loss(half, 0.25, 2.0).value(),
              0.25 * 0.25 * std::log(2.0), 1e-12);

  bool clamped = false;
  dm::Tensor with_zero(dm::Shape{2});
  with_zero.at(0) = 0.0;
  with_zero.at(1) = 0.5;
  const double v = dm::focal_matching_loss(with_zero, 0.25, 2.0, &clamped).value();
  EXPECT_TRUE(clamped);
  EXPECT_TRUE(std::isfinite(v));

  dm::focal_matching_loss(half, 0.25, 2.0, &clamped);
  EXPECT_FALSE(clamped);

  EXPECT_THROW(dm::focal_matching_loss(half, 0.0, 2.0), std::invalid_argument);
  EXPECT_THROW(dm::focal_matching_loss(half, 0.25, -1.0), std::invalid_argument);
  EXPECT_THROW(dm::focal_matching_loss(dm::Tensor(dm::Shape{0}), 0.25, 2.0),
               std::invalid_argument);
}

TEST(Focal, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const dm::Tensor p = dm::Tensor::uniform(dm::Shape{12}, 0.05, 0.95, rng);
  const double err = dm::grad_check(
      [](const dm::Tensor& x) { return dm::focal_matching_loss(x, 0.25, 2.0); }, p);
  EXPECT_LE(err, 1e-5);
}

TEST(Match, HandValuesAndOptimum) {
  dm::Tensor gt(dm::Shape{2, 2}, 1.0);
  dm::Tensor half(dm::Shape{2, 2}, 0.5);
  EXPECT_NEAR(dm::matchability_loss(half, gt, 0.25, 2.0).value(),
              0.25 * 0.25 * std::log(2.0), 1e-12);

  // Exact labels after clamping give a vanishing focal-weighted BCE.
  dm::Tensor mixed_gt(dm::Shape{4});
  for (int i = 0; i < 4; ++i) mixed_gt.at(i) = i % 2;
  EXPECT_LE(dm::matchability_loss(mixed_gt, mixed_gt, 0.25, 2.0).value(), 1e-10);

  dm::Tensor bad_gt(dm::Shape{4}, 0.3);
  EXPECT_THROW(dm::matchability_loss(mixed_gt, bad_gt, 0.25, 2.0), std::invalid_argument);
  EXPECT_THROW(dm::matchability_loss(half, dm::Tensor(dm::Shape{3}, 1.0), 0.25, 2.0),
               std::invalid_argument);
}

TEST(Match, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const dm::Tensor m = dm::Tensor::uniform(dm::Shape{3, 5}, 0.1, 0.9, rng);
  dm::Tensor gt(dm::Shape{3, 5});
  for (int i = 0; i < gt.size(); ++i) gt.at(i) = dm::uniform01(rng) < 0.5 ? 0.0 : 1.0;
  const double err = dm::grad_check(
      [&](const dm::Tensor& x) { return dm::matchability_loss(x, gt, 0.25, 2.0); }, m);
  EXPECT_LE(err, 1e-5);
}

TEST(WarpOp, AffineJacobianMatchesAnalytic) {
  const dm::PointWarp affine = [](double x, double y, double* wx, double* wy) {
    *wx = 1.1 * x + 0.2 * y + 3.0;
    *wy = -0.1 * x + 0.9 * y - 1.0;
    return true;
  };
  dm::Tensor pts = row_points({{2.0, 5.0}, {-1.0, 0.5}});
  pts.set_requires_grad(true);

  dm::GradTape tape;
  const dm::Tensor w = dm::apply_warp(pts, affine, nullptr);
  EXPECT_NEAR(w.at(0, 0), 1.1 * 2 + 0.2 * 5 + 3, 1e-12);
  EXPECT_NEAR(w.at(0, 1), -0.1 * 2 + 0.9 * 5 - 1, 1e-12);

  // d(sum of wx components)/d(x,y) = (1.1, 0.2) per point.
  dm::Tensor col(dm::Shape{2, 1}, 0.0);
  col.at(0, 0) = 1.0;
  const dm::Tensor s = dm::sum(dm::matmul(w, col));
  tape.backward(s);
  const std::vector<double> g = pts.grad();
  EXPECT_NEAR(g[0], 1.1, 1e-6);
  EXPECT_NEAR(g[1], 0.2, 1e-6);
  EXPECT_NEAR(g[2], 1.1, 1e-6);
  EXPECT_NEAR(g[3], 0.2, 1e-6);
}

TEST(WarpOp, InvalidPointsAreFlaggedAndGradFree) {
  const dm::PointWarp partial = [](double x, double, double* wx, double* wy) {
    if (x > 10.0) return false;
    *wx = 2.0 * x;
    *wy = 1.0;
    return true;
  };
  dm::Tensor pts = row_points({{3.0, 1.0}, {50.0, 1.0}});
  pts.set_requires_grad(true);
  std::vector<unsigned char> valid;

  dm::GradTape tape;
  const dm::Tensor w = dm::apply_warp(pts, partial, &valid);
  EXPECT_TRUE(valid[0]);
  EXPECT_FALSE(valid[1]);
  EXPECT_EQ(w.at(1, 0), 0.0);
  tape.backward(dm::sum(w));
  const std::vector<double> g = pts.grad();
  EXPECT_NEAR(g[0], 2.0, 1e-6);
  EXPECT_EQ(g[2], 0.0);

  EXPECT_THROW(dm::apply_warp(dm::Tensor(dm::Shape{3}), partial, nullptr),
               std::invalid_argument);
}

TEST(Reproj, IdentityWarpIdenticalSetsGiveZero) {
  const dm::Tensor kps = row_points({{5, 5}, {20, 11}, {40, 33}});
  bool empty = true;
  const double v =
      dm::reprojection_loss(kps, kps, kIdentityWarp, kIdentityWarp, 5.0, &empty).value();
  EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_FALSE(empty);
}

TEST(Reproj, SinglePairOffsetGivesTheOffset) {
  const dm::Tensor k1 = row_points({{10, 10}});
  const dm::Tensor k2 = row_points({{13, 10}});
  const double v = dm::reprojection_loss(k1, k2, kIdentityWarp, kIdentityWarp).value();
  EXPECT_NEAR(v, 3.0, 1e-12);
}

TEST(Reproj, EmptyWhenNothingWithinRadius) {
  const dm::Tensor k1 = row_points({{0, 0}});
  const dm::Tensor k2 = row_points({{50, 50}});
  bool empty = false;
  const double v =
      dm::reprojection_loss(k1, k2, kIdentityWarp, kIdentityWarp, 5.0, &empty).value();
  EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(empty);
  EXPECT_THROW(dm::reprojection_loss(k1, k2, kIdentityWarp, kIdentityWarp, 0.0),
               std::invalid_argument);
}

TEST(Reproj, MatchesBruteForceOracle) {
  const dm::PointWarp affine = [](double x, double y, double* wx, double* wy) {
    *wx = 1.05 * x - 0.1 * y + 2.0;
    *wy = 0.08 * x + 0.97 * y - 1.5;
    return true;
  };
  const dm::PointWarp affine_back = [](double x, double y, double* wx, double* wy) {
    // Inverse of the forward affine map.
    const double det = 1.05 * 0.97 - (-0.1) * 0.08;
    const double rx = x - 2.0, ry = y + 1.5;
    *wx = (0.97 * rx + 0.1 * ry) / det;
    *wy = (-0.08 * rx + 1.05 * ry) / det;
    return true;
  };

  std::mt19937_64 rng(31);
  std::vector<std::pair<double, double>> p1, p2;
  for (int i = 0; i < 25; ++i)
    p1.push_back({60.0 * dm::uniform01(rng), 60.0 * dm::uniform01(rng)});
  for (int i = 0; i < 20; ++i)
    p2.push_back({60.0 * dm::uniform01(rng), 60.0 * dm::uniform01(rng)});

  const double got = dm::reprojection_loss(row_points(p1), row_points(p2), affine,
                                           affine_back, 5.0)
                         .value();

  auto oracle_dir = [](const std::vector<std::pair<double, double>>& src,
                       const std::vector<std::pair<double, double>>& dst,
                       const dm::PointWarp& warp) {
    double total = 0.0;
    int count = 0;
    for (const auto& [x, y] : src) {
      double wx, wy;
      warp(x, y, &wx, &wy);
      double best = 5.0 + 1e-18;
      bool found = false;
      for (const auto& [dx, dy] : dst) {
        const double d = std::hypot(wx - dx, wy - dy);
        if (d <= best) {
          best = d;
          found = true;
        }
      }
      if (found) {
        total += best;
        ++count;
      }
    }
    return count ? total / count : 0.0;
  };
  const double want =
      0.5 * (oracle_dir(p1, p2, affine) + oracle_dir(p2, p1, affine_back));
  EXPECT_NEAR(got, want, 1e-9);
}

TEST(Reproj, GradientFlowsThroughPositions) {
  const dm::PointWarp affine = [](double x, double y, double* wx, double* wy) {
    *wx = 1.02 * x + 0.05 * y + 1.0;
    *wy = -0.03 * x + 0.98 * y + 0.5;
    return true;
  };
  // Well separated pairs so neighbour assignment is stable under perturbation.
  const dm::Tensor k1 = row_points({{10, 10}, {30, 12}, {18, 40}});
  const dm::Tensor k2 = row_points({{12.5, 11.2}, {32.1, 13.4}, {19.9, 41.0}});
  const double err = dm::grad_check(
      [&](const dm::Tensor& x) {
        return dm::reprojection_loss(x, k2, affine, affine, 5.0);
      },
      k1, 1e-5);
  EXPECT_LE(err, 1e-4);
}

TEST(Reliab, PerfectProbabilityGivesZero) {
  dm::ReliabilitySide side;
  side.s_src = dm::Tensor(dm::Shape{4}, 0.7);
  side.s_dst = dm::Tensor(dm::Shape{4}, 0.6);
  side.p = dm::Tensor(dm::Shape{4}, 1.0);
  bool empty = true;
  const double v = dm::reliability_loss(side, side, 1.0, &empty).value();
  EXPECT_NEAR(v, 0.0, 1e-15);
  EXPECT_FALSE(empty);
}

TEST(Reliab, EqualReliabilityIgnoresWeights) {
  std::mt19937_64 rng(8);
  dm::ReliabilitySide side;
  side.s_src = dm::Tensor::uniform(dm::Shape{6}, 0.1, 0.9, rng);
  side.s_dst = dm::Tensor::uniform(dm::Shape{6}, 0.1, 0.9, rng);
  side.p = dm::Tensor(dm::Shape{6}, 0.7);
  const double expected = 1.0 - std::exp((0.7 - 1.0) / 1.0);
  EXPECT_NEAR(dm::reliability_loss(side, side, 1.0).value(), expected, 1e-12);
}

TEST(Reliab, MatchesDirectEquationOracle) {
  std::mt19937_64 rng(9);
  auto random_side = [&](int m) {
    dm::ReliabilitySide s;
    s.s_src = dm::Tensor::uniform(dm::Shape{m}, 0.05, 0.95, rng);
    s.s_dst = dm::Tensor::uniform(dm::Shape{m}, 0.05, 0.95, rng);
    s.p = dm::Tensor::uniform(dm::Shape{m}, 0.05, 0.95, rng);
    return s;
  };
  const double t_rel = 0.8;
  const dm::ReliabilitySide a = random_side(7), b = random_side(5);

  auto oracle = [&](const dm::ReliabilitySide& s) {
    double wsum = 0.0, acc = 0.0;
    for (int i = 0; i < s.p.size(); ++i) wsum += s.s_src.at(i) * s.s_dst.at(i);
    for (int i = 0; i < s.p.size(); ++i) {
      const double r = std::exp((s.p.at(i) - 1.0) / t_rel);
      acc += (s.s_src.at(i) * s.s_dst.at(i) / wsum) * (1.0 - r);
    }
    return acc;
  };
  EXPECT_NEAR(dm::reliability_loss(a, b, t_rel).value(), 0.5 * (oracle(a) + oracle(b)),
              1e-12);
}

TEST(Reliab, EmptySidesFlagAndContribution) {
  dm::ReliabilitySide empty_side;
  bool empty = false;
  EXPECT_EQ(dm::reliability_loss(empty_side, empty_side, 1.0, &empty).value(), 0.0);
  EXPECT_TRUE(empty);

  std::mt19937_64 rng(10);
  dm::ReliabilitySide full;
  full.s_src = dm::Tensor(dm::Shape{3}, 0.5);
  full.s_dst = dm::Tensor(dm::Shape{3}, 0.5);
  full.p = dm::Tensor(dm::Shape{3}, 0.4);
  const double one_sided = dm::reliability_loss(full, empty_side, 1.0, &empty).value();
  EXPECT_FALSE(empty);
  EXPECT_NEAR(one_sided, 0.5 * (1.0 - std::exp(-0.6)), 1e-12);

  dm::ReliabilitySide bad = full;
  bad.p = dm::Tensor(dm::Shape{2}, 0.4);
  EXPECT_THROW(dm::reliability_loss(bad, full, 1.0), std::invalid_argument);
  EXPECT_THROW(dm::reliability_loss(full, full, 0.0), std::invalid_argument);
}

TEST(Reliab, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const dm::Tensor packed = dm::Tensor::uniform(dm::Shape{3, 4}, 0.1, 0.9, rng);
  const double err = dm::grad_check(
      [](const dm::Tensor& x) {
        dm::ReliabilitySide s;
        s.s_src = dm::slice_rows(x, 0, 1);
        s.s_dst = dm::slice_rows(x, 1, 2);
        s.p = dm::slice_rows(x, 2, 3);
        dm::ReliabilitySide none;
        return dm::reliability_loss(s, none, 0.9);
      },
      packed);
  EXPECT_LE(err, 1e-5);
}

TEST(Peaky, UniformWindowHandValue) {
  const dm::Tensor s(dm::Shape{9, 9}, 0.42);
  const std::vector<dm::Keypoint> kps = {{4.0, 4.0, 1.0}};
  const double v = dm::peaky_loss(s, kps, 3, 0.1).value();
  EXPECT_NEAR(v, (4.0 + 4.0 * std::sqrt(2.0)) / 81.0, 1e-12);
}

TEST(Peaky, OneHotWindowApproachesZero) {
  dm::Tensor s(dm::Shape{9, 9}, 0.0);
  s.at(4, 4) = 1.0;
  const std::vector<dm::Keypoint> kps = {{4.0, 4.0, 1.0}};
  const double sharp = dm::peaky_loss(s, kps, 3, 0.01).value();
  EXPECT_LE(sharp, 1e-6);
  const double soft = dm::peaky_loss(s, kps, 3, 1.0).value();
  EXPECT_GT(soft, sharp);
}

TEST(Peaky, BorderKeypointsSkippedWithCount) {
  const dm::Tensor s(dm::Shape{9, 9}, 0.3);
  const std::vector<dm::Keypoint> kps = {{0.0, 0.0, 1.0}, {4.0, 4.0, 1.0}, {8.0, 5.0, 1.0}};
  int skipped = -1;
  const double v = dm::peaky_loss(s, kps, 3, 0.1, 2.0, &skipped).value();
  EXPECT_EQ(skipped, 2);
  EXPECT_NEAR(v, (4.0 + 4.0 * std::sqrt(2.0)) / 81.0, 1e-12);

  int all_skipped = -1;
  const double zero =
      dm::peaky_loss(s, {{0.0, 0.0, 1.0}}, 5, 0.1, 2.0, &all_skipped).value();
  EXPECT_EQ(zero, 0.0);
  EXPECT_EQ(all_skipped, 1);

  EXPECT_THROW(dm::peaky_loss(s, kps, 4, 0.1), std::invalid_argument);
  EXPECT_THROW(dm::peaky_loss(s, kps, 3, 0.0), std::invalid_argument);
  EXPECT_THROW(dm::peaky_loss(s, kps, 3, 0.1, 0.5), std::invalid_argument);
}

TEST(Peaky, PNormOneMatchesManhattanOracle) {
  std::mt19937_64 rng(12);
  const dm::Tensor s = dm::Tensor::uniform(dm::Shape{9, 9}, 0.0, 1.0, rng);
  const std::vector<dm::Keypoint> kps = {{4.0, 4.0, 1.0}};
  const double got = dm::peaky_loss(s, kps, 3, 0.5, 1.0).value();

  // Direct evaluation on doubles.
  double mx = -1e300;
  double win[9];
  int k = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) win[k++] = s.at(4 + dy, 4 + dx);
  for (double v : win) mx = std::max(mx, v);
  double z = 0.0, sp[9];
  for (int i = 0; i < 9; ++i) z += std::exp((win[i] - mx) / 0.5);
  for (int i = 0; i < 9; ++i) sp[i] = std::exp((win[i] - mx) / 0.5) / z;
  double sx = 0.0, sy = 0.0;
  k = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      sx += sp[k] * dx;
      sy += sp[k] * dy;
      ++k;
    }
  double want = 0.0;
  k = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      want += (std::abs(dx - sx) + std::abs(dy - sy)) * sp[k];
      ++k;
    }
  want /= 9.0;
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(Peaky, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  const dm::Tensor s = dm::Tensor::uniform(dm::Shape{7, 7}, 0.1, 0.9, rng);
  const std::vector<dm::Keypoint> kps = {{3.0, 3.0, 1.0}, {2.0, 4.0, 1.0}};
  const double err = dm::grad_check(
      [&](const dm::Tensor& x) { return dm::peaky_loss(x, kps, 3, 0.5); }, s);
  EXPECT_LE(err, 1e-4);
}
