#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "defmatch/matcher.hpp"

using namespace defmatch;

namespace {

// Synthetic two-view correspondences with a known fundamental matrix, built
// with plain Eigen arithmetic so the module under test never touches it.
struct SynthPair {
  Eigen::Matrix3d f_gt;
  std::vector<Vec2> p1, p2;
};

SynthPair make_synth(int n, unsigned seed, bool pure_translation) {
  std::mt19937_64 rng(seed);
  auto u = [&] { return uniform01(rng); };
  Eigen::Matrix3d k;
  k << 500, 0, 320, 0, 500, 240, 0, 0, 1;
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  if (!pure_translation) {
    Eigen::Vector3d axis(u() - 0.5, u() - 0.5, u() - 0.5);
    axis.normalize();
    r = Eigen::AngleAxisd(0.25 * (u() - 0.5), axis).toRotationMatrix();
  }
  Eigen::Vector3d t(u() - 0.5, u() - 0.5, 0.2 * (u() - 0.5));
  t = 0.5 * t.normalized();
  Eigen::Matrix3d tx;
  tx << 0, -t(2), t(1), t(2), 0, -t(0), -t(1), t(0), 0;
  SynthPair out;
  out.f_gt = k.transpose().inverse() * (tx * r) * k.inverse();
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d x(4.0 * u() - 2.0, 3.0 * u() - 1.5, 4.0 + 4.0 * u());
    Eigen::Vector3d h1 = k * x;
    Eigen::Vector3d h2 = k * (r * x + t);
    out.p1.push_back({h1(0) / h1(2), h1(1) / h1(2)});
    out.p2.push_back({h2(0) / h2(2), h2(1) / h2(2)});
  }
  return out;
}

MatchSet to_match_set(const SynthPair& sp) {
  MatchSet m;
  for (std::size_t i = 0; i < sp.p1.size(); ++i)
    m.pairs.push_back({sp.p1[i].x, sp.p1[i].y, sp.p2[i].x, sp.p2[i].y, 1.0});
  return m;
}

}  // namespace

TEST(ScoreMatrix, HandValuesAndErrors) {
  Tensor one = Tensor::from_data({1, 2}, {1.0, 0.0});
  Tensor s = score_matrix(one, one, 1.0);
  ASSERT_EQ(s.shape(), (Shape{1, 1}));
  EXPECT_NEAR(s.at(0, 0), 1.0, 1e-15);
  Tensor ortho = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor z = score_matrix(Tensor::from_data({1, 2}, {1.0, 0.0}),
                          Tensor::from_data({1, 2}, {0.0, 1.0}), 0.5);
  EXPECT_NEAR(z.at(0, 0), 0.0, 1e-15);
  EXPECT_THROW(score_matrix(one, one, 0.0), std::invalid_argument);
  EXPECT_THROW(score_matrix(one, Tensor::zeros({1, 3}), 1.0), std::invalid_argument);
}

TEST(ScoreMatrix, MatchesLoopOracle) {
  Tensor d1 = l2_normalize_rows(Tensor::uniform({5, 4}, -1.0, 1.0, 3));
  Tensor d2 = l2_normalize_rows(Tensor::uniform({7, 4}, -1.0, 1.0, 4));
  Tensor s = score_matrix(d1, d2, 0.1);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) {
      double want = 0.0;
      for (int c = 0; c < 4; ++c) want += d1.at(i, c) * d2.at(j, c);
      EXPECT_NEAR(s.at(i, j), want / 0.1, 1e-12);
    }
}

TEST(DualSoftmax, HandValues) {
  Tensor tiny = dual_softmax(Tensor::from_data({1, 1}, {3.7}));
  EXPECT_NEAR(tiny.at(0, 0), 1.0, 1e-15);
  Tensor dom = dual_softmax(Tensor::from_data({2, 2}, {10.0, 0.0, 0.0, 10.0}));
  EXPECT_GE(dom.at(0, 0), 0.99);
  EXPECT_GE(dom.at(1, 1), 0.99);
}

TEST(DualSoftmax, MatchesDirectEvaluation) {
  Tensor s = Tensor::uniform({4, 4}, -3.0, 3.0, 9);
  Tensor p = dual_softmax(s);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double rden = 0.0, cden = 0.0;
      for (int t = 0; t < 4; ++t) rden += std::exp(s.at(i, t) - 100.0);
      for (int t = 0; t < 4; ++t) cden += std::exp(s.at(t, j) - 100.0);
      const double want = (std::exp(s.at(i, j) - 100.0) / rden) *
                          (std::exp(s.at(i, j) - 100.0) / cden);
      EXPECT_NEAR(p.at(i, j), want, 1e-12);
      EXPECT_GE(p.at(i, j), 0.0);
      EXPECT_LE(p.at(i, j), 1.0);
    }
}

TEST(Mnn, DiagonalAndThresholdCases) {
  Tensor p = Tensor::from_data({2, 2}, {0.9, 0.0, 0.0, 0.8});
  auto m = mnn_filter(p, 0.01);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].i, 0);
  EXPECT_EQ(m[0].j, 0);
  EXPECT_EQ(m[1].i, 1);
  EXPECT_EQ(m[1].j, 1);
  Tensor flat(Shape{5, 4}, 1.0 / 20.0);
  EXPECT_TRUE(mnn_filter(flat, 0.06).empty());
  EXPECT_THROW(mnn_filter(p, 1.0), std::invalid_argument);
  EXPECT_THROW(mnn_filter(p, -0.1), std::invalid_argument);
}

TEST(Mnn, MatchesBruteForceScan) {
  Tensor p = Tensor::uniform({20, 20}, 0.0, 1.0, 17);
  auto got = mnn_filter(p, 0.3);
  std::vector<IndexMatch> want;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j) {
      bool rbest = true, cbest = true;
      for (int t = 0; t < 20; ++t) {
        if (p.at(i, t) > p.at(i, j) || (p.at(i, t) == p.at(i, j) && t < j)) rbest = false;
        if (p.at(t, j) > p.at(i, j) || (p.at(t, j) == p.at(i, j) && t < i)) cbest = false;
      }
      if (rbest && cbest && p.at(i, j) > 0.3) want.push_back({i, j, p.at(i, j)});
    }
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].i, want[i].i);
    EXPECT_EQ(got[i].j, want[i].j);
    EXPECT_EQ(got[i].conf, want[i].conf);
  }
  // Each index appears once per side.
  std::vector<int> seen1(20, 0), seen2(20, 0);
  for (const auto& m : got) {
    EXPECT_EQ(seen1[m.i]++, 0);
    EXPECT_EQ(seen2[m.j]++, 0);
  }
}

TEST(Mnn, TransposeSymmetry) {
  Tensor p = Tensor::uniform({6, 9}, 0.0, 1.0, 23);
  Tensor pt = transpose2(p);
  auto a = mnn_filter(p, 0.1);
  auto b = mnn_filter(pt, 0.1);
  ASSERT_EQ(a.size(), b.size());
  auto key = [](const IndexMatch& m) { return std::pair<int, int>(m.i, m.j); };
  std::vector<std::pair<int, int>> sa, sb;
  for (const auto& m : a) sa.push_back(key(m));
  for (const auto& m : b) sb.emplace_back(m.j, m.i);
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  EXPECT_EQ(sa, sb);
}

TEST(TopkCoarse, PatchCentresAndOrdering) {
  Tensor m = Tensor(Shape{4, 4}, 0.1);
  m.at(2, 3) = 0.9;
  auto top = topk_coarse(m, 1, 4);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0].x, (3 + 0.5) * 4);
  EXPECT_EQ(top[0].y, (2 + 0.5) * 4);
  auto all = topk_coarse(m, 100, 4);
  EXPECT_EQ(all.size(), 16u);
  EXPECT_THROW(topk_coarse(m, 0, 4), std::invalid_argument);
}

TEST(TopkCoarse, MatchesSortOracle) {
  Tensor m = Tensor::uniform({16, 16}, 0.0, 1.0, 29);
  auto got = topk_coarse(m, 50, 4);
  std::vector<Keypoint> all;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) all.push_back({(j + 0.5) * 4, (i + 0.5) * 4, m.at(i, j)});
  std::sort(all.begin(), all.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  ASSERT_EQ(got.size(), 50u);
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(got[i].x, all[i].x);
    EXPECT_EQ(got[i].y, all[i].y);
  }
}

TEST(Fundamental, ConstructionNormalizes) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Matrix3d raw;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) raw(r, c) = 2.0 * uniform01(rng) - 1.0;
    FundamentalMatrix f(raw);
    EXPECT_LE(std::abs(f.f.determinant()), 1e-8);
    EXPECT_NEAR(f.f.norm(), 1.0, 1e-9);
    FundamentalMatrix g(-3.7 * raw);
    EXPECT_LE((f.f - g.f).norm(), 1e-9);
  }
  EXPECT_THROW(FundamentalMatrix(Eigen::Matrix3d::Zero()), std::invalid_argument);
}

TEST(Fundamental, EightPointRecoversGroundTruth) {
  SynthPair sp = make_synth(20, 101, false);
  FundamentalMatrix est = estimate_fundamental(to_match_set(sp));
  FundamentalMatrix gt(sp.f_gt);
  EXPECT_LE((est.f - gt.f).norm(), 1e-6);
  double worst = 0.0;
  for (std::size_t i = 0; i < sp.p1.size(); ++i)
    worst = std::max(worst, symmetric_epipolar_distance(est, sp.p1[i], sp.p2[i]));
  EXPECT_LE(worst, 1e-6);
}

TEST(Fundamental, PureTranslationGivesAntisymmetricF) {
  SynthPair sp = make_synth(24, 202, true);
  FundamentalMatrix est = estimate_fundamental(to_match_set(sp));
  EXPECT_LE((est.f + est.f.transpose()).norm(), 1e-6);
}

TEST(Fundamental, TooFewOrDegenerateThrows) {
  SynthPair sp = make_synth(7, 303, false);
  EXPECT_THROW(estimate_fundamental(to_match_set(sp)), std::invalid_argument);
  MatchSet collinear;
  for (int i = 0; i < 12; ++i)
    collinear.pairs.push_back(
        {10.0 + 3.0 * i, 20.0 + 2.0 * i, 40.0 + 1.5 * i, 60.0 + 2.5 * i, 1.0});
  EXPECT_THROW(estimate_fundamental(collinear), std::runtime_error);
}

TEST(EpipolarLines, MatrixActionOracle) {
  SynthPair sp = make_synth(5, 404, false);
  FundamentalMatrix f(sp.f_gt);
  auto lines = epipolar_lines(f, {{0.0, 0.0}});
  EXPECT_NEAR(lines[0][0], f.f(0, 2), 1e-15);
  EXPECT_NEAR(lines[0][1], f.f(1, 2), 1e-15);
  EXPECT_NEAR(lines[0][2], f.f(2, 2), 1e-15);
  auto more = epipolar_lines(f, sp.p1);
  for (std::size_t i = 0; i < sp.p1.size(); ++i) {
    const Eigen::Vector3d want = f.f * Eigen::Vector3d(sp.p1[i].x, sp.p1[i].y, 1.0);
    EXPECT_NEAR(more[i][0], want(0), 1e-12);
    EXPECT_NEAR(more[i][1], want(1), 1e-12);
    EXPECT_NEAR(more[i][2], want(2), 1e-12);
  }
}

TEST(Refine, HorizontalLineHandExample) {
  Eigen::Matrix3d raw = Eigen::Matrix3d::Zero();
  raw(1, 2) = 1.0;
  raw(2, 2) = -2.0;  // point (0,0) maps to the line y = 2
  FundamentalMatrix f(raw);
  MatchSet coarse;
  coarse.kind = MatchKind::coarse;
  coarse.pairs.push_back({0.0, 0.0, 3.0, 5.0, 0.7});
  MatchSet kept = refine_semi_dense(coarse, f, 4);
  ASSERT_EQ(kept.pairs.size(), 1u);
  EXPECT_NEAR(kept.pairs[0].x2, 3.0, 1e-12);
  EXPECT_NEAR(kept.pairs[0].y2, 2.0, 1e-12);
  EXPECT_EQ(kept.dropped_by_filter, 0);
  MatchSet dropped = refine_semi_dense(coarse, f, 2);
  EXPECT_TRUE(dropped.pairs.empty());
  EXPECT_EQ(dropped.dropped_by_filter, 1);
}

TEST(Refine, PointAlreadyOnLineIsFixed) {
  Eigen::Matrix3d raw = Eigen::Matrix3d::Zero();
  raw(1, 2) = 1.0;
  raw(2, 2) = -2.0;
  FundamentalMatrix f(raw);
  MatchSet coarse;
  coarse.pairs.push_back({0.0, 0.0, 7.25, 2.0, 0.4});
  MatchSet kept = refine_semi_dense(coarse, f, 4);
  ASSERT_EQ(kept.pairs.size(), 1u);
  EXPECT_NEAR(kept.pairs[0].x2, 7.25, 1e-12);
  EXPECT_NEAR(kept.pairs[0].y2, 2.0, 1e-12);
}

TEST(Refine, ProjectionOracleScaleAndFilterInvariants) {
  SynthPair sp = make_synth(30, 505, false);
  MatchSet coarse;
  std::mt19937_64 rng(506);
  for (std::size_t i = 0; i < sp.p1.size(); ++i) {
    // Perturb image-2 points so refinement has work to do.
    coarse.pairs.push_back({sp.p1[i].x, sp.p1[i].y, sp.p2[i].x + 6.0 * (uniform01(rng) - 0.5),
                            sp.p2[i].y + 6.0 * (uniform01(rng) - 0.5), 0.5});
  }
  FundamentalMatrix f(sp.f_gt);
  MatchSet refined = refine_semi_dense(coarse, f, 4);
  EXPECT_EQ(static_cast<int>(coarse.pairs.size()),
            static_cast<int>(refined.pairs.size()) + refined.dropped_by_filter);
  for (const MatchPair& m : refined.pairs) {
    const Eigen::Vector3d l = f.f * Eigen::Vector3d(m.x1, m.y1, 1.0);
    const double resid = std::abs(l(0) * m.x2 + l(1) * m.y2 + l(2)) /
                         std::hypot(l(0), l(1));
    EXPECT_LE(resid, 1e-6);
  }
  // Independent projection oracle per pair, plus the Chebyshev drop rule.
  std::size_t kept_i = 0;
  for (const MatchPair& m : coarse.pairs) {
    const Eigen::Vector3d l = f.f * Eigen::Vector3d(m.x1, m.y1, 1.0);
    const double nn = l(0) * l(0) + l(1) * l(1);
    const double d = (l(0) * m.x2 + l(1) * m.y2 + l(2)) / nn;
    const double px = m.x2 - l(0) * d, py = m.y2 - l(1) * d;
    const double cheb = std::max(std::abs(px - m.x2), std::abs(py - m.y2));
    if (cheb > 4.0) continue;
    ASSERT_LT(kept_i, refined.pairs.size());
    EXPECT_NEAR(refined.pairs[kept_i].x2, px, 1e-9);
    EXPECT_NEAR(refined.pairs[kept_i].y2, py, 1e-9);
    ++kept_i;
  }
  EXPECT_EQ(kept_i, refined.pairs.size());
  // Scale invariance is baked in by construction-time normalization.
  FundamentalMatrix g(Eigen::Matrix3d(12.5 * sp.f_gt));
  MatchSet refined2 = refine_semi_dense(coarse, g, 4);
  ASSERT_EQ(refined2.pairs.size(), refined.pairs.size());
  for (std::size_t i = 0; i < refined.pairs.size(); ++i) {
    EXPECT_NEAR(refined2.pairs[i].x2, refined.pairs[i].x2, 1e-9);
    EXPECT_NEAR(refined2.pairs[i].y2, refined.pairs[i].y2, 1e-9);
  }
}

TEST(Refine, DegenerateLineIsDroppedAndCounted) {
  Eigen::Matrix3d raw = Eigen::Matrix3d::Zero();
  raw(2, 2) = 1.0;  // every line comes out (0, 0, 1)
  FundamentalMatrix f(raw);
  MatchSet coarse;
  coarse.pairs.push_back({1.0, 1.0, 2.0, 2.0, 0.9});
  MatchSet out = refine_semi_dense(coarse, f, 4);
  EXPECT_TRUE(out.pairs.empty());
  EXPECT_EQ(out.dropped_by_filter, 1);
}

namespace {

PipelineWeights toy_weights(std::uint64_t seed) {
  DescriptorNetConfig cfg;
  cfg.widths = {4, 4, 4, 4, 4};
  cfg.channels = 4;
  cfg.enc_layers = 1;
  cfg.heads = 2;
  cfg.points = 2;
  return {KeypointNetParams::init(4, 3, seed), DescriptorNetParams::init(cfg, seed + 1)};
}

}  // namespace

TEST(MatchSparse, IdenticalImagesSelfMatch) {
  PipelineWeights w = toy_weights(8);
  Tensor img = Tensor::uniform({64, 64, 3}, 0.0, 1.0, 88);
  MatcherConfig cfg;
  cfg.top_k = 64;
  cfg.nms_threshold = 0.0;
  MatchSet m = match_sparse(img, img, w, cfg);
  ASSERT_FALSE(m.pairs.empty());
  for (const MatchPair& p : m.pairs) {
    EXPECT_LE(std::abs(p.x1 - p.x2), 0.5);
    EXPECT_LE(std::abs(p.y1 - p.y2), 0.5);
    EXPECT_GE(p.conf, 0.0);
    EXPECT_LE(p.conf, 1.0);
  }
}

TEST(MatchSemiDense, DegradedFallbackEqualsSparse) {
  PipelineWeights w = toy_weights(9);
  Tensor flat(Shape{64, 64, 3}, 0.5);  // constant image: no strict maxima anywhere
  MatcherConfig cfg;
  MatchSet sparse = match_sparse(flat, flat, w, cfg);
  MatchSet semi = match_semi_dense(flat, flat, w, cfg);
  EXPECT_TRUE(semi.degraded);
  EXPECT_EQ(semi.kind, MatchKind::sparse);
  EXPECT_EQ(semi.pairs.size(), sparse.pairs.size());
}

TEST(MatchSemiDense, RunsOnNoisePair) {
  PipelineWeights w = toy_weights(10);
  Tensor img1 = Tensor::uniform({64, 64, 3}, 0.0, 1.0, 91);
  Tensor img2 = Tensor::uniform({64, 64, 3}, 0.0, 1.0, 92);
  MatcherConfig cfg;
  cfg.top_k = 48;
  cfg.coarse_top_k = 48;
  cfg.nms_threshold = 0.0;
  MatchSet m = match_semi_dense(img1, img2, w, cfg);
  EXPECT_GE(m.dropped_by_filter, 0);
  for (const MatchPair& p : m.pairs) {
    EXPECT_GE(p.conf, 0.0);
    EXPECT_LE(p.conf, 1.0);
  }
}
