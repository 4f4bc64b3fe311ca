#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "defmatch/grad_check.hpp"
#include "defmatch/keypoint.hpp"

using namespace defmatch;

namespace {

// Brute-force scan used as the oracle: for every pixel test every window
// neighbour directly.
std::vector<std::pair<int, int>> nms_oracle(const Tensor& s, int n, double thr) {
  const int h = s.extent(0), w = s.extent(1), r = (n - 1) / 2;
  std::vector<std::pair<int, int>> out;
  for (int i = r; i < h - r; ++i)
    for (int j = r; j < w - r; ++j) {
      if (s.at(i, j) < thr) continue;
      bool best = true;
      for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj)
          if ((di || dj) && s.at(i + di, j + dj) >= s.at(i, j)) best = false;
      if (best) out.emplace_back(i, j);
    }
  return out;
}

Tensor gray_image(int h, int w, double v) {
  return Tensor(Shape{h, w, 3}, v);
}

Tensor flip_h(const Tensor& t) {
  Tensor out(t.shape());
  const int h = t.extent(0), w = t.extent(1), c = t.rank() == 3 ? t.extent(2) : 1;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < c; ++k)
        out.data()[(static_cast<std::size_t>(i) * w + (w - 1 - j)) * c + k] =
            t.data()[(static_cast<std::size_t>(i) * w + j) * c + k];
  return out;
}

}  // namespace

TEST(ScoreMap, ConstantImageGivesFiniteScoresInUnitRange) {
  KeypointNetParams p = KeypointNetParams::init(4, 3, 3);
  Tensor s = score_map(gray_image(64, 64, 0.5), p);
  ASSERT_EQ(s.shape(), (Shape{64, 64}));
  for (double v : s.data()) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
}

TEST(ScoreMap, RejectsExtentsNotDivisibleBy32) {
  KeypointNetParams p = KeypointNetParams::init(4, 3, 3);
  try {
    score_map(gray_image(60, 64, 0.1), p);
    FAIL() << "expected extent error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(ScoreMap, PointwiseWeightsCommuteWithHorizontalFlip) {
  KeypointNetParams p = KeypointNetParams::init(4, 1, 7);
  Tensor img = Tensor::uniform({64, 64, 3}, 0.0, 1.0, 99);
  Tensor a = flip_h(score_map(img, p));
  Tensor b = score_map(flip_h(img), p);
  double worst = 0.0;
  for (int i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  EXPECT_LE(worst, 1e-12);
}

TEST(Nms, SingleImpulse) {
  Tensor s = Tensor::zeros({16, 16});
  s.at(5, 5) = 0.8;
  auto kps = nms_local_max(s, 5, 0.1);
  ASSERT_EQ(kps.size(), 1u);
  EXPECT_EQ(kps[0].x, 5.0);
  EXPECT_EQ(kps[0].y, 5.0);
  EXPECT_EQ(kps[0].score, 0.8);
}

TEST(Nms, ConstantMapHasNoStrictMaxima) {
  EXPECT_TRUE(nms_local_max(Tensor(Shape{12, 12}, 0.7), 5, 0.1).empty());
}

TEST(Nms, BorderPixelsExcluded) {
  Tensor s = Tensor::zeros({16, 16});
  s.at(0, 0) = 0.9;
  s.at(1, 14) = 0.9;
  EXPECT_TRUE(nms_local_max(s, 5, 0.1).empty());
  EXPECT_EQ(nms_local_max(s, 3, 0.1).size(), 1u);  // (1,14) has margin 1
}

TEST(Nms, MatchesBruteForceScan) {
  Tensor s = Tensor::uniform({32, 32}, 0.0, 1.0, 1234);
  auto got = nms_local_max(s, 5, 0.2);
  auto want = nms_oracle(s, 5, 0.2);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(static_cast<int>(got[i].y), want[i].first);
    EXPECT_EQ(static_cast<int>(got[i].x), want[i].second);
  }
  // Strict maxima over n x n windows can never share a window.
  const int r = 2;
  for (std::size_t a = 0; a < got.size(); ++a)
    for (std::size_t b = a + 1; b < got.size(); ++b) {
      const double d = std::max(std::abs(got[a].x - got[b].x),
                                std::abs(got[a].y - got[b].y));
      EXPECT_GE(d, r + 1);
    }
}

TEST(Nms, ContractViolationsThrow) {
  Tensor s = Tensor::zeros({8, 8});
  EXPECT_THROW(nms_local_max(s, 4, 0.1), std::invalid_argument);
  EXPECT_THROW(nms_local_max(s, 5, 1.5), std::invalid_argument);
  EXPECT_THROW(nms_local_max(s, 5, -0.1), std::invalid_argument);
}

TEST(Dkd, SymmetricWindowHasZeroOffset) {
  Tensor s = Tensor::zeros({11, 11});
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j)
      s.at(i, j) = std::exp(-0.3 * ((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)));
  Keypoint kp = dkd_refine(s, {5.0, 5.0, s.at(5, 5)}, 5, 0.1);
  EXPECT_NEAR(kp.x, 5.0, 1e-12);
  EXPECT_NEAR(kp.y, 5.0, 1e-12);
}

TEST(Dkd, SmallTemperatureApproachesArgmax) {
  Tensor s = Tensor::uniform({9, 9}, 0.0, 0.5, 5);
  s.at(3, 3) = 0.95;  // top-left corner of the 3x3 window centred at (4,4)
  Keypoint kp = dkd_refine(s, {4.0, 4.0, s.at(4, 4)}, 3, 1e-3);
  EXPECT_NEAR(kp.x, 3.0, 1e-9);
  EXPECT_NEAR(kp.y, 3.0, 1e-9);
}

TEST(Dkd, MatchesDirectSummation) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor s = Tensor::uniform({12, 12}, 0.0, 1.0, trial * 3 + 1);
    const int cy = 3 + static_cast<int>(rng() % 6), cx = 3 + static_cast<int>(rng() % 6);
    const int n = 5, r = 2;
    const double t = 0.1;
    // Direct evaluation: stabilized exponential weights over the window.
    double mx = -1.0;
    for (int i = -r; i <= r; ++i)
      for (int j = -r; j <= r; ++j) mx = std::max(mx, s.at(cy + i, cx + j));
    double den = 0.0, ox = 0.0, oy = 0.0;
    for (int i = -r; i <= r; ++i)
      for (int j = -r; j <= r; ++j) den += std::exp((s.at(cy + i, cx + j) - mx) / t);
    for (int i = -r; i <= r; ++i)
      for (int j = -r; j <= r; ++j) {
        const double w = std::exp((s.at(cy + i, cx + j) - mx) / t) / den;
        ox += w * j;
        oy += w * i;
      }
    Keypoint kp = dkd_refine(s, {static_cast<double>(cx), static_cast<double>(cy), 0.5},
                             n, t);
    EXPECT_NEAR(kp.x, cx + ox, 1e-12);
    EXPECT_NEAR(kp.y, cy + oy, 1e-12);
    EXPECT_LE(std::abs(kp.x - cx), r);
    EXPECT_LE(std::abs(kp.y - cy), r);
  }
}

TEST(Dkd, WindowOverrunningBorderThrows) {
  Tensor s = Tensor::zeros({8, 8});
  EXPECT_THROW(dkd_refine(s, {1.0, 4.0, 0.5}, 5, 0.1), std::invalid_argument);
}

TEST(Dkd, GradientMatchesFiniteDifferences) {
  Tensor probe = Tensor::uniform({5, 5}, 0.1, 0.9, 8);
  Tensor w = Tensor::from_data({2}, {0.7, -1.3});
  auto f = [&](const Tensor& t) { return dot(reshape(dkd_offset(t, 0.1), {2}), w); };
  EXPECT_LE(grad_check(f, probe), 1e-4);
}

TEST(Topk, ReturnsAllWhenFewerThanK) {
  std::vector<Keypoint> kps = {{1, 1, 0.5}, {2, 2, 0.9}, {3, 3, 0.1}};
  auto got = topk_keypoints(kps, 5);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[0].score, 0.9);
  EXPECT_EQ(got[2].score, 0.1);
}

TEST(Topk, TiesBreakLexicographically) {
  std::vector<Keypoint> kps = {{4, 2, 0.5}, {1, 2, 0.5}, {3, 1, 0.5}, {0, 0, 0.4}};
  auto got = topk_keypoints(kps, 3);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[0].y, 1.0);
  EXPECT_EQ(got[1].x, 1.0);
  EXPECT_EQ(got[1].y, 2.0);
  EXPECT_EQ(got[2].x, 4.0);
}

TEST(Topk, MatchesFullSortOracle) {
  std::mt19937_64 rng(31);
  std::vector<Keypoint> kps;
  for (int i = 0; i < 1000; ++i) {
    // Coarse score grid forces plenty of ties.
    const double sc = static_cast<double>(rng() % 16) / 16.0;
    kps.push_back({static_cast<double>(rng() % 64), static_cast<double>(rng() % 64), sc});
  }
  auto oracle = kps;
  std::sort(oracle.begin(), oracle.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  oracle.resize(500);
  auto got = topk_keypoints(kps, 500);
  ASSERT_EQ(got.size(), 500u);
  for (int i = 0; i < 500; ++i) {
    EXPECT_EQ(got[i].x, oracle[i].x);
    EXPECT_EQ(got[i].y, oracle[i].y);
    EXPECT_EQ(got[i].score, oracle[i].score);
  }
}

TEST(Detect, EndToEndInvariantsHold) {
  KeypointNetParams p = KeypointNetParams::init(4, 3, 11);
  Tensor img = Tensor::uniform({64, 64, 3}, 0.0, 1.0, 12);
  Tensor s = score_map(img, p);
  DetectConfig cfg;
  cfg.threshold = 0.0;
  cfg.max_keypoints = 50;
  auto kps = detect_keypoints(s, cfg);
  ASSERT_LE(kps.size(), 50u);
  ASSERT_FALSE(kps.empty());
  for (const Keypoint& kp : kps) {
    EXPECT_GE(kp.x, 0.0);
    EXPECT_LT(kp.x, 64.0);
    EXPECT_GE(kp.y, 0.0);
    EXPECT_LT(kp.y, 64.0);
    EXPECT_GE(kp.score, 0.0);
    EXPECT_LE(kp.score, 1.0);
  }
  for (std::size_t i = 1; i < kps.size(); ++i) EXPECT_GE(kps[i - 1].score, kps[i].score);
}
