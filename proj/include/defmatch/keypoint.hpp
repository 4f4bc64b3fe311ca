#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "defmatch/image_ops.hpp"
#include "defmatch/ops.hpp"
#include "defmatch/tensor.hpp"

namespace defmatch {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
};

struct ResBlockParams {
  Tensor w1, b1, w2, b2;
};

namespace detail {

inline Tensor conv_same(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_channel_bias(conv2d(x, w, 1, w.extent(0) / 2), b);
}

inline Tensor res_block(const Tensor& x, const ResBlockParams& p) {
  return relu(add(x, conv_same(relu(conv_same(x, p.w1, p.b1)), p.w2, p.b2)));
}

inline Tensor conv_uniform(int k, int cin, int cout, std::uint64_t seed) {
  const double s = 1.0 / std::sqrt(static_cast<double>(k) * k * cin);
  Tensor t = Tensor::uniform({k, k, cin, cout}, -s, s, seed);
  t.set_requires_grad(true);
  return t;
}

inline ResBlockParams res_uniform(int k, int c, std::uint64_t seed) {
  ResBlockParams p;
  p.w1 = conv_uniform(k, c, c, seed * 2 + 0);
  p.b1 = Tensor::zeros({c});
  p.w2 = conv_uniform(k, c, c, seed * 2 + 1);
  p.b2 = Tensor::zeros({c});
  p.b1.set_requires_grad(true);
  p.b2.set_requires_grad(true);
  return p;
}

}  // namespace detail

// Score branch: features at scales 1/1, 1/2, 1/8 and 1/32 (each `width` wide),
// upsampled back to full resolution, concatenated and pushed through a
// pointwise head with a terminal sigmoid. kernel=1 makes the whole network
// pointwise apart from pooling/upsampling, which is exactly flip-equivariant.
struct KeypointNetParams {
  int width = 32;
  int kernel = 3;
  Tensor stem_w, stem_b;
  ResBlockParams stem_res;
  std::array<Tensor, 3> proj_w, proj_b;
  std::array<ResBlockParams, 3> res;
  Tensor head1_w, head1_b;  // 1x1, 4*width -> 2*width
  Tensor head2_w, head2_b;  // 1x1, 2*width -> 1

  static KeypointNetParams init(int width, int kernel, std::uint64_t seed) {
    if (width <= 0 || kernel <= 0 || kernel % 2 == 0)
      throw std::invalid_argument("KeypointNetParams: width > 0 and odd kernel required");
    KeypointNetParams p;
    p.width = width;
    p.kernel = kernel;
    p.stem_w = detail::conv_uniform(kernel, 3, width, seed * 101 + 1);
    p.stem_b = Tensor::zeros({width});
    p.stem_b.set_requires_grad(true);
    p.stem_res = detail::res_uniform(kernel, width, seed * 101 + 2);
    for (int i = 0; i < 3; ++i) {
      p.proj_w[i] = detail::conv_uniform(kernel, width, width, seed * 101 + 3 + i);
      p.proj_b[i] = Tensor::zeros({width});
      p.proj_b[i].set_requires_grad(true);
      p.res[i] = detail::res_uniform(kernel, width, seed * 101 + 6 + i);
    }
    p.head1_w = detail::conv_uniform(1, 4 * width, 2 * width, seed * 101 + 9);
    p.head1_b = Tensor::zeros({2 * width});
    p.head2_w = detail::conv_uniform(1, 2 * width, 1, seed * 101 + 10);
    p.head2_b = Tensor::zeros({1});
    p.head1_b.set_requires_grad(true);
    p.head2_b.set_requires_grad(true);
    return p;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out = {&stem_w, &stem_b, &stem_res.w1, &stem_res.b1,
                                &stem_res.w2, &stem_res.b2};
    for (int i = 0; i < 3; ++i) {
      out.push_back(&proj_w[i]);
      out.push_back(&proj_b[i]);
      out.push_back(&res[i].w1);
      out.push_back(&res[i].b1);
      out.push_back(&res[i].w2);
      out.push_back(&res[i].b2);
    }
    out.insert(out.end(), {&head1_w, &head1_b, &head2_w, &head2_b});
    return out;
  }
};

// Score map over the full image, values in (0,1). Extents must be divisible by
// 32 so the pooling chain stays exact.
inline Tensor score_map(const Tensor& image, const KeypointNetParams& p) {
  if (image.rank() != 3 || image.extent(2) != 3)
    throw std::invalid_argument("score_map: image must be [H x W x 3]");
  const int h = image.extent(0), w = image.extent(1);
  if (h % 32 != 0 || w % 32 != 0)
    throw std::invalid_argument(
        "score_map: extents must be divisible by 32; pad the image first");

  using detail::conv_same;
  using detail::res_block;
  Tensor f1 = res_block(relu(conv_same(image, p.stem_w, p.stem_b)), p.stem_res);
  Tensor x2 = avg_pool2(f1);
  Tensor f2 = res_block(relu(conv_same(x2, p.proj_w[0], p.proj_b[0])), p.res[0]);
  Tensor x8 = avg_pool2(avg_pool2(f2));
  Tensor f8 = res_block(relu(conv_same(x8, p.proj_w[1], p.proj_b[1])), p.res[1]);
  Tensor x32 = avg_pool2(avg_pool2(f8));
  Tensor f32 = res_block(relu(conv_same(x32, p.proj_w[2], p.proj_b[2])), p.res[2]);

  Tensor cat = concat_channels({f1, upsample_bilinear(f2, h, w),
                                upsample_bilinear(f8, h, w),
                                upsample_bilinear(f32, h, w)});
  Tensor hid = relu(conv_same(cat, p.head1_w, p.head1_b));
  Tensor s = sigmoid(conv_same(hid, p.head2_w, p.head2_b));
  return reshape(s, {h, w});
}

// Strict local maxima of S over odd n x n windows with score >= threshold.
// Pixels closer than (n-1)/2 to the border are never reported, which also
// guarantees the refinement window below fits.
inline std::vector<Keypoint> nms_local_max(const Tensor& s, int n, double threshold) {
  if (s.rank() != 2) throw std::invalid_argument("nms_local_max: rank-2 map expected");
  if (n <= 0 || n % 2 == 0) throw std::invalid_argument("nms_local_max: window must be odd");
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw std::invalid_argument("nms_local_max: threshold must be in [0,1]");
  const int h = s.extent(0), w = s.extent(1), r = (n - 1) / 2;
  std::vector<Keypoint> out;
  for (int i = r; i < h - r; ++i)
    for (int j = r; j < w - r; ++j) {
      const double v = s.at(i, j);
      if (v < threshold) continue;
      bool strict = true;
      for (int di = -r; di <= r && strict; ++di)
        for (int dj = -r; dj <= r; ++dj) {
          if (di == 0 && dj == 0) continue;
          if (s.at(i + di, j + dj) >= v) {
            strict = false;
            break;
          }
        }
      if (strict) out.push_back({static_cast<double>(j), static_cast<double>(i), v});
    }
  return out;
}

// Soft-argmax offset of an odd n x n score window, in (dx, dy) order. The
// window is renormalized with a temperature-t softmax, so the result stays in
// [-(n-1)/2, (n-1)/2] per axis and is differentiable in the window.
inline Tensor dkd_offset(const Tensor& window, double t_det) {
  if (window.rank() != 2 || window.extent(0) != window.extent(1) ||
      window.extent(0) % 2 == 0)
    throw std::invalid_argument("dkd_offset: odd square window expected");
  const int n = window.extent(0), r = (n - 1) / 2;
  Tensor sm = softmax(reshape(window, {n * n}), t_det);
  std::vector<double> dx(static_cast<std::size_t>(n) * n), dy(dx.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      dx[static_cast<std::size_t>(i) * n + j] = j - r;
      dy[static_cast<std::size_t>(i) * n + j] = i - r;
    }
  Tensor ox = dot(sm, Tensor::from_data({n * n}, dx));
  Tensor oy = dot(sm, Tensor::from_data({n * n}, dy));
  return stack_rows({ox, oy});  // [2 x 1]
}

// Sub-pixel refinement of one NMS pixel. Throws if the window overruns the map.
inline Keypoint dkd_refine(const Tensor& s, const Keypoint& p_nms, int n, double t_det) {
  const int cy = static_cast<int>(std::lround(p_nms.y));
  const int cx = static_cast<int>(std::lround(p_nms.x));
  Tensor win = gather_window(s, cy, cx, n);
  Tensor off = dkd_offset(win.detached(), t_det);
  return {p_nms.x + off.at(0, 0), p_nms.y + off.at(1, 0), p_nms.score};
}

// K best keypoints by score; ties fall back to (y, x) lexicographic order.
inline std::vector<Keypoint> topk_keypoints(std::vector<Keypoint> kps, int k) {
  if (k < 0) throw std::invalid_argument("topk_keypoints: negative k");
  auto less = [](const Keypoint& a, const Keypoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  };
  std::sort(kps.begin(), kps.end(), less);
  if (static_cast<int>(kps.size()) > k) kps.resize(k);
  return kps;
}

struct DetectConfig {
  int nms_window = 5;
  double threshold = 0.2;
  double t_det = 0.1;
  int max_keypoints = 500;
};

inline std::vector<Keypoint> detect_keypoints(const Tensor& s, const DetectConfig& cfg) {
  std::vector<Keypoint> kps = nms_local_max(s, cfg.nms_window, cfg.threshold);
  for (Keypoint& kp : kps) kp = dkd_refine(s, kp, cfg.nms_window, cfg.t_det);
  return topk_keypoints(std::move(kps), cfg.max_keypoints);
}

}  // namespace defmatch
