#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "defmatch/encoder.hpp"
#include "defmatch/image_ops.hpp"
#include "defmatch/keypoint.hpp"
#include "defmatch/ops.hpp"

namespace defmatch {

// Dense per-patch descriptors D with a matchability map M over the same grid.
// One descriptor covers a k x k pixel patch of the input image.
struct DescriptorField {
  Tensor d;  // [H/k x W/k x C]
  Tensor m;  // [H/k x W/k]
  int k = 4;
};

struct DescriptorNetConfig {
  std::array<int, 5> widths{16, 16, 32, 32, 32};
  int channels = 32;  // encoder and descriptor width, divisible by 4 and by heads
  int patch = 4;
  int enc_layers = 4;
  int heads = 8;
  int points = 8;
};

// Backbone pyramid at 1/4 .. 1/64 (two residual blocks per level, strided
// downsampling convs), 1x1-projected into the encoder width, refined by the
// deformable encoder and fused back to the 1/4 grid.
struct DescriptorNetParams {
  DescriptorNetConfig cfg;
  Tensor stem1_w, stem1_b;  // 3x3 stride-2, 3 -> widths[0]
  Tensor stem2_w, stem2_b;  // 3x3 stride-2, widths[0] -> widths[0]
  std::array<ResBlockParams, 5> res_a, res_b;
  std::array<Tensor, 4> down_w, down_b;  // 3x3 stride-2, widths[i] -> widths[i+1]
  std::array<Tensor, 5> proj_w, proj_b;  // pointwise [channels x widths[i]]
  std::vector<EncoderLayerParams> enc;
  Tensor level_scale;       // [5]
  Tensor mhead1_w, mhead1_b;  // pointwise [channels/2 x channels]
  Tensor mhead2_w, mhead2_b;  // pointwise [1 x channels/2]

  static DescriptorNetParams init(const DescriptorNetConfig& cfg, std::uint64_t seed) {
    if (cfg.patch != 4)
      throw std::invalid_argument("DescriptorNetParams: pyramid is built for patch 4");
    if (cfg.channels % 4 != 0 || cfg.channels % cfg.heads != 0 || cfg.channels < 2)
      throw std::invalid_argument(
          "DescriptorNetParams: channels must divide by 4 and by heads");
    DescriptorNetParams p;
    p.cfg = cfg;
    p.stem1_w = detail::conv_uniform(3, 3, cfg.widths[0], seed * 211 + 1);
    p.stem1_b = Tensor::zeros({cfg.widths[0]});
    p.stem2_w = detail::conv_uniform(3, cfg.widths[0], cfg.widths[0], seed * 211 + 2);
    p.stem2_b = Tensor::zeros({cfg.widths[0]});
    for (int i = 0; i < 5; ++i) {
      p.res_a[i] = detail::res_uniform(3, cfg.widths[i], seed * 211 + 10 + i);
      p.res_b[i] = detail::res_uniform(3, cfg.widths[i], seed * 211 + 20 + i);
      const double ps = 1.0 / std::sqrt(static_cast<double>(cfg.widths[i]));
      p.proj_w[i] =
          Tensor::uniform({cfg.channels, cfg.widths[i]}, -ps, ps, seed * 211 + 30 + i);
      p.proj_b[i] = Tensor::zeros({cfg.channels});
    }
    for (int i = 0; i < 4; ++i) {
      p.down_w[i] = detail::conv_uniform(3, cfg.widths[i], cfg.widths[i + 1],
                                         seed * 211 + 40 + i);
      p.down_b[i] = Tensor::zeros({cfg.widths[i + 1]});
    }
    for (int l = 0; l < cfg.enc_layers; ++l)
      p.enc.push_back(EncoderLayerParams::init(cfg.channels, cfg.heads, cfg.points, 5,
                                               seed * 211 + 50 + l));
    p.level_scale = Tensor::zeros({5});
    const double hs = 1.0 / std::sqrt(static_cast<double>(cfg.channels));
    p.mhead1_w =
        Tensor::uniform({cfg.channels / 2, cfg.channels}, -hs, hs, seed * 211 + 60);
    p.mhead1_b = Tensor::zeros({cfg.channels / 2});
    p.mhead2_w = Tensor::uniform({1, cfg.channels / 2}, -hs, hs, seed * 211 + 61);
    p.mhead2_b = Tensor::zeros({1});
    for (Tensor* t : p.parameters()) t->set_requires_grad(true);
    return p;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out = {&stem1_w, &stem1_b, &stem2_w, &stem2_b};
    auto res = [&out](ResBlockParams& r) {
      out.insert(out.end(), {&r.w1, &r.b1, &r.w2, &r.b2});
    };
    for (int i = 0; i < 5; ++i) {
      res(res_a[i]);
      res(res_b[i]);
      out.push_back(&proj_w[i]);
      out.push_back(&proj_b[i]);
    }
    for (int i = 0; i < 4; ++i) {
      out.push_back(&down_w[i]);
      out.push_back(&down_b[i]);
    }
    for (EncoderLayerParams& l : enc)
      for (Tensor* t : l.parameters()) out.push_back(t);
    out.push_back(&level_scale);
    out.insert(out.end(), {&mhead1_w, &mhead1_b, &mhead2_w, &mhead2_b});
    return out;
  }
};

inline DescriptorField describe(const Tensor& image, const DescriptorNetParams& p) {
  if (image.rank() != 3 || image.extent(2) != 3)
    throw std::invalid_argument("describe: image must be [H x W x 3]");
  const int h = image.extent(0), w = image.extent(1);
  if (h % 64 != 0 || w % 64 != 0)
    throw std::invalid_argument(
        "describe: extents must be divisible by 64; pad the image first");

  auto down = [](const Tensor& x, const Tensor& kw, const Tensor& kb) {
    return relu(add_channel_bias(conv2d(x, kw, 2, 1), kb));
  };
  Tensor x = down(down(image, p.stem1_w, p.stem1_b), p.stem2_w, p.stem2_b);

  std::vector<Tensor> levels;
  for (int i = 0; i < 5; ++i) {
    if (i > 0) x = down(x, p.down_w[i - 1], p.down_b[i - 1]);
    x = detail::res_block(detail::res_block(x, p.res_a[i]), p.res_b[i]);
    levels.push_back(pointwise_linear(x, p.proj_w[i], &p.proj_b[i]));
  }

  FeaturePyramid enc_out = encoder_forward(make_pyramid(levels), p.enc, p.level_scale);
  Tensor d = fuse_pyramid(enc_out, h / p.cfg.patch, w / p.cfg.patch);

  Tensor hid = relu(pointwise_linear(d, p.mhead1_w, &p.mhead1_b));
  Tensor m = sigmoid(pointwise_linear(hid, p.mhead2_w, &p.mhead2_b));

  DescriptorField out;
  out.d = d;
  out.m = reshape(m, {h / p.cfg.patch, w / p.cfg.patch});
  out.k = p.cfg.patch;
  return out;
}

// Per-keypoint descriptors, equal to bilinearly upsampling D to image
// resolution and indexing it, but sampled directly on the coarse grid. Rows
// come back L2-normalized.
inline Tensor sample_descriptors(const DescriptorField& field,
                                 const std::vector<Keypoint>& kps, int image_h,
                                 int image_w) {
  if (kps.empty()) throw std::invalid_argument("sample_descriptors: no keypoints");
  if (field.d.extent(0) * field.k != image_h || field.d.extent(1) * field.k != image_w)
    throw std::invalid_argument("sample_descriptors: field does not match image extents");
  std::vector<Vec2> pts;
  pts.reserve(kps.size());
  for (const Keypoint& kp : kps) {
    if (kp.x < 0.0 || kp.x >= image_w || kp.y < 0.0 || kp.y >= image_h)
      throw std::invalid_argument("sample_descriptors: keypoint outside the image");
    pts.push_back({(kp.x + 0.5) / field.k - 0.5, (kp.y + 0.5) / field.k - 0.5});
  }
  return l2_normalize_rows(bilinear_sample(field.d, pts));
}

}  // namespace defmatch
