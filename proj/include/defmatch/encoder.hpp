#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "defmatch/deform_attn.hpp"
#include "defmatch/image_ops.hpp"
#include "defmatch/ops.hpp"
#include "defmatch/tensor.hpp"

namespace defmatch {

// One encoder layer: deformable attention with a residual connection, then a
// two-layer pointwise feed-forward block, also residual. No normalization layers.
struct EncoderLayerParams {
  DeformAttnParams attn;
  Tensor ffn_w1;  // [2c x c]
  Tensor ffn_b1;  // [2c]
  Tensor ffn_w2;  // [c x 2c]
  Tensor ffn_b2;  // [c]

  void validate() const {
    attn.validate();
    const int c = attn.channels;
    if (!ffn_w1.defined() || ffn_w1.shape() != Shape{2 * c, c} ||
        ffn_b1.shape() != Shape{2 * c} || ffn_w2.shape() != Shape{c, 2 * c} ||
        ffn_b2.shape() != Shape{c})
      throw std::invalid_argument("EncoderLayerParams: bad feed-forward shapes");
  }

  static EncoderLayerParams init(int channels, int heads, int points, int levels,
                                 std::uint64_t seed) {
    EncoderLayerParams p;
    p.attn = DeformAttnParams::init(channels, heads, points, levels, seed);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(channels));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(2 * channels));
    p.ffn_w1 = Tensor::uniform({2 * channels, channels}, -s1, s1, seed * 4 + 2);
    p.ffn_b1 = Tensor::zeros({2 * channels});
    p.ffn_w2 = Tensor::uniform({channels, 2 * channels}, -s2, s2, seed * 4 + 3);
    p.ffn_b2 = Tensor::zeros({channels});
    p.ffn_w1.set_requires_grad(true);
    p.ffn_b1.set_requires_grad(true);
    p.ffn_w2.set_requires_grad(true);
    p.ffn_b2.set_requires_grad(true);
    p.validate();
    return p;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out = attn.parameters();
    out.push_back(&ffn_w1);
    out.push_back(&ffn_b1);
    out.push_back(&ffn_w2);
    out.push_back(&ffn_b2);
    return out;
  }
};

// Runs the layer stack over every pixel of every level jointly. Queries are
// feature + positional embedding (+ an optional learned per-level scalar,
// level_scale [L]); values are projected from the features alone. Throws if a
// layer produces non-finite values, naming the layer.
inline FeaturePyramid encoder_forward(const FeaturePyramid& in,
                                      const std::vector<EncoderLayerParams>& layers,
                                      const Tensor& level_scale = {}) {
  const int nlev = static_cast<int>(in.levels.size());
  if (nlev == 0) throw std::invalid_argument("encoder_forward: empty pyramid");
  if (in.pos.size() != in.levels.size())
    throw std::invalid_argument("encoder_forward: pyramid missing positional embeddings");
  const int c = in.channels();
  for (const EncoderLayerParams& l : layers) {
    l.validate();
    if (l.attn.channels != c || l.attn.levels != nlev)
      throw std::invalid_argument("encoder_forward: layer does not match pyramid");
    if (l.attn.heads != layers[0].attn.heads || l.attn.points != layers[0].attn.points)
      throw std::invalid_argument("encoder_forward: layers disagree on heads or points");
  }
  if (level_scale.defined() &&
      (level_scale.rank() != 1 || level_scale.extent(0) != nlev))
    throw std::invalid_argument("encoder_forward: level_scale must be [levels]");

  std::vector<Tensor> feats = in.levels;
  if (layers.empty()) return in;

  // Reference points and the query-row layout depend only on the geometry, so
  // build them once for the whole stack.
  int nq = 0;
  for (const Tensor& f : feats) nq += f.extent(0) * f.extent(1);
  const int m = layers[0].attn.heads, k = layers[0].attn.points;
  const int mlk = m * nlev * k;
  Tensor refs(Shape{nq, mlk * 2});
  {
    int q = 0;
    for (int l = 0; l < nlev; ++l) {
      const int h = feats[l].extent(0), w = feats[l].extent(1);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j, ++q) {
          const double u = (j + 0.5) / w, v = (i + 0.5) / h;
          for (int mi = 0; mi < m; ++mi)
            for (int tl = 0; tl < nlev; ++tl) {
              const double px = u * feats[tl].extent(1) - 0.5;
              const double py = v * feats[tl].extent(0) - 0.5;
              for (int ki = 0; ki < k; ++ki) {
                const std::size_t s = ((static_cast<std::size_t>(mi) * nlev + tl) * k + ki);
                refs.data()[static_cast<std::size_t>(q) * mlk * 2 + s * 2 + 0] = px;
                refs.data()[static_cast<std::size_t>(q) * mlk * 2 + s * 2 + 1] = py;
              }
            }
        }
    }
  }

  for (std::size_t li = 0; li < layers.size(); ++li) {
    const EncoderLayerParams& lp = layers[li];

    std::vector<Tensor> query_parts, flat_parts;
    query_parts.reserve(nlev);
    flat_parts.reserve(nlev);
    for (int l = 0; l < nlev; ++l) {
      const int n = feats[l].extent(0) * feats[l].extent(1);
      Tensor q = add(feats[l], in.pos[l]);
      if (level_scale.defined())
        q = bcast_add(q, reshape(slice_rows(reshape(level_scale, {nlev, 1}), l, l + 1), {1}));
      query_parts.push_back(reshape(q, {n, c}));
      flat_parts.push_back(reshape(feats[l], {n, c}));
    }
    Tensor queries = concat_rows(query_parts);
    Tensor x_flat = concat_rows(flat_parts);

    Tensor offsets = linear_rows(queries, lp.attn.offset_w, &lp.attn.offset_b);
    Tensor logits = linear_rows(queries, lp.attn.attn_w, &lp.attn.attn_b);
    Tensor attn = reshape(softmax_rows(reshape(logits, {nq * m, nlev * k})), {nq, mlk});
    Tensor locations = add(refs, offsets);

    std::vector<Tensor> values;
    values.reserve(nlev);
    for (const Tensor& f : feats) values.push_back(pointwise_linear(f, lp.attn.value_w));

    Tensor pooled = ms_deform_attn_core(values, locations, attn, m);
    Tensor x1 = add(x_flat, linear_rows(pooled, lp.attn.out_w));
    Tensor hidden = relu(linear_rows(x1, lp.ffn_w1, &lp.ffn_b1));
    Tensor x2 = add(x1, linear_rows(hidden, lp.ffn_w2, &lp.ffn_b2));

    if (!x2.all_finite())
      throw std::runtime_error("encoder_forward: non-finite values after layer " +
                               std::to_string(li));

    int row = 0;
    for (int l = 0; l < nlev; ++l) {
      const int h = feats[l].extent(0), w = feats[l].extent(1);
      feats[l] = reshape(slice_rows(x2, row, row + h * w), {h, w, c});
      row += h * w;
    }
  }

  FeaturePyramid out;
  out.levels = std::move(feats);
  out.pos = in.pos;
  return out;
}

// Upsample every level to [ho x wo] and sum them into a single map.
inline Tensor fuse_pyramid(const std::vector<Tensor>& levels, int ho, int wo) {
  if (levels.empty()) throw std::invalid_argument("fuse_pyramid: no levels");
  Tensor acc = upsample_bilinear(levels[0], ho, wo);
  for (std::size_t l = 1; l < levels.size(); ++l)
    acc = add(acc, upsample_bilinear(levels[l], ho, wo));
  return acc;
}

inline Tensor fuse_pyramid(const FeaturePyramid& p, int ho, int wo) {
  return fuse_pyramid(p.levels, ho, wo);
}

}  // namespace defmatch
