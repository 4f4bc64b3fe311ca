#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "defmatch/image_ops.hpp"
#include "defmatch/ops.hpp"
#include "defmatch/tensor.hpp"

namespace defmatch {

// Weights for one deformable attention block. Offsets and attention logits are
// predicted from the query by linear maps; value/output projections are shared
// across sampling points. head_dim() channels per head, so channels % heads == 0.
struct DeformAttnParams {
  int heads = 0;
  int points = 0;
  int levels = 0;
  int channels = 0;
  Tensor value_w;   // [heads*head_dim x channels]
  Tensor out_w;     // [channels x heads*head_dim]
  Tensor offset_w;  // [heads*levels*points*2 x channels]
  Tensor offset_b;  // [heads*levels*points*2]
  Tensor attn_w;    // [heads*levels*points x channels]
  Tensor attn_b;    // [heads*levels*points]

  int head_dim() const { return channels / heads; }

  void validate() const {
    if (channels <= 0 || heads <= 0 || points <= 0 || levels <= 0)
      throw std::invalid_argument("DeformAttnParams: non-positive dimension");
    if (channels % heads != 0)
      throw std::invalid_argument("DeformAttnParams: channels not divisible by heads");
    const int mlk = heads * levels * points;
    auto want = [](const Tensor& t, const Shape& s, const char* name) {
      if (!t.defined() || t.shape() != s)
        throw std::invalid_argument(std::string("DeformAttnParams: bad shape for ") + name);
    };
    want(value_w, {channels, channels}, "value_w");
    want(out_w, {channels, channels}, "out_w");
    want(offset_w, {mlk * 2, channels}, "offset_w");
    want(offset_b, {mlk * 2}, "offset_b");
    want(attn_w, {mlk, channels}, "attn_w");
    want(attn_b, {mlk}, "attn_b");
  }

  // Offsets start at zero and attention starts uniform: a freshly built block
  // averages features around the reference point, which keeps early training stable.
  static DeformAttnParams init(int channels, int heads, int points, int levels,
                               std::uint64_t seed) {
    DeformAttnParams p;
    p.heads = heads;
    p.points = points;
    p.levels = levels;
    p.channels = channels;
    const int mlk = heads * levels * points;
    const double sc = 1.0 / std::sqrt(static_cast<double>(channels));
    p.value_w = Tensor::uniform({channels, channels}, -sc, sc, seed * 4 + 0);
    p.out_w = Tensor::uniform({channels, channels}, -sc, sc, seed * 4 + 1);
    p.offset_w = Tensor::zeros({mlk * 2, channels});
    p.offset_b = Tensor::zeros({mlk * 2});
    p.attn_w = Tensor::zeros({mlk, channels});
    p.attn_b = Tensor::zeros({mlk});
    for (Tensor* t : p.parameters()) t->set_requires_grad(true);
    p.validate();
    return p;
  }

  std::vector<Tensor*> parameters() {
    return {&value_w, &out_w, &offset_w, &offset_b, &attn_w, &attn_b};
  }
};

// Fused sampling + aggregation shared by every deformable attention call.
//
// value_levels: L maps, each [H_l x W_l x heads*head_dim].
// locations:    [Nq x heads*L*points*2] pixel coordinates in the target level,
//               ordered ((m*L + l)*points + k)*2 + {0:x, 1:y}.
// weights:      [Nq x heads*L*points], one attention weight per sample.
//
// Out: [Nq x heads*head_dim]. Differentiable in values, locations and weights;
// location gradients are zero where the bilinear lookup is clamped to the border.
inline Tensor ms_deform_attn_core(const std::vector<Tensor>& value_levels,
                                  const Tensor& locations, const Tensor& weights,
                                  int heads) {
  if (value_levels.empty())
    throw std::invalid_argument("ms_deform_attn_core: no value levels");
  const int nlev = static_cast<int>(value_levels.size());
  const int vc = value_levels[0].extent(2);
  for (const Tensor& v : value_levels) {
    if (v.rank() != 3 || v.extent(2) != vc)
      throw std::invalid_argument("ms_deform_attn_core: level shape mismatch");
  }
  if (heads <= 0 || vc % heads != 0)
    throw std::invalid_argument("ms_deform_attn_core: channels not divisible by heads");
  if (locations.rank() != 2 || weights.rank() != 2 ||
      locations.extent(0) != weights.extent(0))
    throw std::invalid_argument("ms_deform_attn_core: bad locations/weights rank");
  const int nq = weights.extent(0);
  const int mlk = weights.extent(1);
  if (mlk % (heads * nlev) != 0 || locations.extent(1) != mlk * 2)
    throw std::invalid_argument("ms_deform_attn_core: locations/weights extent mismatch");
  const int npts = mlk / (heads * nlev);
  const int hd = vc / heads;

  Tensor out(Shape{nq, vc});
  auto run = [nq, heads, nlev, npts, hd, vc](
                 const std::vector<detail::NodePtr>& vals, const detail::NodePtr& loc,
                 const detail::NodePtr& wts, detail::NodePtr outn, bool backward,
                 bool vals_rg, bool loc_rg, bool wts_rg) {
    for (int q = 0; q < nq; ++q) {
      const std::size_t lrow = static_cast<std::size_t>(q) * heads * nlev * npts * 2;
      const std::size_t wrow = static_cast<std::size_t>(q) * heads * nlev * npts;
      const std::size_t orow = static_cast<std::size_t>(q) * vc;
      for (int m = 0; m < heads; ++m) {
        for (int l = 0; l < nlev; ++l) {
          const auto& vn = vals[l];
          const int h = vn->shape[0], w = vn->shape[1];
          for (int k = 0; k < npts; ++k) {
            const std::size_t s = ((static_cast<std::size_t>(m) * nlev + l) * npts + k);
            const double x = loc->values[lrow + s * 2 + 0];
            const double y = loc->values[lrow + s * 2 + 1];
            if (!std::isfinite(x) || !std::isfinite(y))
              throw std::invalid_argument("ms_deform_attn_core: non-finite location");
            const double a = wts->values[wrow + s];
            const auto tx = detail::axis_tap(x, w);
            const auto ty = detail::axis_tap(y, h);
            const double w00 = (1.0 - ty.w) * (1.0 - tx.w), w01 = (1.0 - ty.w) * tx.w;
            const double w10 = ty.w * (1.0 - tx.w), w11 = ty.w * tx.w;
            const std::size_t b00 = (static_cast<std::size_t>(ty.i0) * w + tx.i0) * vc;
            const std::size_t b01 = (static_cast<std::size_t>(ty.i0) * w + tx.i1) * vc;
            const std::size_t b10 = (static_cast<std::size_t>(ty.i1) * w + tx.i0) * vc;
            const std::size_t b11 = (static_cast<std::size_t>(ty.i1) * w + tx.i1) * vc;
            const int c0 = m * hd;
            if (!backward) {
              for (int c = 0; c < hd; ++c) {
                const std::size_t cc = c0 + c;
                const double val = w00 * vn->values[b00 + cc] + w01 * vn->values[b01 + cc] +
                                   w10 * vn->values[b10 + cc] + w11 * vn->values[b11 + cc];
                outn->values[orow + cc] += a * val;
              }
            } else {
              double dw = 0.0, gx = 0.0, gy = 0.0;
              for (int c = 0; c < hd; ++c) {
                const std::size_t cc = c0 + c;
                const double g = outn->grad[orow + cc];
                const double v00 = vn->values[b00 + cc], v01 = vn->values[b01 + cc];
                const double v10 = vn->values[b10 + cc], v11 = vn->values[b11 + cc];
                if (wts_rg) dw += g * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11);
                if (vals_rg && vn->requires_grad) {
                  const double ga = g * a;
                  detail::accum(vn, b00 + cc, ga * w00);
                  detail::accum(vn, b01 + cc, ga * w01);
                  detail::accum(vn, b10 + cc, ga * w10);
                  detail::accum(vn, b11 + cc, ga * w11);
                }
                if (loc_rg) {
                  gx += g * ((1.0 - ty.w) * (v01 - v00) + ty.w * (v11 - v10));
                  gy += g * ((1.0 - tx.w) * (v10 - v00) + tx.w * (v11 - v01));
                }
              }
              if (wts_rg) detail::accum(wts, wrow + s, dw);
              if (loc_rg) {
                if (!tx.clamped) detail::accum(loc, lrow + s * 2 + 0, a * gx);
                if (!ty.clamped) detail::accum(loc, lrow + s * 2 + 1, a * gy);
              }
            }
          }
        }
      }
    }
  };

  std::vector<detail::NodePtr> vals;
  for (const Tensor& v : value_levels) vals.push_back(v.handle());
  run(vals, locations.handle(), weights.handle(), out.handle(), false, false, false, false);

  bool vals_rg = false;
  for (const Tensor& v : value_levels) vals_rg = vals_rg || v.requires_grad();
  const bool loc_rg = locations.requires_grad(), wts_rg = weights.requires_grad();
  if ((vals_rg || loc_rg || wts_rg) && GradTape::active()) {
    out.set_requires_grad(true);
    auto loc = locations.handle(), wts = weights.handle(), on = out.handle();
    GradTape::record(on, [run, vals, loc, wts, on, vals_rg, loc_rg, wts_rg] {
      if (on->grad.empty()) return;
      run(vals, loc, wts, on, true, vals_rg, loc_rg, wts_rg);
    });
  }
  return out;
}

namespace detail {

// Shared head of both wrappers: predict offsets and attention from the query
// rows, add reference locations, project values, run the fused core, project out.
//
// refs_norm holds one normalized point per query row; the pixel reference in
// level l is (u * W_l - 0.5, v * H_l - 0.5).
inline Tensor deform_attn_queries(const Tensor& queries, const std::vector<Vec2>& refs_norm,
                                  const std::vector<Tensor>& feat_levels,
                                  const DeformAttnParams& p) {
  p.validate();
  if (static_cast<int>(feat_levels.size()) != p.levels)
    throw std::invalid_argument("deform_attn: level count does not match params");
  for (const Tensor& f : feat_levels)
    if (f.rank() != 3 || f.extent(2) != p.channels)
      throw std::invalid_argument("deform_attn: feature level shape mismatch");
  if (queries.rank() != 2 || queries.extent(1) != p.channels)
    throw std::invalid_argument("deform_attn: queries must be [N x channels]");
  const int nq = queries.extent(0);
  if (static_cast<int>(refs_norm.size()) != nq)
    throw std::invalid_argument("deform_attn: one reference point per query expected");
  const int m = p.heads, nl = p.levels, k = p.points;
  const int mlk = m * nl * k;

  Tensor offsets = linear_rows(queries, p.offset_w, &p.offset_b);
  Tensor logits = linear_rows(queries, p.attn_w, &p.attn_b);
  // Attention normalizes jointly over levels and points within each head.
  Tensor attn = reshape(softmax_rows(reshape(logits, {nq * m, nl * k})), {nq, mlk});

  Tensor refs(Shape{nq, mlk * 2});
  for (int q = 0; q < nq; ++q) {
    const Vec2 r = refs_norm[q];
    if (!std::isfinite(r.x) || !std::isfinite(r.y))
      throw std::invalid_argument("deform_attn: non-finite reference point");
    for (int mi = 0; mi < m; ++mi)
      for (int l = 0; l < nl; ++l) {
        const double px = r.x * feat_levels[l].extent(1) - 0.5;
        const double py = r.y * feat_levels[l].extent(0) - 0.5;
        for (int ki = 0; ki < k; ++ki) {
          const std::size_t s = ((static_cast<std::size_t>(mi) * nl + l) * k + ki);
          refs.data()[static_cast<std::size_t>(q) * mlk * 2 + s * 2 + 0] = px;
          refs.data()[static_cast<std::size_t>(q) * mlk * 2 + s * 2 + 1] = py;
        }
      }
  }
  Tensor locations = add(refs, offsets);

  std::vector<Tensor> values;
  values.reserve(feat_levels.size());
  for (const Tensor& f : feat_levels) values.push_back(pointwise_linear(f, p.value_w));

  Tensor pooled = ms_deform_attn_core(values, locations, attn, m);
  return linear_rows(pooled, p.out_w);
}

}  // namespace detail

// Single-scale deformable attention for one query point, sampling the feature
// map x [H x W x C] around pixel position p_q. Returns [C].
inline Tensor deform_attn_single(const Tensor& z_q, Vec2 p_q, const Tensor& x,
                                 const DeformAttnParams& p) {
  if (p.levels != 1)
    throw std::invalid_argument("deform_attn_single: params built for multiple levels");
  if (x.rank() != 3) throw std::invalid_argument("deform_attn_single: map must be rank-3");
  if (z_q.rank() != 1) throw std::invalid_argument("deform_attn_single: query must be rank-1");
  const Vec2 r{(p_q.x + 0.5) / x.extent(1), (p_q.y + 0.5) / x.extent(0)};
  Tensor out = detail::deform_attn_queries(reshape(z_q, {1, z_q.extent(0)}), {r}, {x}, p);
  return reshape(out, {out.extent(1)});
}

// Multi-scale deformable attention for one query with a normalized reference
// point p_hat in [0,1]^2 shared across levels. Returns [C].
inline Tensor deform_attn_multiscale(const Tensor& z_q, Vec2 p_hat,
                                     const std::vector<Tensor>& levels,
                                     const DeformAttnParams& p) {
  if (z_q.rank() != 1)
    throw std::invalid_argument("deform_attn_multiscale: query must be rank-1");
  Tensor out =
      detail::deform_attn_queries(reshape(z_q, {1, z_q.extent(0)}), {p_hat}, levels, p);
  return reshape(out, {out.extent(1)});
}

// Fixed 2D sinusoidal positional embedding, [h x w x c] with c % 4 == 0. The
// first c/2 channels encode the row coordinate, the rest the column coordinate.
inline Tensor sinusoid_posemb(int h, int w, int c) {
  if (h <= 0 || w <= 0 || c <= 0 || c % 4 != 0)
    throw std::invalid_argument("sinusoid_posemb: extents must be positive, channels % 4 == 0");
  const int d = c / 2;
  const double two_pi = 6.283185307179586476925286766559;
  Tensor out(Shape{h, w, c});
  std::vector<double> inv(d);
  for (int j = 0; j < d; ++j)
    inv[j] = 1.0 / std::pow(10000.0, 2.0 * (j / 2) / static_cast<double>(d));
  for (int i = 0; i < h; ++i) {
    const double ey = (i + 0.5) / h * two_pi;
    for (int j = 0; j < w; ++j) {
      const double ex = (j + 0.5) / w * two_pi;
      double* row = out.data().data() + (static_cast<std::size_t>(i) * w + j) * c;
      for (int t = 0; t < d; ++t) {
        row[t] = (t % 2 == 0) ? std::sin(ey * inv[t]) : std::cos(ey * inv[t]);
        row[d + t] = (t % 2 == 0) ? std::sin(ex * inv[t]) : std::cos(ex * inv[t]);
      }
    }
  }
  return out;
}

// A stack of feature maps at decreasing resolutions plus their positional
// embeddings. Levels share a channel count and never grow from one level to the next.
struct FeaturePyramid {
  std::vector<Tensor> levels;
  std::vector<Tensor> pos;

  int channels() const { return levels.empty() ? 0 : levels[0].extent(2); }
};

inline FeaturePyramid make_pyramid(std::vector<Tensor> levels) {
  if (levels.empty()) throw std::invalid_argument("make_pyramid: no levels");
  const int c = levels[0].extent(2);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (levels[l].rank() != 3 || levels[l].extent(2) != c)
      throw std::invalid_argument("make_pyramid: levels must be rank-3 with equal channels");
    if (l > 0 && (levels[l].extent(0) > levels[l - 1].extent(0) ||
                  levels[l].extent(1) > levels[l - 1].extent(1)))
      throw std::invalid_argument("make_pyramid: level extents must not grow");
  }
  FeaturePyramid p;
  p.pos.reserve(levels.size());
  for (const Tensor& f : levels)
    p.pos.push_back(sinusoid_posemb(f.extent(0), f.extent(1), c));
  p.levels = std::move(levels);
  return p;
}

}  // namespace defmatch
