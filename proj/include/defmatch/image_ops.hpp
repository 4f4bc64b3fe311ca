#pragma once
// Spatial primitives over [H x W x C] feature maps (row-major, channels last)
// and [H x W] scalar maps.  Image coordinates are pixel-center based: integer
// point (x, y) is the center of column x, row y.

#include <algorithm>
#include <cmath>
#include <vector>

#include "defmatch/ops.hpp"

namespace defmatch {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

namespace detail {

struct AxisTap {
  int i0 = 0, i1 = 0;
  double w = 0.0;      // weight of i1
  bool clamped = false;  // outside the valid range, derivative is zero
};

inline AxisTap axis_tap(double v, int n) {
  AxisTap t;
  t.clamped = (v < 0.0 || v > static_cast<double>(n - 1));
  const double c = std::min(std::max(v, 0.0), static_cast<double>(n - 1));
  int i0 = static_cast<int>(std::floor(c));
  i0 = std::min(i0, n - 2 >= 0 ? n - 2 : 0);
  t.i0 = std::max(i0, 0);
  t.i1 = std::min(t.i0 + 1, n - 1);
  t.w = c - static_cast<double>(t.i0);
  return t;
}

}  // namespace detail

// ---- conv2d ----------------------------------------------------------------

// Cross-correlation with zero padding.  kernel is [k x k x Cin x Cout], k odd.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1, int pad = 0) {
  if (input.rank() != 3 || kernel.rank() != 4)
    throw std::invalid_argument("conv2d: input must be [H x W x Cin], kernel [k x k x Cin x Cout]");
  const int h = input.extent(0), w = input.extent(1), cin = input.extent(2);
  const int k = kernel.extent(0);
  if (kernel.extent(1) != k || k % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square with odd extent");
  if (kernel.extent(2) != cin)
    throw std::invalid_argument("conv2d: kernel input channels mismatch");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride or pad");
  const int cout = kernel.extent(3);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output would be empty");

  Tensor out(Shape{ho, wo, cout});
  const double* in = input.data().data();
  const double* kw = kernel.data().data();
  double* ov = out.data().data();
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* orow = ov + (static_cast<std::size_t>(oy) * wo + ox) * cout;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const double* irow = in + (static_cast<std::size_t>(iy) * w + ix) * cin;
          const double* krow = kw + ((static_cast<std::size_t>(ky) * k + kx) * cin) * cout;
          for (int ci = 0; ci < cin; ++ci) {
            const double iv = irow[ci];
            if (iv == 0.0) continue;
            const double* kc = krow + static_cast<std::size_t>(ci) * cout;
            for (int co = 0; co < cout; ++co) orow[co] += iv * kc[co];
          }
        }
      }
    }

  if (detail::track({&input, &kernel})) {
    out.set_requires_grad(true);
    auto inn = input.handle(), kn = kernel.handle(), on = out.handle();
    GradTape::record(on, [inn, kn, on, h, w, cin, k, cout, ho, wo, stride, pad] {
      if (on->grad.empty()) return;
      const bool gi = inn->requires_grad, gk = kn->requires_grad;
      if (gi) inn->ensure_grad();
      if (gk) kn->ensure_grad();
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const double* grow = on->grad.data() + (static_cast<std::size_t>(oy) * wo + ox) * cout;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              const std::size_t ibase = (static_cast<std::size_t>(iy) * w + ix) * cin;
              const std::size_t kbase = (static_cast<std::size_t>(ky) * k + kx) * cin * cout;
              for (int ci = 0; ci < cin; ++ci) {
                const double* kc = kn->values.data() + kbase + static_cast<std::size_t>(ci) * cout;
                double acc = 0.0;
                for (int co = 0; co < cout; ++co) {
                  const double g = grow[co];
                  if (gk) kn->grad[kbase + static_cast<std::size_t>(ci) * cout + co] +=
                      g * inn->values[ibase + ci];
                  acc += g * kc[co];
                }
                if (gi) inn->grad[ibase + ci] += acc;
              }
            }
          }
        }
    });
  }
  return out;
}

inline Tensor add_channel_bias(const Tensor& map, const Tensor& bias) {
  if (map.rank() != 3 || bias.rank() != 1 || bias.extent(0) != map.extent(2))
    throw std::invalid_argument("add_channel_bias: needs [H x W x C] and [C]");
  const int c = map.extent(2);
  Tensor out(map.shape());
  const auto mv = map.data(), bv = bias.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < map.size(); ++i) ov[i] = mv[i] + bv[i % c];
  if (detail::track({&map, &bias})) {
    out.set_requires_grad(true);
    auto mn = map.handle(), bn = bias.handle(), on = out.handle();
    GradTape::record(on, [mn, bn, on, c] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (mn->requires_grad) detail::accum(mn, i, on->grad[i]);
        if (bn->requires_grad) detail::accum(bn, i % c, on->grad[i]);
      }
    });
  }
  return out;
}

// ---- pooling / resampling --------------------------------------------------

inline Tensor avg_pool2(const Tensor& map) {
  if (map.rank() != 3) throw std::invalid_argument("avg_pool2: needs [H x W x C]");
  const int h = map.extent(0), w = map.extent(1), c = map.extent(2);
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: extents must be even");
  Tensor out(Shape{h / 2, w / 2, c});
  for (int y = 0; y < h / 2; ++y)
    for (int x = 0; x < w / 2; ++x)
      for (int ch = 0; ch < c; ++ch)
        out.at(y, x, ch) = 0.25 * (map.at(2 * y, 2 * x, ch) + map.at(2 * y, 2 * x + 1, ch) +
                                   map.at(2 * y + 1, 2 * x, ch) + map.at(2 * y + 1, 2 * x + 1, ch));
  if (detail::track({&map})) {
    out.set_requires_grad(true);
    auto mn = map.handle(), on = out.handle();
    GradTape::record(on, [mn, on, h, w, c] {
      if (on->grad.empty()) return;
      mn->ensure_grad();
      const int wo = w / 2;
      for (int y = 0; y < h / 2; ++y)
        for (int x = 0; x < wo; ++x)
          for (int ch = 0; ch < c; ++ch) {
            const double g = 0.25 * on->grad[(static_cast<std::size_t>(y) * wo + x) * c + ch];
            mn->grad[(static_cast<std::size_t>(2 * y) * w + 2 * x) * c + ch] += g;
            mn->grad[(static_cast<std::size_t>(2 * y) * w + 2 * x + 1) * c + ch] += g;
            mn->grad[(static_cast<std::size_t>(2 * y + 1) * w + 2 * x) * c + ch] += g;
            mn->grad[(static_cast<std::size_t>(2 * y + 1) * w + 2 * x + 1) * c + ch] += g;
          }
    });
  }
  return out;
}

// Bilinear resize to [ho x wo]; output pixel centers map to source coords
// (d + 0.5) * src / dst - 0.5, clamped to the edge.  Same-size resize is the
// identity under this mapping.
inline Tensor upsample_bilinear(const Tensor& map, int ho, int wo) {
  if (map.rank() != 3) throw std::invalid_argument("upsample_bilinear: needs [H x W x C]");
  if (ho < 1 || wo < 1) throw std::invalid_argument("upsample_bilinear: bad target extents");
  const int h = map.extent(0), w = map.extent(1), c = map.extent(2);
  std::vector<detail::AxisTap> ty(static_cast<std::size_t>(ho)), tx(static_cast<std::size_t>(wo));
  for (int y = 0; y < ho; ++y)
    ty[static_cast<std::size_t>(y)] =
        detail::axis_tap((y + 0.5) * static_cast<double>(h) / ho - 0.5, h);
  for (int x = 0; x < wo; ++x)
    tx[static_cast<std::size_t>(x)] =
        detail::axis_tap((x + 0.5) * static_cast<double>(w) / wo - 0.5, w);

  Tensor out(Shape{ho, wo, c});
  for (int y = 0; y < ho; ++y) {
    const auto& ay = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < wo; ++x) {
      const auto& ax = tx[static_cast<std::size_t>(x)];
      for (int ch = 0; ch < c; ++ch) {
        const double top = (1.0 - ax.w) * map.at(ay.i0, ax.i0, ch) + ax.w * map.at(ay.i0, ax.i1, ch);
        const double bot = (1.0 - ax.w) * map.at(ay.i1, ax.i0, ch) + ax.w * map.at(ay.i1, ax.i1, ch);
        out.at(y, x, ch) = (1.0 - ay.w) * top + ay.w * bot;
      }
    }
  }
  if (detail::track({&map})) {
    out.set_requires_grad(true);
    auto mn = map.handle(), on = out.handle();
    GradTape::record(on, [mn, on, ty, tx, ho, wo, w, c] {
      if (on->grad.empty()) return;
      mn->ensure_grad();
      for (int y = 0; y < ho; ++y) {
        const auto& ay = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < wo; ++x) {
          const auto& ax = tx[static_cast<std::size_t>(x)];
          for (int ch = 0; ch < c; ++ch) {
            const double g = on->grad[(static_cast<std::size_t>(y) * wo + x) * c + ch];
            if (g == 0.0) continue;
            mn->grad[(static_cast<std::size_t>(ay.i0) * w + ax.i0) * c + ch] +=
                g * (1.0 - ay.w) * (1.0 - ax.w);
            mn->grad[(static_cast<std::size_t>(ay.i0) * w + ax.i1) * c + ch] +=
                g * (1.0 - ay.w) * ax.w;
            mn->grad[(static_cast<std::size_t>(ay.i1) * w + ax.i0) * c + ch] +=
                g * ay.w * (1.0 - ax.w);
            mn->grad[(static_cast<std::size_t>(ay.i1) * w + ax.i1) * c + ch] += g * ay.w * ax.w;
          }
        }
      }
    });
  }
  return out;
}

// ---- bilinear point sampling -----------------------------------------------

namespace detail {

inline void check_map_for_sampling(const Tensor& map, const char* op) {
  if (map.rank() != 2 && map.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": map must be rank 2 or 3");
  if (map.size() == 0) throw std::invalid_argument(std::string(op) + ": empty map");
}

}  // namespace detail

// Sample a map at continuous points (clamp-to-edge).  Output is [N x C]
// (C = 1 for a rank-2 map).  Gradients reach the map only.
inline Tensor bilinear_sample(const Tensor& map, const std::vector<Vec2>& points) {
  detail::check_map_for_sampling(map, "bilinear_sample");
  const int h = map.extent(0), w = map.extent(1);
  const int c = map.rank() == 3 ? map.extent(2) : 1;
  const int n = static_cast<int>(points.size());
  if (n == 0) throw std::invalid_argument("bilinear_sample: no points");
  for (const Vec2& p : points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw std::invalid_argument("bilinear_sample: non-finite point");

  Tensor out(Shape{n, c});
  std::vector<detail::AxisTap> txs(points.size()), tys(points.size());
  const double* mv = map.data().data();
  for (int i = 0; i < n; ++i) {
    const auto ax = detail::axis_tap(points[static_cast<std::size_t>(i)].x, w);
    const auto ay = detail::axis_tap(points[static_cast<std::size_t>(i)].y, h);
    txs[static_cast<std::size_t>(i)] = ax;
    tys[static_cast<std::size_t>(i)] = ay;
    for (int ch = 0; ch < c; ++ch) {
      const double v00 = mv[(static_cast<std::size_t>(ay.i0) * w + ax.i0) * c + ch];
      const double v01 = mv[(static_cast<std::size_t>(ay.i0) * w + ax.i1) * c + ch];
      const double v10 = mv[(static_cast<std::size_t>(ay.i1) * w + ax.i0) * c + ch];
      const double v11 = mv[(static_cast<std::size_t>(ay.i1) * w + ax.i1) * c + ch];
      out.at(i, ch) = (1.0 - ay.w) * ((1.0 - ax.w) * v00 + ax.w * v01) +
                      ay.w * ((1.0 - ax.w) * v10 + ax.w * v11);
    }
  }
  if (detail::track({&map})) {
    out.set_requires_grad(true);
    auto mn = map.handle(), on = out.handle();
    GradTape::record(on, [mn, on, txs, tys, w, c, n] {
      if (on->grad.empty()) return;
      mn->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const auto& ax = txs[static_cast<std::size_t>(i)];
        const auto& ay = tys[static_cast<std::size_t>(i)];
        for (int ch = 0; ch < c; ++ch) {
          const double g = on->grad[static_cast<std::size_t>(i) * c + ch];
          if (g == 0.0) continue;
          mn->grad[(static_cast<std::size_t>(ay.i0) * w + ax.i0) * c + ch] +=
              g * (1.0 - ay.w) * (1.0 - ax.w);
          mn->grad[(static_cast<std::size_t>(ay.i0) * w + ax.i1) * c + ch] +=
              g * (1.0 - ay.w) * ax.w;
          mn->grad[(static_cast<std::size_t>(ay.i1) * w + ax.i0) * c + ch] +=
              g * ay.w * (1.0 - ax.w);
          mn->grad[(static_cast<std::size_t>(ay.i1) * w + ax.i1) * c + ch] += g * ay.w * ax.w;
        }
      }
    });
  }
  return out;
}

// Variant with differentiable point coordinates, points given as [N x 2]
// rows (x, y).  Gradients reach both the map and the coordinates; coordinate
// derivatives are zero where a point is clamped to the edge.
inline Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
  detail::check_map_for_sampling(map, "bilinear_sample");
  if (points.rank() != 2 || points.extent(1) != 2)
    throw std::invalid_argument("bilinear_sample: points must be [N x 2]");
  const int h = map.extent(0), w = map.extent(1);
  const int c = map.rank() == 3 ? map.extent(2) : 1;
  const int n = points.extent(0);
  std::vector<Vec2> pts(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    pts[static_cast<std::size_t>(i)] = {points.at(i, 0), points.at(i, 1)};

  // Value path and map gradient come from the fixed-point overload; the
  // coordinate gradient is recorded as a second closure on the same output.
  Tensor out = bilinear_sample(map, pts);

  if (detail::track({&points})) {
    out.set_requires_grad(true);
    auto mn = map.handle(), pn = points.handle(), on = out.handle();
    GradTape::record(on, [mn, pn, on, h, w, c, n] {
      if (on->grad.empty()) return;
      if (!pn->requires_grad) return;
      for (int i = 0; i < n; ++i) {
        const double px = pn->values[static_cast<std::size_t>(i) * 2];
        const double py = pn->values[static_cast<std::size_t>(i) * 2 + 1];
        const auto ax = detail::axis_tap(px, w);
        const auto ay = detail::axis_tap(py, h);
        double gx = 0.0, gy = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double g = on->grad[static_cast<std::size_t>(i) * c + ch];
          if (g == 0.0) continue;
          const double v00 = mn->values[(static_cast<std::size_t>(ay.i0) * w + ax.i0) * c + ch];
          const double v01 = mn->values[(static_cast<std::size_t>(ay.i0) * w + ax.i1) * c + ch];
          const double v10 = mn->values[(static_cast<std::size_t>(ay.i1) * w + ax.i0) * c + ch];
          const double v11 = mn->values[(static_cast<std::size_t>(ay.i1) * w + ax.i1) * c + ch];
          if (!ax.clamped) gx += g * ((1.0 - ay.w) * (v01 - v00) + ay.w * (v11 - v10));
          if (!ay.clamped) gy += g * ((1.0 - ax.w) * (v10 - v00) + ax.w * (v11 - v01));
        }
        detail::accum(pn, static_cast<std::size_t>(i) * 2, gx);
        detail::accum(pn, static_cast<std::size_t>(i) * 2 + 1, gy);
      }
    });
  }
  return out;
}

// ---- misc map ops ----------------------------------------------------------

// N x N window of a rank-2 map centered at integer (cy, cx); the window must
// lie fully inside the map.
inline Tensor gather_window(const Tensor& map, int cy, int cx, int n) {
  if (map.rank() != 2) throw std::invalid_argument("gather_window: needs [H x W]");
  if (n < 1 || n % 2 == 0) throw std::invalid_argument("gather_window: window extent must be odd");
  const int h = map.extent(0), w = map.extent(1), r = n / 2;
  if (cy - r < 0 || cy + r >= h || cx - r < 0 || cx + r >= w)
    throw std::invalid_argument("gather_window: window overruns the map border");
  Tensor out(Shape{n, n});
  for (int dy = 0; dy < n; ++dy)
    for (int dx = 0; dx < n; ++dx) out.at(dy, dx) = map.at(cy - r + dy, cx - r + dx);
  if (detail::track({&map})) {
    out.set_requires_grad(true);
    auto mn = map.handle(), on = out.handle();
    GradTape::record(on, [mn, on, cy, cx, n, r, w] {
      if (on->grad.empty()) return;
      for (int dy = 0; dy < n; ++dy)
        for (int dx = 0; dx < n; ++dx)
          detail::accum(mn, static_cast<std::size_t>(cy - r + dy) * w + (cx - r + dx),
                        on->grad[static_cast<std::size_t>(dy) * n + dx]);
    });
  }
  return out;
}

// 1x1 convolution expressed directly: [H x W x C] with W [F x C], b [F].
inline Tensor pointwise_linear(const Tensor& map, const Tensor& w, const Tensor* b = nullptr) {
  if (map.rank() != 3) throw std::invalid_argument("pointwise_linear: needs [H x W x C]");
  const int h = map.extent(0), wd = map.extent(1), c = map.extent(2);
  Tensor flat = reshape(map, {h * wd, c});
  Tensor outf = linear_rows(flat, w, b);
  return reshape(outf, {h, wd, outf.extent(1)});
}

inline Tensor concat_channels(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw std::invalid_argument("concat_channels: empty input");
  const int h = maps[0].extent(0), w = maps[0].extent(1);
  int ctot = 0;
  for (const Tensor& m : maps) {
    if (m.rank() != 3 || m.extent(0) != h || m.extent(1) != w)
      throw std::invalid_argument("concat_channels: spatial extents must match");
    ctot += m.extent(2);
  }
  Tensor out(Shape{h, w, ctot});
  int off = 0;
  for (const Tensor& m : maps) {
    const int c = m.extent(2);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) out.at(y, x, off + ch) = m.at(y, x, ch);
    off += c;
  }
  bool any = false;
  for (const Tensor& m : maps) any = any || m.requires_grad();
  if (any && GradTape::active()) {
    out.set_requires_grad(true);
    std::vector<detail::NodePtr> ins;
    std::vector<int> offs;
    int o = 0;
    for (const Tensor& m : maps) {
      ins.push_back(m.handle());
      offs.push_back(o);
      o += m.extent(2);
    }
    auto on = out.handle();
    GradTape::record(on, [ins, offs, on, h, w, ctot] {
      if (on->grad.empty()) return;
      for (std::size_t mi = 0; mi < ins.size(); ++mi) {
        if (!ins[mi]->requires_grad) continue;
        const int c = static_cast<int>(ins[mi]->values.size()) / (h * w);
        ins[mi]->ensure_grad();
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
              ins[mi]->grad[(static_cast<std::size_t>(y) * w + x) * c + ch] +=
                  on->grad[(static_cast<std::size_t>(y) * w + x) * ctot + offs[mi] + ch];
      }
    });
  }
  return out;
}

}  // namespace defmatch
