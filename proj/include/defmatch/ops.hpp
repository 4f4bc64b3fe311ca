#pragma once
// Differentiable primitives over Tensor.  Every op validates its contract,
// computes values eagerly, and (only while a tape is listening) records a
// closure that pushes the output gradient back to its inputs.
//
// Backward closures bail out when no gradient reached the output, so side
// branches that never meet the loss cost nothing in the backward pass.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "defmatch/tensor.hpp"

namespace defmatch {

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

inline void check_scalar(const Tensor& s, const char* op) {
  if (s.size() != 1) throw std::invalid_argument(std::string(op) + ": expected a scalar tensor");
}

}  // namespace detail

// ---- elementwise binary -----------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::track({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.handle(), bn = b.handle(), on = out.handle();
    GradTape::record(on, [an, bn, on] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) detail::accum(an, i, on->grad[i]);
        if (bn->requires_grad) detail::accum(bn, i, on->grad[i]);
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] - bv[i];
  if (detail::track({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.handle(), bn = b.handle(), on = out.handle();
    GradTape::record(on, [an, bn, on] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) detail::accum(an, i, on->grad[i]);
        if (bn->requires_grad) detail::accum(bn, i, -on->grad[i]);
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::track({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.handle(), bn = b.handle(), on = out.handle();
    GradTape::record(on, [an, bn, on] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) detail::accum(an, i, on->grad[i] * bn->values[i]);
        if (bn->requires_grad) detail::accum(bn, i, on->grad[i] * an->values[i]);
      }
    });
  }
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  Tensor out(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] / bv[i];
  if (detail::track({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.handle(), bn = b.handle(), on = out.handle();
    GradTape::record(on, [an, bn, on] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double inv = 1.0 / bn->values[i];
        if (an->requires_grad) detail::accum(an, i, on->grad[i] * inv);
        if (bn->requires_grad)
          detail::accum(bn, i, -on->grad[i] * an->values[i] * inv * inv);
      }
    });
  }
  return out;
}

// ---- scalar (double) variants ----------------------------------------------

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const auto av = a.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] * c;
  if (detail::track({&a})) {
    out.set_requires_grad(true);
    auto an = a.handle(), on = out.handle();
    GradTape::record(on, [an, on, c] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) detail::accum(an, i, on->grad[i] * c);
    });
  }
  return out;
}

inline Tensor add_const(const Tensor& a, double c) {
  Tensor out(a.shape());
  const auto av = a.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] + c;
  if (detail::track({&a})) {
    out.set_requires_grad(true);
    auto an = a.handle(), on = out.handle();
    GradTape::record(on, [an, on] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) detail::accum(an, i, on->grad[i]);
    });
  }
  return out;
}

// ---- broadcast against a one-element tensor --------------------------------

inline Tensor bcast_add(const Tensor& a, const Tensor& s) {
  detail::check_scalar(s, "bcast_add");
  Tensor out(a.shape());
  const double sv = s.at(0);
  const auto av = a.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] + sv;
  if (detail::track({&a, &s})) {
    out.set_requires_grad(true);
    auto an = a.handle(), sn = s.handle(), on = out.handle();
    GradTape::record(on, [an, sn, on] {
      if (on->grad.empty()) return;
      double tot = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) detail::accum(an, i, on->grad[i]);
        tot += on->grad[i];
      }
      if (sn->requires_grad) detail::accum(sn, 0, tot);
    });
  }
  return out;
}

inline Tensor bcast_sub(const Tensor& a, const Tensor& s) {
  detail::check_scalar(s, "bcast_sub");
  return bcast_add(a, scale(s, -1.0));
}

inline Tensor bcast_mul(const Tensor& a, const Tensor& s) {
  detail::check_scalar(s, "bcast_mul");
  Tensor out(a.shape());
  const double sv = s.at(0);
  const auto av = a.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] * sv;
  if (detail::track({&a, &s})) {
    out.set_requires_grad(true);
    auto an = a.handle(), sn = s.handle(), on = out.handle();
    GradTape::record(on, [an, sn, on] {
      if (on->grad.empty()) return;
      const double sv2 = sn->values[0];
      double tot = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) detail::accum(an, i, on->grad[i] * sv2);
        tot += on->grad[i] * an->values[i];
      }
      if (sn->requires_grad) detail::accum(sn, 0, tot);
    });
  }
  return out;
}

inline Tensor bcast_div(const Tensor& a, const Tensor& s) {
  detail::check_scalar(s, "bcast_div");
  Tensor out(a.shape());
  const double sv = s.at(0);
  const auto av = a.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] / sv;
  if (detail::track({&a, &s})) {
    out.set_requires_grad(true);
    auto an = a.handle(), sn = s.handle(), on = out.handle();
    GradTape::record(on, [an, sn, on] {
      if (on->grad.empty()) return;
      const double inv = 1.0 / sn->values[0];
      double tot = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) detail::accum(an, i, on->grad[i] * inv);
        tot += -on->grad[i] * an->values[i] * inv * inv;
      }
      if (sn->requires_grad) detail::accum(sn, 0, tot);
    });
  }
  return out;
}

// ---- unary -----------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx_from_xy) {
  Tensor out(a.shape());
  const auto av = a.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = fwd(av[i]);
  if (track({&a})) {
    out.set_requires_grad(true);
    auto an = a.handle(), on = out.handle();
    GradTape::record(on, [an, on, dfdx_from_xy] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        accum(an, i, on->grad[i] * dfdx_from_xy(an->values[i], on->values[i]));
    });
  }
  return out;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

// Subgradient 0 at the origin so exact-zero radicands stay NaN-free.
inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                          [](double x, double y) { return x < 1e-24 ? 0.0 : 0.5 / y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                          [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::abs(x); },
                          [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// x^p for x >= 0; derivative guarded at 0 when p < 1.
inline Tensor pow_const(const Tensor& a, double p) {
  for (double v : a.data())
    if (v < 0.0) throw std::invalid_argument("pow_const: negative base");
  return detail::unary_op(a, [p](double x) { return std::pow(x, p); },
                          [p](double x, double) {
                            if (x < 1e-24) return p >= 1.0 ? (p == 1.0 ? 1.0 : 0.0) : 0.0;
                            return p * std::pow(x, p - 1.0);
                          });
}

// Pass-through gradient strictly inside [lo, hi], zero where clamped.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return detail::unary_op(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                          [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- reductions ------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (detail::track({&a})) {
    out.set_requires_grad(true);
    auto an = a.handle(), on = out.handle();
    GradTape::record(on, [an, on] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < an->values.size(); ++i) detail::accum(an, i, on->grad[0]);
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// ---- matrix ----------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw std::invalid_argument("matmul: needs [m x k] and [k x n]");
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out(Shape{m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
    }
  if (detail::track({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.handle(), bn = b.handle(), on = out.handle();
    GradTape::record(on, [an, bn, on, m, k, n] {
      if (on->grad.empty()) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double g = on->grad[static_cast<std::size_t>(i) * n + j];
          if (g == 0.0) continue;
          for (int p = 0; p < k; ++p) {
            if (an->requires_grad)
              an->ensure_grad(), an->grad[static_cast<std::size_t>(i) * k + p] +=
                                     g * bn->values[static_cast<std::size_t>(p) * n + j];
            if (bn->requires_grad)
              bn->ensure_grad(), bn->grad[static_cast<std::size_t>(p) * n + j] +=
                                     g * an->values[static_cast<std::size_t>(i) * k + p];
          }
        }
    });
  }
  return out;
}

inline Tensor transpose2(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2: rank-2 only");
  const int r = a.extent(0), c = a.extent(1);
  Tensor out(Shape{c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  if (detail::track({&a})) {
    out.set_requires_grad(true);
    auto an = a.handle(), on = out.handle();
    GradTape::record(on, [an, on, r, c] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          an->grad[static_cast<std::size_t>(i) * c + j] +=
              on->grad[static_cast<std::size_t>(j) * r + i];
    });
  }
  return out;
}

// X [N x C] * W^T [F x C] (+ b [F]) -> [N x F]
inline Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor* b = nullptr) {
  if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(1))
    throw std::invalid_argument("linear_rows: needs [N x C] and [F x C]");
  const int n = x.extent(0), c = x.extent(1), f = w.extent(0);
  if (b && (b->rank() != 1 || b->extent(0) != f))
    throw std::invalid_argument("linear_rows: bias must be [F]");
  Tensor out(Shape{n, f});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < f; ++o) {
      double s = b ? b->at(o) : 0.0;
      for (int p = 0; p < c; ++p) s += x.at(i, p) * w.at(o, p);
      out.at(i, o) = s;
    }
  const bool tb = b && detail::track({b});
  if (detail::track({&x, &w}) || tb) {
    out.set_requires_grad(true);
    auto xn = x.handle(), wn = w.handle(), on = out.handle();
    detail::NodePtr bn = b ? b->handle() : nullptr;
    GradTape::record(on, [xn, wn, bn, on, n, c, f] {
      if (on->grad.empty()) return;
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < f; ++o) {
          const double g = on->grad[static_cast<std::size_t>(i) * f + o];
          if (g == 0.0) continue;
          if (bn && bn->requires_grad) detail::accum(bn, static_cast<std::size_t>(o), g);
          for (int p = 0; p < c; ++p) {
            if (xn->requires_grad)
              xn->ensure_grad(), xn->grad[static_cast<std::size_t>(i) * c + p] +=
                                     g * wn->values[static_cast<std::size_t>(o) * c + p];
            if (wn->requires_grad)
              wn->ensure_grad(), wn->grad[static_cast<std::size_t>(o) * c + p] +=
                                     g * xn->values[static_cast<std::size_t>(i) * c + p];
          }
        }
    });
  }
  return out;
}

// W [F x C] * v [C] (+ b [F]) -> [F]
inline Tensor matvec(const Tensor& w, const Tensor& v, const Tensor* b = nullptr) {
  if (w.rank() != 2 || v.rank() != 1 || w.extent(1) != v.extent(0))
    throw std::invalid_argument("matvec: needs [F x C] and [C]");
  const int f = w.extent(0), c = w.extent(1);
  if (b && (b->rank() != 1 || b->extent(0) != f))
    throw std::invalid_argument("matvec: bias must be [F]");
  Tensor out(Shape{f});
  for (int o = 0; o < f; ++o) {
    double s = b ? b->at(o) : 0.0;
    for (int p = 0; p < c; ++p) s += w.at(o, p) * v.at(p);
    out.at(o) = s;
  }
  const bool tb = b && detail::track({b});
  if (detail::track({&w, &v}) || tb) {
    out.set_requires_grad(true);
    auto wn = w.handle(), vn = v.handle(), on = out.handle();
    detail::NodePtr bn = b ? b->handle() : nullptr;
    GradTape::record(on, [wn, vn, bn, on, f, c] {
      if (on->grad.empty()) return;
      for (int o = 0; o < f; ++o) {
        const double g = on->grad[static_cast<std::size_t>(o)];
        if (g == 0.0) continue;
        if (bn && bn->requires_grad) detail::accum(bn, static_cast<std::size_t>(o), g);
        for (int p = 0; p < c; ++p) {
          if (vn->requires_grad)
            detail::accum(vn, static_cast<std::size_t>(p),
                          g * wn->values[static_cast<std::size_t>(o) * c + p]);
          if (wn->requires_grad)
            detail::accum(wn, static_cast<std::size_t>(o) * c + p,
                          g * vn->values[static_cast<std::size_t>(p)]);
        }
      }
    });
  }
  return out;
}

// ---- softmax ---------------------------------------------------------------

namespace detail {

// Softmax of one contiguous stride-1 slice, shift-stabilized.
inline void softmax_slice(const double* x, double* y, int n, double invt) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp((x[i] - mx) * invt);
    z += y[i];
  }
  const double inv = 1.0 / z;
  for (int i = 0; i < n; ++i) y[i] *= inv;
}

}  // namespace detail

// Temperature softmax over a rank-1 tensor: softmax(x / t).
inline Tensor softmax(const Tensor& x, double temperature = 1.0) {
  if (x.rank() != 1) throw std::invalid_argument("softmax: rank-1 input expected");
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be > 0");
  const int n = x.extent(0);
  Tensor out(Shape{n});
  detail::softmax_slice(x.data().data(), out.data().data(), n, 1.0 / temperature);
  if (detail::track({&x})) {
    out.set_requires_grad(true);
    auto xn = x.handle(), on = out.handle();
    const double invt = 1.0 / temperature;
    GradTape::record(on, [xn, on, n, invt] {
      if (on->grad.empty()) return;
      double inner = 0.0;
      for (int i = 0; i < n; ++i) inner += on->grad[i] * on->values[i];
      for (int i = 0; i < n; ++i)
        detail::accum(xn, i, invt * on->values[i] * (on->grad[i] - inner));
    });
  }
  return out;
}

// Row-wise softmax of a matrix; each row is normalized independently.
inline Tensor softmax_rows(const Tensor& x, double temperature = 1.0) {
  if (x.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 input expected");
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax_rows: temperature must be > 0");
  const int r = x.extent(0), c = x.extent(1);
  Tensor out(Shape{r, c});
  for (int i = 0; i < r; ++i)
    detail::softmax_slice(x.data().data() + static_cast<std::size_t>(i) * c,
                          out.data().data() + static_cast<std::size_t>(i) * c, c,
                          1.0 / temperature);
  if (detail::track({&x})) {
    out.set_requires_grad(true);
    auto xn = x.handle(), on = out.handle();
    const double invt = 1.0 / temperature;
    GradTape::record(on, [xn, on, r, c, invt] {
      if (on->grad.empty()) return;
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        double inner = 0.0;
        for (int j = 0; j < c; ++j) inner += on->grad[base + j] * on->values[base + j];
        for (int j = 0; j < c; ++j)
          detail::accum(xn, base + j,
                        invt * on->values[base + j] * (on->grad[base + j] - inner));
      }
    });
  }
  return out;
}

inline Tensor softmax_cols(const Tensor& x, double temperature = 1.0) {
  return transpose2(softmax_rows(transpose2(x), temperature));
}

// ---- structural ------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out = Tensor::from_data(std::move(shape), {a.data().begin(), a.data().end()});
  if (detail::track({&a})) {
    out.set_requires_grad(true);
    auto an = a.handle(), on = out.handle();
    GradTape::record(on, [an, on] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) detail::accum(an, i, on->grad[i]);
    });
  }
  return out;
}

// Stack equal-shape rank-1 tensors into rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
  const int c = rows[0].extent(0);
  for (const Tensor& r : rows)
    if (r.rank() != 1 || r.extent(0) != c)
      throw std::invalid_argument("stack_rows: rows must share shape");
  const int n = static_cast<int>(rows.size());
  Tensor out(Shape{n, c});
  for (int i = 0; i < n; ++i)
    std::copy(rows[i].data().begin(), rows[i].data().end(),
              out.data().begin() + static_cast<std::size_t>(i) * c);
  bool any = false;
  for (const Tensor& r : rows) any = any || r.requires_grad();
  if (any && GradTape::active()) {
    out.set_requires_grad(true);
    std::vector<detail::NodePtr> ins;
    ins.reserve(rows.size());
    for (const Tensor& r : rows) ins.push_back(r.handle());
    auto on = out.handle();
    GradTape::record(on, [ins, on, c] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        for (int j = 0; j < c; ++j) detail::accum(ins[i], j, on->grad[i * c + j]);
      }
    });
  }
  return out;
}

// Concatenate rank-2 tensors with equal column counts along rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int c = parts[0].extent(1);
  int n = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.extent(1) != c)
      throw std::invalid_argument("concat_rows: column counts must match");
    n += p.extent(0);
  }
  Tensor out(Shape{n, c});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
    off += static_cast<std::size_t>(p.size());
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (any && GradTape::active()) {
    out.set_requires_grad(true);
    std::vector<detail::NodePtr> ins;
    for (const Tensor& p : parts) ins.push_back(p.handle());
    auto on = out.handle();
    GradTape::record(on, [ins, on] {
      if (on->grad.empty()) return;
      std::size_t off2 = 0;
      for (const auto& in : ins) {
        if (in->requires_grad)
          for (std::size_t i = 0; i < in->values.size(); ++i)
            detail::accum(in, i, on->grad[off2 + i]);
        off2 += in->values.size();
      }
    });
  }
  return out;
}

// Rows [begin, end) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, int begin, int end) {
  if (x.rank() != 2) throw std::invalid_argument("slice_rows: rank-2 input expected");
  if (begin < 0 || end > x.extent(0) || begin >= end)
    throw std::invalid_argument("slice_rows: bad row range");
  const int c = x.extent(1);
  Tensor out(Shape{end - begin, c});
  std::copy(x.data().begin() + static_cast<std::size_t>(begin) * c,
            x.data().begin() + static_cast<std::size_t>(end) * c, out.data().begin());
  if (detail::track({&x})) {
    out.set_requires_grad(true);
    auto xn = x.handle(), on = out.handle();
    GradTape::record(on, [xn, on, begin, c] {
      if (on->grad.empty()) return;
      const std::size_t base = static_cast<std::size_t>(begin) * c;
      for (std::size_t i = 0; i < on->grad.size(); ++i) detail::accum(xn, base + i, on->grad[i]);
    });
  }
  return out;
}

inline Tensor gather_diag(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("gather_diag: rank-2 input expected");
  const int n = std::min(m.extent(0), m.extent(1));
  Tensor out(Shape{n});
  for (int i = 0; i < n; ++i) out.at(i) = m.at(i, i);
  if (detail::track({&m})) {
    out.set_requires_grad(true);
    auto mn = m.handle(), on = out.handle();
    const int c = m.extent(1);
    GradTape::record(on, [mn, on, n, c] {
      if (on->grad.empty()) return;
      for (int i = 0; i < n; ++i)
        detail::accum(mn, static_cast<std::size_t>(i) * c + i, on->grad[i]);
    });
  }
  return out;
}

inline Tensor gather_entries(const Tensor& m, const std::vector<std::pair<int, int>>& idx) {
  if (m.rank() != 2) throw std::invalid_argument("gather_entries: rank-2 input expected");
  if (idx.empty()) throw std::invalid_argument("gather_entries: empty index list");
  const int r = m.extent(0), c = m.extent(1);
  Tensor out(Shape{static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto [a, b] = idx[i];
    if (a < 0 || a >= r || b < 0 || b >= c)
      throw std::invalid_argument("gather_entries: index out of range");
    out.at(static_cast<int>(i)) = m.at(a, b);
  }
  if (detail::track({&m})) {
    out.set_requires_grad(true);
    auto mn = m.handle(), on = out.handle();
    GradTape::record(on, [mn, on, idx, c] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < idx.size(); ++i)
        detail::accum(mn, static_cast<std::size_t>(idx[i].first) * c + idx[i].second,
                      on->grad[i]);
    });
  }
  return out;
}

// Rows rescaled to unit Euclidean norm (guarded against zero rows).
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
  if (x.rank() != 2) throw std::invalid_argument("l2_normalize_rows: rank-2 input expected");
  const int n = x.extent(0), c = x.extent(1);
  Tensor out(Shape{n, c});
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += x.at(i, j) * x.at(i, j);
    const double nm = std::sqrt(s) + eps;
    norms[static_cast<std::size_t>(i)] = nm;
    for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) / nm;
  }
  if (detail::track({&x})) {
    out.set_requires_grad(true);
    auto xn = x.handle(), on = out.handle();
    GradTape::record(on, [xn, on, norms, n, c] {
      if (on->grad.empty()) return;
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        const double inv = 1.0 / norms[static_cast<std::size_t>(i)];
        double inner = 0.0;
        for (int j = 0; j < c; ++j) inner += on->grad[base + j] * on->values[base + j];
        for (int j = 0; j < c; ++j)
          detail::accum(xn, base + j, inv * (on->grad[base + j] - inner * on->values[base + j]));
      }
    });
  }
  return out;
}

// ---- operator sugar --------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_const(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_const(a, -c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace defmatch
