#pragma once
// Dense row-major double tensors plus a tape for reverse-mode differentiation.
//
// A Tensor is a shared handle to its storage; copies alias the same values and
// gradient buffer, which is what lets a backward closure reach the leaves it
// saw during the forward pass.  Operations record their backward closure on
// the innermost live GradTape of the current thread; with no tape alive every
// operation is a plain value computation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace defmatch {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Canonical draws so seeded streams do not depend on the standard library's
// distribution internals.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double normal01(std::mt19937_64& rng) {
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // sized on first accumulation

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false) {
    node_ = std::make_shared<detail::TensorNode>();
    node_->values.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw std::invalid_argument("from_data: value count does not match " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.node_->values) v = lo + (hi - lo) * uniform01(rng);
    return t;
  }

  static Tensor normal(Shape shape, double mean, double stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.node_->values) v = mean + stddev * normal01(rng);
    return t;
  }

  static Tensor uniform(Shape shape, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return uniform(std::move(shape), lo, hi, rng);
  }

  static Tensor normal(Shape shape, double mean, double stddev, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return normal(std::move(shape), mean, stddev, rng);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int extent(int d) const { return node_->shape.at(static_cast<std::size_t>(d)); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }

  std::span<double> data() { return node_->values; }
  std::span<const double> data() const { return node_->values; }

  double value() const {
    if (size() != 1) throw std::invalid_argument("value() needs a one-element tensor");
    return node_->values[0];
  }

  double& at(int i) { return node_->values[static_cast<std::size_t>(i)]; }
  double at(int i) const { return node_->values[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return node_->values[flat(i, j)]; }
  double at(int i, int j) const { return node_->values[flat(i, j)]; }
  double& at(int i, int j, int k) { return node_->values[flat(i, j, k)]; }
  double at(int i, int j, int k) const { return node_->values[flat(i, j, k)]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  // Gradient accumulated by the last backward pass; zeros if none reached it.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->values.size(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Value copy detached from gradient tracking.
  Tensor detached() const {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    return t;
  }

  Tensor clone() const {
    Tensor t = detached();
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool all_finite() const {
    for (double v : node_->values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  detail::TensorNode* node() const { return node_.get(); }
  const detail::NodePtr& handle() const { return node_; }

 private:
  std::size_t flat(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(node_->shape[1]) +
           static_cast<std::size_t>(j);
  }
  std::size_t flat(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * static_cast<std::size_t>(node_->shape[1]) +
            static_cast<std::size_t>(j)) *
               static_cast<std::size_t>(node_->shape[2]) +
           static_cast<std::size_t>(k);
  }

  detail::NodePtr node_;
};

// Ordered record of backward closures for one forward pass.  Tapes nest per
// thread; operations record on the innermost one.  Replaying in reverse order
// is a valid topological order because outputs are fresh nodes.
class GradTape {
 public:
  GradTape() { stack().push_back(this); }
  ~GradTape() { stack().pop_back(); }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return stack().empty() ? nullptr : stack().back(); }

  // `out` is the node the closure writes from; its gradient buffer is cleared
  // before every replay so repeated backward calls accumulate only in leaves.
  static void record(const detail::NodePtr& out, std::function<void()> fn) {
    if (GradTape* t = active()) t->entries_.push_back({out, std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }

  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward expects a scalar loss");
    if (!std::isfinite(loss.value())) throw std::runtime_error("backward on non-finite loss");
    if (!loss.requires_grad()) return;  // nothing reachable requires grad
    for (auto& e : entries_) e.out->grad.clear();
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  }

 private:
  struct Entry {
    detail::NodePtr out;
    std::function<void()> fn;
  };
  static std::vector<GradTape*>& stack() {
    thread_local std::vector<GradTape*> s;
    return s;
  }
  std::vector<Entry> entries_;
};

namespace detail {

// requires_grad propagates to an op output only while a tape is listening.
inline bool track(std::initializer_list<const Tensor*> inputs) {
  if (!GradTape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline void accum(const NodePtr& n, std::size_t i, double v) {
  n->ensure_grad();
  n->grad[i] += v;
}

// Gradient of the op output; empty span when nothing flowed into it.
inline std::span<const double> out_grad(const NodePtr& n) {
  return n->grad;
}

}  // namespace detail

}  // namespace defmatch
