#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "lesionaware/errors.hpp"
#include "lesionaware/interp.hpp"

namespace lesionaware {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename S>
void check_finite(const char* op, const std::vector<S>& v) {
  for (const S x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NumericError(std::string(op) + ": non-finite value produced");
    }
  }
}

// Sum in ascending value order. Used by the pooling reductions whose outputs
// must be invariant, bit for bit, under permutations of their inputs.
template <typename S>
S ordered_sum(std::vector<S>& scratch) {
  std::sort(scratch.begin(), scratch.end());
  S acc = S(0);
  for (const S x : scratch) acc += x;
  return acc;
}

}  // namespace detail

// Scoped disable of graph recording (forward-only evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// One node of the recorded computation: a value buffer plus, when the node was
// produced by a primitive under gradient tracking, its parents and the adjoint
// step that scatters this node's gradient into theirs. Parents always precede
// their consumers, so a reverse traversal replays adjoints in valid order.
template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // allocated only while tracked
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  std::int64_t numel() const { return shape_numel(shape); }

  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), S(0));
    return grad;
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, S(0), requires_grad);
  }

  static Tensor filled(const Shape& shape, S value, bool requires_grad = false) {
    validate_shape(shape);
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = shape;
    node->values.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->values.size(), S(0));
    return Tensor(std::move(node));
  }

  static Tensor from_vector(const Shape& shape, std::vector<S> values, bool requires_grad = false) {
    validate_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw DimensionError("tensor: data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    detail::check_finite("tensor", values);
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = shape;
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->values.size(), S(0));
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Ref-qualified so iterating over a temporary's values cannot dangle.
  const std::vector<S>& values() const& { return node_->values; }
  std::vector<S> values() const&& { return node_->values; }
  std::vector<S>& mutable_values() { return node_->values; }

  // Gradient buffer; zeros when nothing has been accumulated yet.
  std::vector<S> grad() const {
    if (node_->grad.empty()) return std::vector<S>(node_->values.size(), S(0));
    return node_->grad;
  }

  // Handle semantics: mutates the shared node, so const on the handle.
  void zero_grad() const {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw UsageError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->values[0];
  }

  S at(const Shape& index) const { return node_->values[flat_index(index)]; }
  S& at_mut(const Shape& index) { return node_->values[flat_index(index)]; }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

  // In-place overwrite of values; only meaningful for leaves (parameters).
  void assign_values(const std::vector<S>& v) const {
    if (v.size() != node_->values.size()) throw DimensionError("assign: size mismatch");
    detail::check_finite("assign", v);
    node_->values = v;
  }

  Tensor detach() const {
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = node_->shape;
    node->values = node_->values;
    node->requires_grad = false;
    return Tensor(std::move(node));
  }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<S>> node) : node_(std::move(node)) {}

  static void validate_shape(const Shape& shape) {
    for (int d : shape) {
      if (d <= 0) throw DimensionError("tensor: non-positive dimension in " + shape_str(shape));
    }
  }

  std::size_t flat_index(const Shape& index) const {
    if (index.size() != node_->shape.size()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0 || index[i] >= node_->shape[i]) throw DimensionError("index out of range");
      flat = flat * static_cast<std::size_t>(node_->shape[i]) + static_cast<std::size_t>(index[i]);
    }
    return flat;
  }

  template <typename T>
  friend class OpBuilder;

  std::shared_ptr<TensorNode<S>> node_;
};

// Helper for defining primitives: collects parents, decides tracking, and
// wires the adjoint closure.
template <typename S>
class OpBuilder {
 public:
  explicit OpBuilder(const char* name) : name_(name) {}

  OpBuilder& input(const Tensor<S>& t) {
    parents_.push_back(t.node());
    tracked_ = tracked_ || t.requires_grad();
    return *this;
  }

  Tensor<S> finish(Shape shape, std::vector<S> values, std::function<void(TensorNode<S>&)> backprop) {
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    if (grad_enabled() && tracked_) {
      node->requires_grad = true;
      node->parents = parents_;
      node->backprop = std::move(backprop);
    }
    return Tensor<S>(std::move(node));
  }

  bool tracked() const { return grad_enabled() && tracked_; }
  const char* name() const { return name_; }

 private:
  const char* name_;
  std::vector<std::shared_ptr<TensorNode<S>>> parents_;
  bool tracked_ = false;
};

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls until explicitly zeroed; gradients of produced (interior) nodes are
// recomputed fresh on every sweep, so repeated backward calls add the same
// leaf gradient each time.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward: loss must be a defined scalar");
  }
  auto* root = loss.node().get();
  if (!root->requires_grad) return;  // nothing tracked below

  // Iterative post-order over parents; each node visited exactly once.
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> done;
  std::unordered_set<TensorNode<S>*> in_stack;
  struct Frame {
    TensorNode<S>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack{{root, 0}};
  in_stack.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode<S>* p = f.node->parents[f.next_parent++].get();
      if (done.count(p) || !p->requires_grad) continue;
      if (in_stack.count(p)) throw InternalError("backward: cycle in computation record");
      in_stack.insert(p);
      stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      done.insert(f.node);
      in_stack.erase(f.node);
      stack.pop_back();
    }
  }

  for (TensorNode<S>* n : order) {
    if (n->backprop) std::fill(n->grad_buffer().begin(), n->grad_buffer().end(), S(0));
  }
  root->grad_buffer()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// broadcasting elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with zeros on broadcast dimensions, right-aligned to rank r.
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - s.size());
    strides[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= s[i];
  }
  return strides;
}

struct BroadcastIter {
  Shape out_shape;
  std::vector<std::int64_t> sa, sb;
  // Calls fn(out_index, a_index, b_index) for every output element in row-major order.
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const std::size_t r = out_shape.size();
    std::vector<int> idx(r, 0);
    std::int64_t ia = 0, ib = 0;
    const std::int64_t total = shape_numel(out_shape);
    for (std::int64_t o = 0; o < total; ++o) {
      fn(o, ia, ib);
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < out_shape[d]) break;
        idx[d] = 0;
        ia -= sa[d] * out_shape[d];
        ib -= sb[d] * out_shape[d];
      }
    }
  }
};

inline BroadcastIter make_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastIter it;
  it.out_shape = broadcast_shape(a, b, op);
  it.sa = broadcast_strides(a, it.out_shape);
  it.sb = broadcast_strides(b, it.out_shape);
  return it;
}

}  // namespace detail

template <typename S, typename Fwd, typename BwdA, typename BwdB>
Tensor<S> binary_elementwise(const char* name, const Tensor<S>& a, const Tensor<S>& b, Fwd fwd,
                             BwdA bwd_a, BwdB bwd_b) {
  const auto iter = detail::make_broadcast(a.shape(), b.shape(), name);
  std::vector<S> out(static_cast<std::size_t>(shape_numel(iter.out_shape)));
  const auto& av = a.values();
  const auto& bv = b.values();
  iter.for_each([&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
    out[static_cast<std::size_t>(o)] = fwd(av[static_cast<std::size_t>(ia)], bv[static_cast<std::size_t>(ib)]);
  });
  detail::check_finite(name, out);

  OpBuilder<S> op(name);
  op.input(a).input(b);
  auto an = a.node();
  auto bn = b.node();
  return op.finish(iter.out_shape, std::move(out), [iter, an, bn, bwd_a, bwd_b](TensorNode<S>& self) {
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    auto* ga = need_a ? &an->grad_buffer() : nullptr;
    auto* gb = need_b ? &bn->grad_buffer() : nullptr;
    iter.for_each([&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      const S g = self.grad[static_cast<std::size_t>(o)];
      const S x = an->values[static_cast<std::size_t>(ia)];
      const S y = bn->values[static_cast<std::size_t>(ib)];
      if (ga) (*ga)[static_cast<std::size_t>(ia)] += bwd_a(g, x, y);
      if (gb) (*gb)[static_cast<std::size_t>(ib)] += bwd_b(g, x, y);
    });
  });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_elementwise<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_elementwise<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_elementwise<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
      [](S g, S x, S) { return g * x; });
}

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_elementwise(const char* name, const Tensor<S>& x, Fwd fwd, Bwd bwd,
                            bool check = true) {
  std::vector<S> out(x.values().size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  if (check) detail::check_finite(name, out);

  OpBuilder<S> op(name);
  op.input(x);
  auto xn = x.node();
  return op.finish(x.shape(), std::move(out), [xn, bwd](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += bwd(self.grad[i], xn->values[i], self.values[i]);
    }
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return unary_elementwise<S>(
      "add_scalar", x, [c](S v) { return v + c; }, [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& x, S c) {
  return unary_elementwise<S>(
      "mul_scalar", x, [c](S v) { return v * c; }, [c](S g, S, S) { return g * c; });
}

// c - x
template <typename S>
Tensor<S> rsub_scalar(S c, const Tensor<S>& x) {
  return unary_elementwise<S>(
      "rsub_scalar", x, [c](S v) { return c - v; }, [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary_elementwise<S>(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](S g, S v, S) { return v > S(0) ? g : S(0); }, /*check=*/false);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary_elementwise<S>(
      "sigmoid", x,
      [](S v) {
        // branch avoids exp overflow on large negative inputs
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S g, S, S y) { return g * y * (S(1) - y); }, /*check=*/false);
}

template <typename S>
Tensor<S> log_op(const Tensor<S>& x) {
  return unary_elementwise<S>(
      "log", x, [](S v) { return std::log(v); }, [](S g, S v, S) { return g / v; });
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo must be <= hi");
  return unary_elementwise<S>(
      "clamp", x, [lo, hi](S v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](S g, S v, S) { return (v >= lo && v <= hi) ? g : S(0); }, /*check=*/false);
}

// ---------------------------------------------------------------------------
// reductions and reshaping
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = S(0);
  for (const S v : x.values()) acc += v;
  std::vector<S> out{acc};
  detail::check_finite("sum", out);
  OpBuilder<S> op("sum");
  op.input(x);
  auto xn = x.node();
  return op.finish({1}, std::move(out), [xn](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    const S go = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.numel());
  S acc = S(0);
  for (const S v : x.values()) acc += v;
  std::vector<S> out{acc * inv};
  detail::check_finite("mean", out);
  OpBuilder<S> op("mean");
  op.input(x);
  auto xn = x.node();
  return op.finish({1}, std::move(out), [xn, inv](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    const S go = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  OpBuilder<S> op("reshape");
  op.input(x);
  auto xn = x.node();
  std::vector<S> out = x.values();
  return op.finish(shape, std::move(out), [xn](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  const int r = static_cast<int>(ref.size());
  if (axis < 0 || axis >= r) throw DimensionError("concat: axis out of range");
  Shape out_shape = ref;
  int axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != r) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != axis && s[d] != ref[d]) {
        throw DimensionError("concat: shape mismatch at non-concat dimension");
      }
    }
    axis_total += s[axis];
  }
  out_shape[axis] = axis_total;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= ref[d];
  for (int d = axis + 1; d < r; ++d) inner *= ref[d];

  std::vector<S> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets(parts.size());
  {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      const std::int64_t len = parts[p].shape()[axis] * inner;
      const auto& pv = parts[p].values();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(pv.begin() + o * len, len, out.begin() + o * (axis_total * inner) + off);
      }
      off += len;
    }
  }

  OpBuilder<S> op("concat");
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  for (const auto& p : parts) {
    op.input(p);
    nodes.push_back(p.node());
  }
  return op.finish(out_shape, std::move(out),
                   [nodes, offsets, outer, inner, axis_total](TensorNode<S>& self) {
                     (void)inner;
                     for (std::size_t p = 0; p < nodes.size(); ++p) {
                       if (!nodes[p]->requires_grad) continue;
                       auto& g = nodes[p]->grad_buffer();
                       const std::int64_t part_len = static_cast<std::int64_t>(g.size()) / outer;
                       for (std::int64_t o = 0; o < outer; ++o) {
                         const auto* src = self.grad.data() + o * (axis_total * inner) + offsets[p];
                         auto* dst = g.data() + o * part_len;
                         for (std::int64_t i = 0; i < part_len; ++i) dst[i] += src[i];
                       }
                     }
                   });
}

template <typename S>
Tensor<S> narrow(const Tensor<S>& x, int axis, int start, int len) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0 || axis >= r) throw DimensionError("narrow: axis out of range");
  if (start < 0 || len <= 0 || start + len > s[axis]) throw DimensionError("narrow: range out of bounds");
  Shape out_shape = s;
  out_shape[axis] = len;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < r; ++d) inner *= s[d];

  std::vector<S> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + (o * s[axis] + start) * inner, len * inner, out.begin() + o * len * inner);
  }

  OpBuilder<S> op("narrow");
  op.input(x);
  auto xn = x.node();
  const std::int64_t axis_len = s[axis];
  return op.finish(out_shape, std::move(out),
                   [xn, outer, inner, axis_len, start, len](TensorNode<S>& self) {
                     auto& g = xn->grad_buffer();
                     for (std::int64_t o = 0; o < outer; ++o) {
                       const auto* src = self.grad.data() + o * len * inner;
                       auto* dst = g.data() + (o * axis_len + start) * inner;
                       for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                     }
                   });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < r; ++d) inner *= s[d];
  const int n = s[axis];

  std::vector<S> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      S mx = xv[base];
      for (int k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      S denom = S(0);
      for (int k = 0; k < n; ++k) {
        const S e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        denom += e;
      }
      for (int k = 0; k < n; ++k) out[base + k * inner] /= denom;
    }
  }
  detail::check_finite("softmax", out);

  OpBuilder<S> op("softmax");
  op.input(x);
  auto xn = x.node();
  return op.finish(x.shape(), std::move(out), [xn, outer, inner, n](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * n * inner + in;
        S dot = S(0);
        for (int k = 0; k < n; ++k) dot += self.grad[base + k * inner] * self.values[base + k * inner];
        for (int k = 0; k < n; ++k) {
          const std::int64_t i = base + k * inner;
          g[i] += self.values[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<std::size_t>(m) * n, S(0));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const S x = av[i * k + kk];
      const S* brow = bv.data() + static_cast<std::size_t>(kk) * n;
      S* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  detail::check_finite("matmul", out);

  OpBuilder<S> op("matmul");
  op.input(a).input(b);
  auto an = a.node();
  auto bn = b.node();
  return op.finish({m, n}, std::move(out), [an, bn, m, k, n](TensorNode<S>& self) {
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          S acc = S(0);
          const S* grow = self.grad.data() + static_cast<std::size_t>(i) * n;
          const S* brow = bn->values.data() + static_cast<std::size_t>(kk) * n;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + kk] += acc;
        }
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i) {
          const S x = an->values[i * k + kk];
          const S* grow = self.grad.data() + static_cast<std::size_t>(i) * n;
          S* gbrow = gb.data() + static_cast<std::size_t>(kk) * n;
          for (int j = 0; j < n; ++j) gbrow[j] += x * grow[j];
        }
    }
  });
}

// Fully-connected layer: x [N,F], weight [K,F], bias [K] (optional) -> [N,K].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(weight.shape()));
  }
  const int n = x.dim(0), f = x.dim(1), k = weight.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != k)) {
    throw DimensionError("linear: bias shape mismatch");
  }
  std::vector<S> out(static_cast<std::size_t>(n) * k);
  const auto& xv = x.values();
  const auto& wv = weight.values();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      S acc = has_bias ? bias.values()[j] : S(0);
      const S* xrow = xv.data() + static_cast<std::size_t>(i) * f;
      const S* wrow = wv.data() + static_cast<std::size_t>(j) * f;
      for (int q = 0; q < f; ++q) acc += xrow[q] * wrow[q];
      out[i * k + j] = acc;
    }
  }
  detail::check_finite("linear", out);

  OpBuilder<S> op("linear");
  op.input(x).input(weight);
  if (has_bias) op.input(bias);
  auto xn = x.node();
  auto wn = weight.node();
  auto bnode = has_bias ? bias.node() : nullptr;
  return op.finish({n, k}, std::move(out), [xn, wn, bnode, n, f, k](TensorNode<S>& self) {
    if (xn->requires_grad) {
      auto& gx = xn->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int q = 0; q < f; ++q) {
          S acc = S(0);
          for (int j = 0; j < k; ++j) acc += self.grad[i * k + j] * wn->values[j * f + q];
          gx[i * f + q] += acc;
        }
    }
    if (wn->requires_grad) {
      auto& gw = wn->grad_buffer();
      for (int j = 0; j < k; ++j)
        for (int q = 0; q < f; ++q) {
          S acc = S(0);
          for (int i = 0; i < n; ++i) acc += self.grad[i * k + j] * xn->values[i * f + q];
          gw[j * f + q] += acc;
        }
    }
    if (bnode && bnode->requires_grad) {
      auto& gb = bnode->grad_buffer();
      for (int j = 0; j < k; ++j) {
        S acc = S(0);
        for (int i = 0; i < n; ++i) acc += self.grad[i * k + j];
        gb[j] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// 2-d cross-correlation (no kernel flip), square kernel, symmetric padding.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias, int stride,
                 int padding) {
  if (input.rank() != 4) throw DimensionError("conv2d: input must be [N,C,H,W]");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw DimensionError("conv2d: weight must be [C_out,C_in,k,k]");
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, got " + std::to_string(cin));
  }
  if (k > h + 2 * padding || k > w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " exceeds padded input " +
                         std::to_string(h + 2 * padding) + "x" + std::to_string(w + 2 * padding));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias shape mismatch");
  }
  const int oh = (h + 2 * padding - k) / stride + 1;
  const int ow = (w + 2 * padding - k) / stride + 1;

  std::vector<S> out(static_cast<std::size_t>(n) * cout * oh * ow);
  const auto& xv = input.values();
  const auto& wv = weight.values();

  // Valid output ranges for a given kernel offset, so inner loops stay branch-free.
  const auto out_range = [&](int kk, int in_size, int out_size) {
    int lo = 0;
    while (lo < out_size && lo * stride + kk - padding < 0) ++lo;
    int hi = out_size - 1;
    while (hi >= 0 && hi * stride + kk - padding >= in_size) --hi;
    return std::pair<int, int>(lo, hi);
  };
  std::vector<std::pair<int, int>> row_range(k), col_range(k);
  for (int kk = 0; kk < k; ++kk) {
    row_range[kk] = out_range(kk, h, oh);
    col_range[kk] = out_range(kk, w, ow);
  }

  for (int ni = 0; ni < n; ++ni) {
    for (int oc = 0; oc < cout; ++oc) {
      S* oplane = out.data() + (static_cast<std::size_t>(ni) * cout + oc) * oh * ow;
      const S b = bias.defined() ? bias.values()[oc] : S(0);
      std::fill(oplane, oplane + static_cast<std::size_t>(oh) * ow, b);
      for (int ic = 0; ic < cin; ++ic) {
        const S* iplane = xv.data() + (static_cast<std::size_t>(ni) * cin + ic) * h * w;
        const S* wplane = wv.data() + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
        for (int kh = 0; kh < k; ++kh) {
          const auto [r_lo, r_hi] = row_range[kh];
          for (int kw = 0; kw < k; ++kw) {
            const S wval = wplane[kh * k + kw];
            const auto [c_lo, c_hi] = col_range[kw];
            for (int oy = r_lo; oy <= r_hi; ++oy) {
              const int iy = oy * stride + kh - padding;
              const S* irow = iplane + static_cast<std::size_t>(iy) * w + (kw - padding);
              S* orow = oplane + static_cast<std::size_t>(oy) * ow;
              for (int ox = c_lo; ox <= c_hi; ++ox) orow[ox] += wval * irow[ox * stride];
            }
          }
        }
      }
    }
  }
  detail::check_finite("conv2d", out);

  OpBuilder<S> op("conv2d");
  op.input(input).input(weight);
  if (bias.defined()) op.input(bias);
  auto xn = input.node();
  auto wn = weight.node();
  auto bnode = bias.defined() ? bias.node() : nullptr;
  return op.finish(
      {n, cout, oh, ow}, std::move(out),
      [xn, wn, bnode, n, cin, cout, h, w, k, oh, ow, stride, padding](TensorNode<S>& self) {
        const auto& g = self.grad;
        if (bnode && bnode->requires_grad) {
          auto& gb = bnode->grad_buffer();
          for (int oc = 0; oc < cout; ++oc) {
            S acc = S(0);
            for (int ni = 0; ni < n; ++ni) {
              const S* gplane = g.data() + (static_cast<std::size_t>(ni) * cout + oc) * oh * ow;
              for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i) acc += gplane[i];
            }
            gb[oc] += acc;
          }
        }
        if (wn->requires_grad) {
          auto& gw = wn->grad_buffer();
          for (int oc = 0; oc < cout; ++oc) {
            for (int ic = 0; ic < cin; ++ic) {
              S* gwplane = gw.data() + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
              for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                  S acc = S(0);
                  for (int ni = 0; ni < n; ++ni) {
                    const S* gplane = g.data() + (static_cast<std::size_t>(ni) * cout + oc) * oh * ow;
                    const S* iplane =
                        xn->values.data() + (static_cast<std::size_t>(ni) * cin + ic) * h * w;
                    for (int oy = 0; oy < oh; ++oy) {
                      const int iy = oy * stride + kh - padding;
                      if (iy < 0 || iy >= h) continue;
                      for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kw - padding;
                        if (ix < 0 || ix >= w) continue;
                        acc += gplane[oy * ow + ox] * iplane[iy * w + ix];
                      }
                    }
                  }
                  gwplane[kh * k + kw] += acc;
                }
              }
            }
          }
        }
        if (xn->requires_grad) {
          auto& gx = xn->grad_buffer();
          for (int ni = 0; ni < n; ++ni) {
            for (int oc = 0; oc < cout; ++oc) {
              const S* gplane = g.data() + (static_cast<std::size_t>(ni) * cout + oc) * oh * ow;
              for (int ic = 0; ic < cin; ++ic) {
                S* gxplane = gx.data() + (static_cast<std::size_t>(ni) * cin + ic) * h * w;
                const S* wplane =
                    wn->values.data() + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
                for (int kh = 0; kh < k; ++kh) {
                  for (int kw = 0; kw < k; ++kw) {
                    const S wval = wplane[kh * k + kw];
                    for (int oy = 0; oy < oh; ++oy) {
                      const int iy = oy * stride + kh - padding;
                      if (iy < 0 || iy >= h) continue;
                      for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kw - padding;
                        if (ix < 0 || ix >= w) continue;
                        gxplane[iy * w + ix] += wval * gplane[oy * ow + ox];
                      }
                    }
                  }
                }
              }
            }
          }
        }
      });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, int stride, int padding) {
  return conv2d(input, weight, Tensor<S>(), stride, padding);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

enum class PoolKind { kMax, kAvg };

// Non-overlapping window pooling; window must divide both spatial dimensions.
template <typename S>
Tensor<S> pool2d(const Tensor<S>& x, PoolKind kind, int window) {
  if (x.rank() != 4) throw DimensionError("pool2d: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window < 1 || window > h || window > w) {
    throw DimensionError("pool2d: window " + std::to_string(window) + " exceeds input " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  if (h % window != 0 || w % window != 0) {
    throw DimensionError("pool2d: window must divide spatial dimensions");
  }
  const int oh = h / window, ow = w / window;
  std::vector<S> out(static_cast<std::size_t>(n) * c * oh * ow);
  std::vector<std::int64_t> argmax;
  if (kind == PoolKind::kMax) argmax.resize(out.size());
  const auto& xv = x.values();
  const S inv = S(1) / static_cast<S>(window * window);

  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t ibase = (static_cast<std::size_t>(ni) * c + ci) * h * w;
      const std::size_t obase = (static_cast<std::size_t>(ni) * c + ci) * oh * ow;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          if (kind == PoolKind::kMax) {
            std::int64_t best = ibase + static_cast<std::size_t>(oy * window) * w + ox * window;
            S mv = xv[best];
            for (int dy = 0; dy < window; ++dy)
              for (int dx = 0; dx < window; ++dx) {
                const std::int64_t idx = ibase + static_cast<std::size_t>(oy * window + dy) * w +
                                         (ox * window + dx);
                if (xv[idx] > mv) {
                  mv = xv[idx];
                  best = idx;
                }
              }
            out[obase + oy * ow + ox] = mv;
            argmax[obase + oy * ow + ox] = best;
          } else {
            S acc = S(0);
            for (int dy = 0; dy < window; ++dy)
              for (int dx = 0; dx < window; ++dx)
                acc += xv[ibase + static_cast<std::size_t>(oy * window + dy) * w + (ox * window + dx)];
            out[obase + oy * ow + ox] = acc * inv;
          }
        }
    }

  OpBuilder<S> op("pool2d");
  op.input(x);
  auto xn = x.node();
  if (kind == PoolKind::kMax) {
    return op.finish({n, c, oh, ow}, std::move(out), [xn, argmax](TensorNode<S>& self) {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[argmax[i]] += self.grad[i];
    });
  }
  const int win = window;
  return op.finish({n, c, oh, ow}, std::move(out), [xn, n, c, h, w, oh, ow, win, inv](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t ibase = (static_cast<std::size_t>(ni) * c + ci) * h * w;
        const std::size_t obase = (static_cast<std::size_t>(ni) * c + ci) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const S go = self.grad[obase + oy * ow + ox] * inv;
            for (int dy = 0; dy < win; ++dy)
              for (int dx = 0; dx < win; ++dx)
                g[ibase + static_cast<std::size_t>(oy * win + dy) * w + (ox * win + dx)] += go;
          }
      }
  });
}

// Global pooling over the spatial axes -> [N,C,1,1]. The average variant sums
// in ascending value order so the result is exactly invariant under any
// spatial permutation of its input.
template <typename S>
Tensor<S> global_pool2d(const Tensor<S>& x, PoolKind kind) {
  if (x.rank() != 4) throw DimensionError("global_pool2d: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<S> out(static_cast<std::size_t>(n) * c);
  std::vector<std::int64_t> argmax;
  if (kind == PoolKind::kMax) argmax.resize(out.size());
  const auto& xv = x.values();
  std::vector<S> scratch;

  for (std::int64_t pc = 0; pc < static_cast<std::int64_t>(n) * c; ++pc) {
    const S* p = xv.data() + pc * plane;
    if (kind == PoolKind::kMax) {
      std::int64_t best = 0;
      for (std::int64_t i = 1; i < plane; ++i)
        if (p[i] > p[best]) best = i;
      out[pc] = p[best];
      argmax[pc] = pc * plane + best;
    } else {
      scratch.assign(p, p + plane);
      out[pc] = detail::ordered_sum(scratch) / static_cast<S>(plane);
    }
  }

  OpBuilder<S> op("global_pool2d");
  op.input(x);
  auto xn = x.node();
  if (kind == PoolKind::kMax) {
    return op.finish({n, c, 1, 1}, std::move(out), [xn, argmax](TensorNode<S>& self) {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[argmax[i]] += self.grad[i];
    });
  }
  return op.finish({n, c, 1, 1}, std::move(out), [xn, plane](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    const S inv = S(1) / static_cast<S>(plane);
    for (std::size_t pc = 0; pc < self.grad.size(); ++pc) {
      const S go = self.grad[pc] * inv;
      S* dst = g.data() + pc * plane;
      for (std::int64_t i = 0; i < plane; ++i) dst[i] += go;
    }
  });
}

// Reduction over the channel axis only -> [N,1,H,W]. Average sums in ascending
// value order for exact channel-permutation invariance.
template <typename S>
Tensor<S> channel_pool(const Tensor<S>& x, PoolKind kind) {
  if (x.rank() != 4) throw DimensionError("channel_pool: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<S> out(static_cast<std::size_t>(n) * plane);
  std::vector<std::int64_t> argmax;
  if (kind == PoolKind::kMax) argmax.resize(out.size());
  const auto& xv = x.values();
  std::vector<S> scratch(static_cast<std::size_t>(c));

  for (int ni = 0; ni < n; ++ni) {
    const std::size_t nbase = static_cast<std::size_t>(ni) * c * plane;
    for (std::int64_t px = 0; px < plane; ++px) {
      if (kind == PoolKind::kMax) {
        std::int64_t best = nbase + px;
        S mv = xv[best];
        for (int ci = 1; ci < c; ++ci) {
          const std::int64_t idx = nbase + ci * plane + px;
          if (xv[idx] > mv) {
            mv = xv[idx];
            best = idx;
          }
        }
        out[ni * plane + px] = mv;
        argmax[ni * plane + px] = best;
      } else {
        for (int ci = 0; ci < c; ++ci) scratch[ci] = xv[nbase + ci * plane + px];
        out[ni * plane + px] = detail::ordered_sum(scratch) / static_cast<S>(c);
      }
    }
  }

  OpBuilder<S> op("channel_pool");
  op.input(x);
  auto xn = x.node();
  if (kind == PoolKind::kMax) {
    return op.finish({n, 1, h, w}, std::move(out), [xn, argmax](TensorNode<S>& self) {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[argmax[i]] += self.grad[i];
    });
  }
  return op.finish({n, 1, h, w}, std::move(out), [xn, n, c, plane](TensorNode<S>& self) {
    auto& g = xn->grad_buffer();
    const S inv = S(1) / static_cast<S>(c);
    for (int ni = 0; ni < n; ++ni)
      for (std::int64_t px = 0; px < plane; ++px) {
        const S go = self.grad[ni * plane + px] * inv;
        for (int ci = 0; ci < c; ++ci) g[(static_cast<std::size_t>(ni) * c + ci) * plane + px] += go;
      }
  });
}

// ---------------------------------------------------------------------------
// bilinear resize (corner-aligned)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& x, int out_h, int out_w) {
  if (x.rank() != 4) throw DimensionError("resize_bilinear: input must be [N,C,H,W]");
  if (out_h < 1 || out_w < 1) throw DimensionError("resize_bilinear: output size must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t planes = static_cast<std::int64_t>(n) * c;

  std::vector<interp::Taps> ty(out_h), tx(out_w);
  for (int oy = 0; oy < out_h; ++oy) ty[oy] = interp::taps(oy, h, out_h);
  for (int ox = 0; ox < out_w; ++ox) tx[ox] = interp::taps(ox, w, out_w);

  std::vector<S> out(static_cast<std::size_t>(planes) * out_h * out_w);
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < planes; ++p) {
    const S* ip = xv.data() + p * h * w;
    S* op_ = out.data() + p * static_cast<std::int64_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        const double v00 = static_cast<double>(ip[ty[oy].lo * w + tx[ox].lo]);
        const double v01 = static_cast<double>(ip[ty[oy].lo * w + tx[ox].hi]);
        const double v10 = static_cast<double>(ip[ty[oy].hi * w + tx[ox].lo]);
        const double v11 = static_cast<double>(ip[ty[oy].hi * w + tx[ox].hi]);
        const double top = v00 + (v01 - v00) * tx[ox].w_hi;
        const double bot = v10 + (v11 - v10) * tx[ox].w_hi;
        op_[oy * out_w + ox] = static_cast<S>(top + (bot - top) * ty[oy].w_hi);
      }
    }
  }

  OpBuilder<S> op("resize_bilinear");
  op.input(x);
  auto xn = x.node();
  return op.finish({n, c, out_h, out_w}, std::move(out),
                   [xn, planes, h, w, out_h, out_w, ty, tx](TensorNode<S>& self) {
                     auto& g = xn->grad_buffer();
                     for (std::int64_t p = 0; p < planes; ++p) {
                       S* gp = g.data() + p * h * w;
                       const S* go = self.grad.data() + p * static_cast<std::int64_t>(out_h) * out_w;
                       for (int oy = 0; oy < out_h; ++oy) {
                         const double wy = ty[oy].w_hi;
                         for (int ox = 0; ox < out_w; ++ox) {
                           const double wx = tx[ox].w_hi;
                           const double gv = static_cast<double>(go[oy * out_w + ox]);
                           gp[ty[oy].lo * w + tx[ox].lo] += static_cast<S>(gv * (1.0 - wy) * (1.0 - wx));
                           gp[ty[oy].lo * w + tx[ox].hi] += static_cast<S>(gv * (1.0 - wy) * wx);
                           gp[ty[oy].hi * w + tx[ox].lo] += static_cast<S>(gv * wy * (1.0 - wx));
                           gp[ty[oy].hi * w + tx[ox].hi] += static_cast<S>(gv * wy * wx);
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

enum class NormMode { kTrain, kEval };

template <typename S>
struct BatchNormState {
  std::vector<S> running_mean;
  std::vector<S> running_var;

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), S(0)),
        running_var(static_cast<std::size_t>(channels), S(1)) {}
};

// Per-channel normalization over [N,H,W]. Train mode uses batch statistics
// (population variance) and updates the running stats by
// running = (1-momentum)*running + momentum*batch.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     BatchNormState<S>& state, NormMode mode, double eps = 1e-5,
                     double momentum = 0.1) {
  if (x.rank() != 4) throw DimensionError("batch_norm: input must be [N,C,H,W]");
  if (eps <= 0.0) throw NumericError("batch_norm: eps must be > 0");
  if (momentum < 0.0 || momentum > 1.0) throw ConfigError("batch_norm: momentum must be in [0,1]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
    throw DimensionError("batch_norm: gamma/beta must be [C]");
  }
  if (static_cast<int>(state.running_mean.size()) != c) {
    throw DimensionError("batch_norm: running stats sized for " +
                         std::to_string(state.running_mean.size()) + " channels, input has " +
                         std::to_string(c));
  }
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t count = static_cast<std::int64_t>(n) * plane;

  std::vector<S> mean_c(c), inv_std_c(c);
  if (mode == NormMode::kTrain) {
    for (int ci = 0; ci < c; ++ci) {
      S acc = S(0);
      for (int ni = 0; ni < n; ++ni) {
        const S* p = x.values().data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      const S mu = acc / static_cast<S>(count);
      S var_acc = S(0);
      for (int ni = 0; ni < n; ++ni) {
        const S* p = x.values().data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const S d = p[i] - mu;
          var_acc += d * d;
        }
      }
      const S var = var_acc / static_cast<S>(count);
      mean_c[ci] = mu;
      inv_std_c[ci] = S(1) / std::sqrt(var + static_cast<S>(eps));
      state.running_mean[ci] =
          static_cast<S>((1.0 - momentum) * static_cast<double>(state.running_mean[ci]) +
                         momentum * static_cast<double>(mu));
      state.running_var[ci] =
          static_cast<S>((1.0 - momentum) * static_cast<double>(state.running_var[ci]) +
                         momentum * static_cast<double>(var));
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean_c[ci] = state.running_mean[ci];
      inv_std_c[ci] = S(1) / std::sqrt(state.running_var[ci] + static_cast<S>(eps));
    }
  }

  std::vector<S> out(x.values().size());
  std::vector<S> xhat(x.values().size());
  const auto& xv = x.values();
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
      const S mu = mean_c[ci], inv = inv_std_c[ci];
      const S gm = gamma.values()[ci], bt = beta.values()[ci];
      for (std::int64_t i = 0; i < plane; ++i) {
        const S xh = (xv[base + i] - mu) * inv;
        xhat[base + i] = xh;
        out[base + i] = gm * xh + bt;
      }
    }
  detail::check_finite("batch_norm", out);

  OpBuilder<S> op("batch_norm");
  op.input(x).input(gamma).input(beta);
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const bool train = mode == NormMode::kTrain;
  return op.finish(
      x.shape(), std::move(out),
      [xn, gn, bn, xhat = std::move(xhat), inv_std_c, n, c, plane, count, train](TensorNode<S>& self) {
        const auto& g = self.grad;
        for (int ci = 0; ci < c; ++ci) {
          S sum_g = S(0), sum_gx = S(0);
          for (int ni = 0; ni < n; ++ni) {
            const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * xhat[base + i];
            }
          }
          if (gn->requires_grad) gn->grad_buffer()[ci] += sum_gx;
          if (bn->requires_grad) bn->grad_buffer()[ci] += sum_g;
          if (xn->requires_grad) {
            auto& gx = xn->grad_buffer();
            const S gm = gn->values[ci];
            const S inv = inv_std_c[ci];
            const S inv_count = S(1) / static_cast<S>(count);
            for (int ni = 0; ni < n; ++ni) {
              const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                if (train) {
                  gx[base + i] +=
                      gm * inv * (g[base + i] - sum_g * inv_count - xhat[base + i] * sum_gx * inv_count);
                } else {
                  gx[base + i] += gm * inv * g[base + i];
                }
              }
            }
          }
        }
      });
}

}  // namespace lesionaware
