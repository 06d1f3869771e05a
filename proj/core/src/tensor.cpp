#include "lrgan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <mutex>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <cblas.h>

#include "lrgan/errors.hpp"

namespace lrgan {

// ---------------------------------------------------------------------------
// Shape utilities

std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    const std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw ValidationError("cannot broadcast shapes " + shape_str(a) + " and " +
                            shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace

// ---------------------------------------------------------------------------
// Node and grad mode

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<std::vector<Tensor>(const Tensor&)> backward;
  const char* op = "leaf";
};

}  // namespace detail

using detail::Node;

namespace {

thread_local int g_no_grad_depth = 0;
thread_local int g_force_grad_depth = 0;

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

}  // namespace

bool grad_enabled() { return g_force_grad_depth > 0 || g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
EnableGradGuard::EnableGradGuard() { ++g_force_grad_depth; }
EnableGradGuard::~EnableGradGuard() { --g_force_grad_depth; }

// Central op constructor: records parents and the backward closure only when
// grad mode is on and some parent participates in a graph.
Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<std::vector<Tensor>(const Tensor&)> backward) {
  auto n = make_leaf(std::move(shape), std::move(value));
  n->op = name;
  bool any_grad = false;
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        any_grad = true;
        break;
      }
    }
  }
  if (any_grad) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.unsafe_node()
                                                          ? std::shared_ptr<Node>(p.unsafe_node(), [](Node*) {})
                                                          : nullptr);
    // Hold strong references through the closure instead; the parents vector
    // above only records identity for traversal. To keep nodes alive we store
    // real shared_ptrs, so rebuild it properly below.
    n->parents.clear();
    for (const auto& p : parents) {
      n->parents.push_back(p.defined()
                               ? std::shared_ptr<Node>(p.unsafe_shared())
                               : nullptr);
    }
    n->backward = std::move(backward);
  }
  Tensor t;
  t = Tensor(std::move(n));
  return t;
}

// ---------------------------------------------------------------------------
// Tensor basics

const Shape& Tensor::shape() const {
  if (!node_) throw ValidationError("use of undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ValidationError("dim index out of range");
  return s[i];
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

std::int64_t Tensor::numel() const { return numel_of(shape()); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ValidationError("item() requires a single-element tensor, got " +
                          shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::int64_t i) const {
  if (i < 0 || i >= numel()) throw ValidationError("at(): index out of range");
  return node_->value[static_cast<std::size_t>(i)];
}

std::span<const double> Tensor::data() const {
  if (!node_) throw ValidationError("use of undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

std::vector<double>& Tensor::mutable_data() {
  if (!node_) throw ValidationError("use of undefined tensor");
  if (!node_->parents.empty()) {
    throw ValidationError("mutable_data() is only allowed on leaf tensors");
  }
  return node_->value;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!node_) throw ValidationError("use of undefined tensor");
  if (v && !node_->parents.empty()) {
    throw ValidationError("set_requires_grad(true) is only allowed on leaves");
  }
  node_->requires_grad = v;
  return *this;
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  auto n = make_leaf(node_->shape, node_->value);
  return Tensor(std::move(n));
}

std::string Tensor::to_string(std::int64_t max_entries) const {
  std::ostringstream os;
  os << "Tensor" << shape_str(shape()) << " [";
  const auto n = std::min<std::int64_t>(numel(), max_entries);
  for (std::int64_t i = 0; i < n; ++i) {
    if (i) os << ", ";
    os << node_->value[static_cast<std::size_t>(i)];
  }
  if (n < numel()) os << ", ...";
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(make_leaf(shape, std::vector<double>(numel_of(shape), 0.0)));
}

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(make_leaf(shape, std::vector<double>(numel_of(shape), value)));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
    throw ValidationError("from_data: " + std::to_string(data.size()) +
                          " values for shape " + shape_str(shape));
  }
  return Tensor(make_leaf(shape, std::move(data)));
}

Tensor Tensor::randn(Rng& rng, const Shape& shape, double stddev) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor(make_leaf(shape, std::move(v)));
}

Tensor Tensor::rand_uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(make_leaf(shape, std::move(v)));
}

// ---------------------------------------------------------------------------
// Autograd driver

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         GradSpec spec) {
  if (!output.defined()) throw ValidationError("grad: undefined output");
  for (const auto& in : inputs) {
    if (!in.defined()) throw ValidationError("grad: undefined input");
    if (!in.requires_grad() && !spec.allow_unused) {
      throw ValidationError("grad: input does not require grad");
    }
  }
  std::unordered_set<Node*> input_set;
  for (const auto& in : inputs) input_set.insert(in.unsafe_node());

  // Postorder DFS (parents emitted before the node).
  std::vector<Node*> topo;
  {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    Node* root = output.unsafe_node();
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node* p = n->parents[i].get();
        ++i;
        if (p && p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        topo.push_back(n);
        stack.pop_back();
      }
    }
  }

  // A node is needed iff an input is reachable through its ancestry.
  std::unordered_set<Node*> needed;
  for (Node* n : topo) {
    if (input_set.count(n)) {
      needed.insert(n);
      continue;
    }
    for (const auto& p : n->parents) {
      if (p && needed.count(p.get())) {
        needed.insert(n);
        break;
      }
    }
  }

  std::unordered_map<Node*, Tensor> grads;
  if (output.requires_grad() && needed.count(output.unsafe_node())) {
    grads[output.unsafe_node()] = Tensor::ones(output.shape());

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* n = *it;
      auto git = grads.find(n);
      if (git == grads.end() || !n->backward) continue;
      bool any_needed_parent = false;
      for (const auto& p : n->parents) {
        if (p && p->requires_grad && needed.count(p.get())) {
          any_needed_parent = true;
          break;
        }
      }
      if (!any_needed_parent) continue;

      std::vector<Tensor> pgrads;
      {
        // Backward closures are built from public ops; graph recording during
        // their evaluation is what makes gradients differentiable.
        if (spec.create_graph) {
          EnableGradGuard on;
          pgrads = n->backward(git->second);
        } else {
          NoGradGuard off;
          pgrads = n->backward(git->second);
        }
      }
      if (pgrads.size() != n->parents.size()) {
        throw ValidationError(std::string("internal: op '") + n->op +
                              "' returned wrong number of parent grads");
      }
      for (std::size_t i = 0; i < pgrads.size(); ++i) {
        const auto& p = n->parents[i];
        if (!p || !p->requires_grad || !needed.count(p.get())) continue;
        if (!pgrads[i].defined()) continue;
        auto pit = grads.find(p.get());
        if (pit == grads.end()) {
          grads[p.get()] = pgrads[i];
        } else {
          if (spec.create_graph) {
            EnableGradGuard on;
            pit->second = add(pit->second, pgrads[i]);
          } else {
            NoGradGuard off;
            pit->second = add(pit->second, pgrads[i]);
          }
        }
      }
      // The upstream grad of an interior node is no longer needed.
      if (!input_set.count(n)) grads.erase(n);
    }
  }

  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.unsafe_node());
    if (it != grads.end()) {
      out.push_back(it->second);
    } else if (spec.allow_unused) {
      out.push_back(Tensor::zeros(in.shape()));
    } else {
      throw ValidationError("grad: no path from output to an input tensor");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structure ops

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw ValidationError("reshape: cannot view " + shape_str(x.shape()) +
                          " as " + shape_str(shape));
  }
  Shape old = x.shape();
  return make_op("reshape", shape, std::vector<double>(x.data().begin(), x.data().end()),
                 {x}, [old](const Tensor& g) -> std::vector<Tensor> {
                   return {reshape(g, old)};
                 });
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  const Shape& sx = x.shape();
  if (same_shape(sx, target)) return x;
  // Validate paddability.
  (void)broadcast_shapes(sx, target);
  Shape merged = broadcast_shapes(sx, target);
  if (!same_shape(merged, target)) {
    throw ValidationError("broadcast_to: " + shape_str(sx) +
                          " does not broadcast to " + shape_str(target));
  }

  const int rd = static_cast<int>(target.size());
  const int rs = static_cast<int>(sx.size());
  const auto src_strides = contiguous_strides(sx);
  std::vector<std::int64_t> stride(rd, 0);
  for (int i = 0; i < rs; ++i) {
    stride[rd - rs + i] = sx[i] == 1 ? 0 : src_strides[i];
  }

  std::vector<double> out(numel_of(target));
  const auto src = x.data();
  const std::int64_t inner = target[rd - 1];
  const std::int64_t inner_stride = stride[rd - 1];
  const std::int64_t outer = numel_of(target) / inner;
  std::vector<std::int64_t> idx(rd - 1, 0);
  std::int64_t src_off = 0;
  double* dst = out.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* s = src.data() + src_off;
    if (inner_stride == 0) {
      std::fill(dst, dst + inner, *s);
    } else {
      std::memcpy(dst, s, sizeof(double) * inner);
    }
    dst += inner;
    for (int d = rd - 2; d >= 0; --d) {
      src_off += stride[d];
      if (++idx[d] < target[d]) break;
      idx[d] = 0;
      src_off -= stride[d] * target[d];
    }
  }

  Shape orig = sx;
  return make_op("broadcast_to", target, std::move(out), {x},
                 [orig](const Tensor& g) -> std::vector<Tensor> {
                   return {sum_to(g, orig)};
                 });
}

Tensor sum_to(const Tensor& x, const Shape& target) {
  const Shape& sx = x.shape();
  if (same_shape(sx, target)) return x;
  Shape merged = broadcast_shapes(sx, target);
  if (!same_shape(merged, sx)) {
    throw ValidationError("sum_to: " + shape_str(sx) + " cannot reduce to " +
                          shape_str(target));
  }

  const int rd = static_cast<int>(sx.size());
  const int rt = static_cast<int>(target.size());
  const auto tgt_strides = contiguous_strides(target);
  // Destination stride per source dim; 0 where the target broadcasts.
  std::vector<std::int64_t> stride(rd, 0);
  for (int i = 0; i < rt; ++i) {
    stride[rd - rt + i] = target[i] == 1 ? 0 : tgt_strides[i];
  }

  std::vector<double> out(numel_of(target), 0.0);
  const auto src = x.data();
  const std::int64_t inner = sx[rd - 1];
  const std::int64_t inner_stride = stride[rd - 1];
  const std::int64_t outer = x.numel() / inner;
  std::vector<std::int64_t> idx(rd > 1 ? rd - 1 : 0, 0);
  std::int64_t dst_off = 0;
  const double* s = src.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    if (inner_stride == 0) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < inner; ++i) acc += s[i];
      out[dst_off] += acc;
    } else {
      double* dst = out.data() + dst_off;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += s[i];
    }
    s += inner;
    for (int d = rd - 2; d >= 0; --d) {
      dst_off += stride[d];
      if (++idx[d] < sx[d]) break;
      idx[d] = 0;
      dst_off -= stride[d] * sx[d];
    }
  }

  Shape orig = sx;
  return make_op("sum_to", target, std::move(out), {x},
                 [orig](const Tensor& g) -> std::vector<Tensor> {
                   return {broadcast_to(g, orig)};
                 });
}

namespace {

struct AxisGeom {
  std::int64_t outer = 1, axis = 1, inner = 1;
};

AxisGeom axis_geometry(const Shape& s, int axis) {
  AxisGeom g;
  for (int i = 0; i < axis; ++i) g.outer *= s[i];
  g.axis = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) g.inner *= s[i];
  return g;
}

int normalize_axis(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ValidationError("axis out of range");
  return axis;
}

Tensor embed_slice(const Tensor& x, int axis, std::int64_t start,
                   std::int64_t total);

}  // namespace

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const Shape& sx = x.shape();
  axis = normalize_axis(sx, axis);
  if (start < 0 || len <= 0 || start + len > sx[axis]) {
    throw ValidationError("slice: range [" + std::to_string(start) + ", " +
                          std::to_string(start + len) + ") out of bounds for axis size " +
                          std::to_string(sx[axis]));
  }
  Shape so = sx;
  so[axis] = len;
  const auto g = axis_geometry(sx, axis);
  std::vector<double> out(numel_of(so));
  const auto src = x.data();
  double* dst = out.data();
  for (std::int64_t o = 0; o < g.outer; ++o) {
    const double* s = src.data() + (o * g.axis + start) * g.inner;
    std::memcpy(dst, s, sizeof(double) * len * g.inner);
    dst += len * g.inner;
  }
  const std::int64_t total = sx[axis];
  const int ax = axis;
  const std::int64_t st = start;
  return make_op("slice", so, std::move(out), {x},
                 [ax, st, total](const Tensor& gr) -> std::vector<Tensor> {
                   return {embed_slice(gr, ax, st, total)};
                 });
}

namespace {

Tensor embed_slice(const Tensor& x, int axis, std::int64_t start,
                   std::int64_t total) {
  const Shape& sx = x.shape();
  Shape so = sx;
  so[axis] = total;
  const auto g = axis_geometry(sx, axis);
  std::vector<double> out(numel_of(so), 0.0);
  const auto src = x.data();
  const double* s = src.data();
  for (std::int64_t o = 0; o < g.outer; ++o) {
    double* dst = out.data() + (o * total + start) * g.inner;
    std::memcpy(dst, s, sizeof(double) * sx[axis] * g.inner);
    s += sx[axis] * g.inner;
  }
  const int ax = axis;
  const std::int64_t st = start, len = sx[axis];
  return make_op("embed_slice", so, std::move(out), {x},
                 [ax, st, len](const Tensor& gr) -> std::vector<Tensor> {
                   return {slice(gr, ax, st, len)};
                 });
}

}  // namespace

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ValidationError("concat: empty input list");
  const Shape& s0 = xs[0].shape();
  const int ax = normalize_axis(s0, axis);
  Shape so = s0;
  std::int64_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) throw ValidationError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != ax && s[i] != s0[i]) {
        throw ValidationError("concat: shape mismatch " + shape_str(s) +
                              " vs " + shape_str(s0));
      }
    }
    total += s[ax];
  }
  so[ax] = total;

  const auto g = axis_geometry(so, ax);
  std::vector<double> out(numel_of(so));
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const std::int64_t len = x.shape()[ax];
    const double* s = x.data().data();
    for (std::int64_t o = 0; o < g.outer; ++o) {
      std::memcpy(out.data() + (o * total + off) * g.inner,
                  s + o * len * g.inner, sizeof(double) * len * g.inner);
    }
    off += len;
  }

  std::vector<std::int64_t> lens;
  for (const auto& x : xs) lens.push_back(x.shape()[ax]);
  return make_op("concat", so, std::move(out), xs,
                 [ax, lens](const Tensor& gr) -> std::vector<Tensor> {
                   std::vector<Tensor> gs;
                   std::int64_t off = 0;
                   for (auto len : lens) {
                     gs.push_back(slice(gr, ax, off, len));
                     off += len;
                   }
                   return gs;
                 });
}

Tensor transpose_last2(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw ValidationError("transpose_last2: rank must be 2 or 3, got " +
                          shape_str(s));
  }
  const std::int64_t b = s.size() == 3 ? s[0] : 1;
  const std::int64_t m = s[s.size() - 2], n = s[s.size() - 1];
  Shape so = s;
  so[s.size() - 2] = n;
  so[s.size() - 1] = m;
  std::vector<double> out(x.numel());
  const double* src = x.data().data();
  for (std::int64_t bb = 0; bb < b; ++bb) {
    const double* sb = src + bb * m * n;
    double* db = out.data() + bb * m * n;
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) db[j * m + i] = sb[i * n + j];
    }
  }
  return make_op("transpose_last2", so, std::move(out), {x},
                 [](const Tensor& g) -> std::vector<Tensor> {
                   return {transpose_last2(g)};
                 });
}

// ---------------------------------------------------------------------------
// Arithmetic

namespace {

using BinFn = double (*)(double, double);

template <typename F, typename B>
Tensor elementwise_same(const char* name, const Tensor& a, const Tensor& b,
                        F&& fwd, B&& backward) {
  if (!same_shape(a.shape(), b.shape())) {
    throw ValidationError(std::string(name) + ": shape mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto va = a.data();
  const auto vb = b.data();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i], vb[i]);
  return make_op(name, a.shape(), std::move(out), {a, b},
                 std::forward<B>(backward));
}

std::pair<Tensor, Tensor> broadcast_pair(const Tensor& a, const Tensor& b) {
  if (same_shape(a.shape(), b.shape())) return {a, b};
  Shape bs = broadcast_shapes(a.shape(), b.shape());
  return {broadcast_to(a, bs), broadcast_to(b, bs)};
}

}  // namespace

Tensor add(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return elementwise_same(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const Tensor& g) -> std::vector<Tensor> { return {g, g}; });
}

Tensor sub(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return elementwise_same(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const Tensor& g) -> std::vector<Tensor> { return {g, neg(g)}; });
}

Tensor mul(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return elementwise_same(
      "mul", a, b, [](double x, double y) { return x * y; },
      [a, b](const Tensor& g) -> std::vector<Tensor> {
        return {mul(g, b), mul(g, a)};
      });
}

Tensor div(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0);
  return elementwise_same(
      "div", a, b, [](double x, double y) { return x / y; },
      [a, b](const Tensor& g) -> std::vector<Tensor> {
        Tensor ga = div(g, b);
        Tensor gb = neg(mul(g, div(a, mul(b, b))));
        return {ga, gb};
      });
}

namespace {

template <typename F, typename B>
Tensor elementwise_unary(const char* name, const Tensor& x, F&& fwd,
                         B&& backward) {
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = fwd(v[i]);
  return make_op(name, x.shape(), std::move(out), {x},
                 std::forward<B>(backward));
}

}  // namespace

Tensor neg(const Tensor& x) {
  return elementwise_unary(
      "neg", x, [](double v) { return -v; },
      [](const Tensor& g) -> std::vector<Tensor> { return {neg(g)}; });
}

Tensor exp(const Tensor& x) {
  return elementwise_unary(
      "exp", x, [](double v) { return std::exp(v); },
      [x](const Tensor& g) -> std::vector<Tensor> { return {mul(g, exp(x))}; });
}

Tensor log(const Tensor& x) {
  return elementwise_unary(
      "log", x, [](double v) { return std::log(v); },
      [x](const Tensor& g) -> std::vector<Tensor> { return {div(g, x)}; });
}

Tensor sqrt(const Tensor& x) {
  return elementwise_unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [x](const Tensor& g) -> std::vector<Tensor> {
        return {div(g, mul(Tensor::scalar(2.0), sqrt(x)))};
      });
}

Tensor tanh(const Tensor& x) {
  return elementwise_unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [x](const Tensor& g) -> std::vector<Tensor> {
        Tensor t = tanh(x);
        return {mul(g, sub(Tensor::scalar(1.0), mul(t, t)))};
      });
}

Tensor abs(const Tensor& x) {
  return elementwise_unary(
      "abs", x, [](double v) { return std::abs(v); },
      [x](const Tensor& g) -> std::vector<Tensor> {
        const auto v = x.data();
        std::vector<double> sgn(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
          sgn[i] = v[i] > 0 ? 1.0 : (v[i] < 0 ? -1.0 : 0.0);
        }
        return {mul(g, Tensor::from_data(x.shape(), std::move(sgn)))};
      });
}

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor sigmoid(const Tensor& x) {
  return elementwise_unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [x](const Tensor& g) -> std::vector<Tensor> {
        Tensor s = sigmoid(x);
        return {mul(g, mul(s, sub(Tensor::scalar(1.0), s)))};
      });
}

Tensor softplus(const Tensor& x) {
  return elementwise_unary(
      "softplus", x,
      [](double v) {
        return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [x](const Tensor& g) -> std::vector<Tensor> {
        return {mul(g, sigmoid(x))};
      });
}

Tensor leaky_relu(const Tensor& x, double negative_slope) {
  const double a = negative_slope;
  return elementwise_unary(
      "leaky_relu", x, [a](double v) { return v >= 0 ? v : a * v; },
      [x, a](const Tensor& g) -> std::vector<Tensor> {
        const auto v = x.data();
        std::vector<double> m(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] >= 0 ? 1.0 : a;
        return {mul(g, Tensor::from_data(x.shape(), std::move(m)))};
      });
}

Tensor round_st(const Tensor& x, double r) {
  if (!(r > 0)) throw ValidationError("round_st: color resolution must be > 0");
  return elementwise_unary(
      "round_st", x, [r](double v) { return std::round(v / r) * r; },
      [](const Tensor& g) -> std::vector<Tensor> { return {g}; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto v = x.data();
  double acc = 0.0;
  for (double e : v) acc += e;
  Shape orig = x.shape();
  return make_op("sum", {1}, {acc}, {x},
                 [orig](const Tensor& g) -> std::vector<Tensor> {
                   return {broadcast_to(g, orig)};
                 });
}

Tensor mean(const Tensor& x) {
  return mul(sum(x), Tensor::scalar(1.0 / static_cast<double>(x.numel())));
}

// ---------------------------------------------------------------------------
// Batched matmul

Tensor bmm(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) {
    throw ValidationError("bmm: incompatible shapes " + shape_str(sa) + " x " +
                          shape_str(sb));
  }
  const std::int64_t B = sa[0], m = sa[1], k = sa[2], n = sb[2];
  std::vector<double> out(B * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::int64_t i = 0; i < B; ++i) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
                1.0, pa + i * m * k, static_cast<int>(k), pb + i * k * n,
                static_cast<int>(n), 0.0, out.data() + i * m * n,
                static_cast<int>(n));
  }
  return make_op("bmm", {B, m, n}, std::move(out), {a, b},
                 [a, b](const Tensor& g) -> std::vector<Tensor> {
                   return {bmm(g, transpose_last2(b)),
                           bmm(transpose_last2(a), g)};
                 });
}

// ---------------------------------------------------------------------------
// im2col / col2im (stride 1)

namespace {

void check_conv_geom(const Shape& s, int k, int pad) {
  if (s.size() != 4) throw ValidationError("im2col: input must be rank 4");
  if (k < 1 || pad < 0) throw ValidationError("im2col: bad kernel/pad");
  if (s[2] + 2 * pad < k || s[3] + 2 * pad < k) {
    throw ValidationError("im2col: kernel larger than padded input");
  }
}

}  // namespace

Tensor im2col(const Tensor& x, int k, int pad) {
  check_conv_geom(x.shape(), k, pad);
  const auto s = x.shape();
  const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const std::int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
  const std::int64_t L = OH * OW, KK = static_cast<std::int64_t>(k) * k;
  std::vector<double> out(B * C * KK * L, 0.0);
  const double* src = x.data().data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xc = src + (b * C + c) * H * W;
      double* oc = out.data() + (b * C + c) * KK * L;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double* row = oc + (static_cast<std::int64_t>(ky) * k + kx) * L;
          for (std::int64_t oy = 0; oy < OH; ++oy) {
            const std::int64_t iy = oy - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const std::int64_t x0 = std::max<std::int64_t>(0, pad - kx);
            const std::int64_t x1 = std::min<std::int64_t>(OW, W + pad - kx);
            const double* sr = xc + iy * W - pad + kx;
            double* dr = row + oy * OW;
            for (std::int64_t ox = x0; ox < x1; ++ox) dr[ox] = sr[ox];
          }
        }
      }
    }
  }
  Shape xs = s;
  return make_op("im2col", {B, C * KK, L}, std::move(out), {x},
                 [xs, k, pad](const Tensor& g) -> std::vector<Tensor> {
                   return {col2im(g, xs, k, pad)};
                 });
}

Tensor col2im(const Tensor& cols, const Shape& x_shape, int k, int pad) {
  check_conv_geom(x_shape, k, pad);
  const std::int64_t B = x_shape[0], C = x_shape[1], H = x_shape[2],
                     W = x_shape[3];
  const std::int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
  const std::int64_t L = OH * OW, KK = static_cast<std::int64_t>(k) * k;
  const Shape expect = {B, C * KK, L};
  if (!same_shape(cols.shape(), expect)) {
    throw ValidationError("col2im: expected " + shape_str(expect) + ", got " +
                          shape_str(cols.shape()));
  }
  std::vector<double> out(B * C * H * W, 0.0);
  const double* src = cols.data().data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      double* xc = out.data() + (b * C + c) * H * W;
      const double* oc = src + (b * C + c) * KK * L;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double* row = oc + (static_cast<std::int64_t>(ky) * k + kx) * L;
          for (std::int64_t oy = 0; oy < OH; ++oy) {
            const std::int64_t iy = oy - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const std::int64_t x0 = std::max<std::int64_t>(0, pad - kx);
            const std::int64_t x1 = std::min<std::int64_t>(OW, W + pad - kx);
            double* dr = xc + iy * W - pad + kx;
            const double* sr = row + oy * OW;
            for (std::int64_t ox = x0; ox < x1; ++ox) dr[ox] += sr[ox];
          }
        }
      }
    }
  }
  return make_op("col2im", x_shape, std::move(out), {cols},
                 [k, pad](const Tensor& g) -> std::vector<Tensor> {
                   return {im2col(g, k, pad)};
                 });
}

// ---------------------------------------------------------------------------
// Spatial maps

namespace detail {

struct SpatialMap {
  std::int64_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<std::int64_t> row_ptr;
  std::vector<std::int32_t> col;
  std::vector<double> w;
  // Forward maps own their adjoint; the adjoint points back weakly (the
  // global cache keeps primaries alive).
  std::shared_ptr<const SpatialMap> adj_strong;
  std::weak_ptr<const SpatialMap> adj_weak;

  SpatialMapPtr adjoint() const {
    if (adj_strong) return adj_strong;
    auto p = adj_weak.lock();
    if (!p) throw ValidationError("spatial map adjoint expired");
    return p;
  }
};

}  // namespace detail

namespace {

using detail::SpatialMap;

std::shared_ptr<SpatialMap> transpose_map(const SpatialMap& m) {
  auto t = std::make_shared<SpatialMap>();
  t->in_h = m.out_h;
  t->in_w = m.out_w;
  t->out_h = m.in_h;
  t->out_w = m.in_w;
  const std::int64_t rows = m.out_h * m.out_w;
  const std::int64_t cols = m.in_h * m.in_w;
  std::vector<std::int64_t> count(cols, 0);
  for (auto c : m.col) ++count[c];
  t->row_ptr.assign(cols + 1, 0);
  for (std::int64_t i = 0; i < cols; ++i) t->row_ptr[i + 1] = t->row_ptr[i] + count[i];
  t->col.resize(m.col.size());
  t->w.resize(m.w.size());
  std::vector<std::int64_t> cursor(t->row_ptr.begin(), t->row_ptr.end() - 1);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t i = m.row_ptr[r]; i < m.row_ptr[r + 1]; ++i) {
      const std::int64_t c = m.col[i];
      t->col[cursor[c]] = static_cast<std::int32_t>(r);
      t->w[cursor[c]] = m.w[i];
      ++cursor[c];
    }
  }
  return t;
}

SpatialMapPtr finalize_map(std::shared_ptr<SpatialMap> m) {
  auto adj = transpose_map(*m);
  m->adj_strong = adj;
  adj->adj_weak = m;
  return m;
}

std::mutex g_map_mutex;
std::unordered_map<std::string, SpatialMapPtr> g_map_cache;

SpatialMapPtr cached_map(const std::string& key,
                         const std::function<std::shared_ptr<SpatialMap>()>& build) {
  std::lock_guard<std::mutex> lock(g_map_mutex);
  auto it = g_map_cache.find(key);
  if (it != g_map_cache.end()) return it->second;
  auto m = finalize_map(build());
  g_map_cache.emplace(key, m);
  return m;
}

}  // namespace

SpatialMapPtr avg_pool_map(std::int64_t h, std::int64_t w, int factor) {
  if (factor < 1 || h % factor || w % factor) {
    throw ValidationError("avg_pool: spatial size " + std::to_string(h) + "x" +
                          std::to_string(w) + " not divisible by factor " +
                          std::to_string(factor));
  }
  const std::string key = "avg:" + std::to_string(h) + ":" + std::to_string(w) +
                          ":" + std::to_string(factor);
  return cached_map(key, [=] {
    auto m = std::make_shared<SpatialMap>();
    m->in_h = h;
    m->in_w = w;
    m->out_h = h / factor;
    m->out_w = w / factor;
    const double wgt = 1.0 / (static_cast<double>(factor) * factor);
    m->row_ptr.push_back(0);
    for (std::int64_t oy = 0; oy < m->out_h; ++oy) {
      for (std::int64_t ox = 0; ox < m->out_w; ++ox) {
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) {
            m->col.push_back(static_cast<std::int32_t>(
                (oy * factor + dy) * w + ox * factor + dx));
            m->w.push_back(wgt);
          }
        }
        m->row_ptr.push_back(static_cast<std::int64_t>(m->col.size()));
      }
    }
    return m;
  });
}

SpatialMapPtr upsample_nearest_map(std::int64_t h, std::int64_t w, int factor) {
  if (factor < 1) throw ValidationError("upsample_nearest: factor must be >= 1");
  const std::string key = "nn:" + std::to_string(h) + ":" + std::to_string(w) +
                          ":" + std::to_string(factor);
  return cached_map(key, [=] {
    auto m = std::make_shared<SpatialMap>();
    m->in_h = h;
    m->in_w = w;
    m->out_h = h * factor;
    m->out_w = w * factor;
    m->row_ptr.push_back(0);
    for (std::int64_t oy = 0; oy < m->out_h; ++oy) {
      for (std::int64_t ox = 0; ox < m->out_w; ++ox) {
        m->col.push_back(static_cast<std::int32_t>((oy / factor) * w + ox / factor));
        m->w.push_back(1.0);
        m->row_ptr.push_back(static_cast<std::int64_t>(m->col.size()));
      }
    }
    return m;
  });
}

SpatialMapPtr bilinear_resize_map(std::int64_t h, std::int64_t w,
                                  std::int64_t oh, std::int64_t ow) {
  if (oh < 1 || ow < 1) throw ValidationError("bilinear_resize: bad target size");
  const std::string key = "bil:" + std::to_string(h) + ":" + std::to_string(w) +
                          ":" + std::to_string(oh) + ":" + std::to_string(ow);
  return cached_map(key, [=] {
    auto m = std::make_shared<SpatialMap>();
    m->in_h = h;
    m->in_w = w;
    m->out_h = oh;
    m->out_w = ow;
    m->row_ptr.push_back(0);
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
      const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
      const std::int64_t y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - static_cast<double>(y0);
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
        const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
        const std::int64_t x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - static_cast<double>(x0);
        const double taps[4] = {(1 - wy) * (1 - wx), (1 - wy) * wx,
                                wy * (1 - wx), wy * wx};
        const std::int64_t idx[4] = {y0 * w + x0, y0 * w + x1, y1 * w + x0,
                                     y1 * w + x1};
        for (int t = 0; t < 4; ++t) {
          if (taps[t] == 0.0) continue;
          m->col.push_back(static_cast<std::int32_t>(idx[t]));
          m->w.push_back(taps[t]);
        }
        m->row_ptr.push_back(static_cast<std::int64_t>(m->col.size()));
      }
    }
    return m;
  });
}

SpatialMapPtr area_resize_map(std::int64_t h, std::int64_t w, std::int64_t oh,
                              std::int64_t ow) {
  if (oh < 1 || ow < 1) throw ValidationError("area_resize: bad target size");
  const std::string key = "area:" + std::to_string(h) + ":" + std::to_string(w) +
                          ":" + std::to_string(oh) + ":" + std::to_string(ow);
  return cached_map(key, [=] {
    auto m = std::make_shared<SpatialMap>();
    m->in_h = h;
    m->in_w = w;
    m->out_h = oh;
    m->out_w = ow;
    m->row_ptr.push_back(0);
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      const double ya = oy * sy, yb = (oy + 1) * sy;
      const std::int64_t iy0 = static_cast<std::int64_t>(std::floor(ya));
      const std::int64_t iy1 =
          std::min(h, static_cast<std::int64_t>(std::ceil(yb)));
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const double xa = ox * sx, xb = (ox + 1) * sx;
        const std::int64_t ix0 = static_cast<std::int64_t>(std::floor(xa));
        const std::int64_t ix1 =
            std::min(w, static_cast<std::int64_t>(std::ceil(xb)));
        const double area = (yb - ya) * (xb - xa);
        for (std::int64_t iy = iy0; iy < iy1; ++iy) {
          const double oy_len =
              std::min(yb, static_cast<double>(iy + 1)) - std::max(ya, static_cast<double>(iy));
          if (oy_len <= 0) continue;
          for (std::int64_t ix = ix0; ix < ix1; ++ix) {
            const double ox_len = std::min(xb, static_cast<double>(ix + 1)) -
                                  std::max(xa, static_cast<double>(ix));
            if (ox_len <= 0) continue;
            m->col.push_back(static_cast<std::int32_t>(iy * w + ix));
            m->w.push_back(oy_len * ox_len / area);
          }
        }
        m->row_ptr.push_back(static_cast<std::int64_t>(m->col.size()));
      }
    }
    return m;
  });
}

Tensor apply_spatial(const Tensor& x, const SpatialMapPtr& map) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ValidationError("apply_spatial: input must be rank 4");
  if (s[2] != map->in_h || s[3] != map->in_w) {
    throw ValidationError("apply_spatial: input " + shape_str(s) +
                          " does not match map input " +
                          std::to_string(map->in_h) + "x" +
                          std::to_string(map->in_w));
  }
  const std::int64_t BC = s[0] * s[1];
  const std::int64_t in_px = map->in_h * map->in_w;
  const std::int64_t out_px = map->out_h * map->out_w;
  std::vector<double> out(BC * out_px);
  const double* src = x.data().data();
  for (std::int64_t bc = 0; bc < BC; ++bc) {
    const double* sp = src + bc * in_px;
    double* dp = out.data() + bc * out_px;
    for (std::int64_t r = 0; r < out_px; ++r) {
      double acc = 0.0;
      for (std::int64_t i = map->row_ptr[r]; i < map->row_ptr[r + 1]; ++i) {
        acc += map->w[i] * sp[map->col[i]];
      }
      dp[r] = acc;
    }
  }
  Shape so = {s[0], s[1], map->out_h, map->out_w};
  SpatialMapPtr m = map;
  return make_op("apply_spatial", so, std::move(out), {x},
                 [m](const Tensor& g) -> std::vector<Tensor> {
                   return {apply_spatial(g, m->adjoint())};
                 });
}

Tensor avg_pool(const Tensor& x, int factor) {
  return apply_spatial(x, avg_pool_map(x.dim(2), x.dim(3), factor));
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  return apply_spatial(x, upsample_nearest_map(x.dim(2), x.dim(3), factor));
}

Tensor resize_bilinear(const Tensor& x, std::int64_t oh, std::int64_t ow) {
  return apply_spatial(x, bilinear_resize_map(x.dim(2), x.dim(3), oh, ow));
}

// ---------------------------------------------------------------------------
// Value helpers

bool all_finite(const Tensor& x) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double max_abs(const Tensor& x) {
  double m = 0.0;
  for (double v : x.data()) m = std::max(m, std::abs(v));
  return m;
}

double min_value(const Tensor& x) {
  double m = std::numeric_limits<double>::infinity();
  for (double v : x.data()) m = std::min(m, v);
  return m;
}

double max_value(const Tensor& x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x.data()) m = std::max(m, v);
  return m;
}

}  // namespace lrgan
