#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lrgan/rng.hpp"

namespace lrgan {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);
// NumPy-style broadcast of two shapes; throws ValidationError on mismatch.
Shape broadcast_shapes(const Shape& a, const Shape& b);

namespace detail {
struct Node;
}

// Dense double tensor with define-by-run reverse-mode autodiff.
//
// Backward functions of every primitive are expressed through the same
// public ops, so gradients themselves carry graphs when requested
// (create_graph) and second-order gradients (e.g. the R1 penalty) come out
// of the same machinery.
//
// Tensors are cheap shared handles; operations never mutate inputs. The one
// sanctioned mutation is mutable_data() on leaf tensors, used by optimizers
// after the graphs of the step have been dropped.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor from_data(const Shape& shape, std::vector<double> data);
  static Tensor randn(Rng& rng, const Shape& shape, double stddev = 1.0);
  static Tensor rand_uniform(Rng& rng, const Shape& shape, double lo,
                             double hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int i) const;  // negative i counts from the back
  int rank() const;
  std::int64_t numel() const;

  double item() const;  // requires numel() == 1
  double at(std::int64_t flat_index) const;
  std::span<const double> data() const;
  // Leaf tensors only; breaks no graph because leaves have none.
  std::vector<double>& mutable_data();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  // Same values, detached from the graph.
  Tensor detach() const;

  std::string to_string(std::int64_t max_entries = 32) const;

  detail::Node* unsafe_node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node)
      : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(const char* name, Shape shape,
                        std::vector<double> value, std::vector<Tensor> parents,
                        std::function<std::vector<Tensor>(const Tensor&)> backward);
  friend std::vector<Tensor> grad(const Tensor&, const std::vector<Tensor>&,
                                  struct GradSpec);
};

// ---------------------------------------------------------------------------
// Autograd

struct GradSpec {
  // Record graphs during the backward pass so the returned gradients are
  // themselves differentiable.
  bool create_graph = false;
  // Missing paths yield zero gradients instead of an error.
  bool allow_unused = false;
};

// d(output)/d(inputs), seeding the output with ones. Output is typically a
// scalar loss; for non-scalars this computes the gradient of sum(output).
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         GradSpec spec = {});

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Structure ops

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
// Adjoint of broadcast_to: reduce-sum down to a broadcast-compatible shape.
Tensor sum_to(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len);
// Swap the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose_last2(const Tensor& x);

// ---------------------------------------------------------------------------
// Arithmetic (NumPy-style broadcasting)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sigmoid(const Tensor& x);    // numerically stable at both tails
Tensor softplus(const Tensor& x);   // log(1 + e^x), stable form
Tensor leaky_relu(const Tensor& x, double negative_slope);
// Round to the r-spaced grid (ties away from zero); identity gradient.
Tensor round_st(const Tensor& x, double r);

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x);   // shape {1}
Tensor mean(const Tensor& x);  // shape {1}

// ---------------------------------------------------------------------------
// Linear algebra

// Batched matmul: a (B, m, k) x b (B, k, n) -> (B, m, n). BLAS-backed.
Tensor bmm(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Convolution plumbing (stride 1)

// x (B, C, H, W) -> (B, C*k*k, OH*OW) with OH = H + 2*pad - k + 1.
Tensor im2col(const Tensor& x, int k, int pad);
// Adjoint of im2col for the same geometry.
Tensor col2im(const Tensor& cols, const Shape& x_shape, int k, int pad);

// ---------------------------------------------------------------------------
// Spatial resampling (exact linear maps with exact adjoints)

namespace detail {
struct SpatialMap;
}
using SpatialMapPtr = std::shared_ptr<const detail::SpatialMap>;

SpatialMapPtr avg_pool_map(std::int64_t h, std::int64_t w, int factor);
SpatialMapPtr upsample_nearest_map(std::int64_t h, std::int64_t w, int factor);
SpatialMapPtr bilinear_resize_map(std::int64_t h, std::int64_t w,
                                  std::int64_t oh, std::int64_t ow);
// Exact box-overlap (area) resampling for arbitrary sizes.
SpatialMapPtr area_resize_map(std::int64_t h, std::int64_t w, std::int64_t oh,
                              std::int64_t ow);

// Apply a spatial map per (batch, channel) slice.
Tensor apply_spatial(const Tensor& x, const SpatialMapPtr& map);

Tensor avg_pool(const Tensor& x, int factor);
Tensor upsample_nearest(const Tensor& x, int factor);
Tensor resize_bilinear(const Tensor& x, std::int64_t oh, std::int64_t ow);

// ---------------------------------------------------------------------------
// Value helpers (no autodiff involvement)

bool all_finite(const Tensor& x);
double max_abs(const Tensor& x);
double min_value(const Tensor& x);
double max_value(const Tensor& x);

}  // namespace lrgan
