#pragma once
// Dense float32 tensors with reverse-mode automatic differentiation.
//
// Layout: row-major, last axis fastest. Volumes are channels-first [C,D,H,W].
// Inner products and reductions accumulate in double, ascending index order;
// reference and optimized kernels share that order so results are
// bit-identical (toggle with set_reference_kernels).
//
// A graph node is recorded only when some input requires grad. Tensors are
// immutable after creation except leaf parameters, which the optimizer
// updates in place between steps (each step builds a fresh graph).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "puuma/rng.hpp"

namespace puuma {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> value;
  bool requires_grad = false;
  std::vector<float> grad;  // allocated lazily during backward
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // fills input grads from this->grad
  const char* op = "leaf";
  // f64 shadow of `value`, populated only under precise_forward mode; it is
  // the numeric reference grad_check differentiates, never a storage format
  std::vector<double> value64;
};
using NodePtr = std::shared_ptr<Node>;

// input readout for shadow forwards: f64 shadow when present, else the exact
// widened f32 value
inline double val64(const NodePtr& n, size_t i) {
  return n->value64.empty() ? double(n->value[i]) : n->value64[i];
}

// Returns the (zero-initialized) gradient buffer, or nullptr when the node
// does not take part in differentiation.
float* grad_buf(Node* n);

}  // namespace detail

class Tensor;

namespace detail {
// Builds an op node; drops inputs and the backward closure when no input
// requires grad. Used by tensor.cpp and by the fused ops elsewhere.
Tensor make_op(const char* name, Shape shape, std::vector<float> value,
               std::initializer_list<Tensor> ins, std::function<void(Node&)> back);
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, float v, bool requires_grad = false);
  static Tensor from(Shape s, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);
  // He-style normal init, stddev chosen by the caller
  static Tensor randn(Shape s, Rng& rng, float stddev, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  bool requires_grad() const;
  float item() const;  // scalar tensors only
  // scalar readout preferring the f64 shadow (grad_check's function values)
  double item_precise() const;

  std::span<const float> data() const;
  // mutable access for leaf construction and in-place parameter updates
  std::span<float> raw();

  std::span<const float> grad() const;  // empty before backward
  void zero_grad();

  detail::NodePtr node() const { return n_; }

 private:
  detail::NodePtr n_;
};

// kernel selection for ops that have both naive and optimized paths
void set_reference_kernels(bool on);
bool reference_kernels();

// While on, every op also evaluates itself in double from its inputs' f64
// shadows. grad_check enables this so the finite-difference reference is not
// limited by f32 rounding of intermediates.
void set_precise_forward(bool on);
bool precise_forward();

// ---- operator set -------------------------------------------------------
// Elementwise ops broadcast only over trailing singleton dims (one operand
// may have extent 1 on a trailing suffix of axes); anything else is a shape
// error. Use reshape for everything beyond that.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] x [K,N]
// y = x * W^T + b, x:[M,in] W:[out,in] b:[out] (b may be undefined)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, float slope = 0.01f);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
// per-channel normalization over all trailing axes, x: [C, spatial...]
Tensor instance_norm(const Tensor& x, float eps = 1e-5f);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor reshape(const Tensor& x, Shape s);
Tensor transpose2d(const Tensor& x);
Tensor sum(const Tensor& x);   // -> [1]
Tensor mean(const Tensor& x);  // -> [1]

// cross-correlation, x:[Cin,D,H,W] w:[Cout,Cin,k,k,k], odd k, bias optional
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding);
// inverse shape contract of the stride-2 downsampling conv (even extents)
Tensor upsample_nearest2x(const Tensor& x);

// root must be scalar; gradients accumulate additively across fan-out
void backward(const Tensor& root);

// max over coordinates of |analytic - numeric| / max(1e-8, |analytic|+|numeric|)
double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                  const Tensor& point, float eps);

// ---- serialization ------------------------------------------------------
// "PUMT" magic, u32 rank, u32 extents..., then little-endian f32 data.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

}  // namespace puuma
