#include "puuma/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <unordered_set>

namespace puuma {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

void validate_shape(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
  for (int e : s) {
    if (e <= 0)
      throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
  }
}

#ifndef NDEBUG
void check_finite(const char* op, const std::vector<float>& v) {
  for (float x : v) assert(std::isfinite(x) && "non-finite value in forward op");
  (void)op;
}
#else
void check_finite(const char*, const std::vector<float>&) {}
#endif

bool g_reference_kernels = false;
bool g_precise_forward = false;

}  // namespace

void set_reference_kernels(bool on) { g_reference_kernels = on; }
bool reference_kernels() { return g_reference_kernels; }
void set_precise_forward(bool on) { g_precise_forward = on; }
bool precise_forward() { return g_precise_forward; }

namespace detail {

float* grad_buf(Node* n) {
  if (!n->requires_grad) return nullptr;
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0f);
  return n->grad.data();
}

Tensor make_op(const char* name, Shape shape, std::vector<float> value,
               std::initializer_list<Tensor> ins, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = name;
  for (const Tensor& t : ins) {
    if (t.defined() && t.node()->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    for (const Tensor& t : ins) n->inputs.push_back(t.node());
    n->backward = std::move(back);
  }
  check_finite(name, n->value);
  return Tensor(n);
}

}  // namespace detail

using detail::Node;
using detail::NodePtr;
using detail::grad_buf;
using detail::make_op;

// ---- Tensor basics ------------------------------------------------------

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  return full(std::move(s), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape s, float v, bool requires_grad) {
  validate_shape(s);
  auto n = std::make_shared<Node>();
  n->value.assign(size_t(shape_numel(s)), v);
  n->shape = std::move(s);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(Shape s, std::vector<float> data, bool requires_grad) {
  validate_shape(s);
  if (int64_t(data.size()) != shape_numel(s))
    throw std::invalid_argument("data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(s));
  auto n = std::make_shared<Node>();
  n->shape = std::move(s);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(float v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape s, Rng& rng, float stddev, bool requires_grad) {
  validate_shape(s);
  std::vector<float> v(size_t(shape_numel(s)));
  for (float& x : v) x = float(rng.normal() * stddev);
  return from(std::move(s), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return n_->shape; }
int64_t Tensor::numel() const { return shape_numel(n_->shape); }
bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

float Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item() requires a scalar, got " + shape_str(n_->shape));
  return n_->value[0];
}

double Tensor::item_precise() const {
  if (numel() != 1)
    throw std::invalid_argument("item_precise() requires a scalar, got " +
                                shape_str(n_->shape));
  return detail::val64(n_, 0);
}

std::span<const float> Tensor::data() const { return n_->value; }
std::span<float> Tensor::raw() { return n_->value; }

std::span<const float> Tensor::grad() const {
  return n_ ? std::span<const float>(n_->grad) : std::span<const float>();
}

void Tensor::zero_grad() {
  if (n_) n_->grad.clear();
}

// ---- elementwise with trailing-singleton broadcast ----------------------

namespace {

// Decide how b maps onto a: returns the length of the trailing suffix of b
// that is broadcast (extent 1 vs a's extent), or -1 when shapes don't conform.
int broadcast_suffix(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) return -1;
  size_t r = a.size();
  size_t k = r;  // first axis (from the left) where b == 1 broadcasts
  while (k > 0 && b[k - 1] == 1 && a[k - 1] != 1) --k;
  for (size_t i = 0; i < k; ++i)
    if (a[i] != b[i]) return -1;
  return int(r - k);
}

struct BroadcastPlan {
  bool swap = false;   // true when `a` is the broadcast operand
  int64_t outer = 1;   // elements of the shared prefix
  int64_t inner = 1;   // elements of the broadcast suffix in the big operand
};

BroadcastPlan plan_elementwise(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.outer = shape_numel(a);
    return p;
  }
  int suf = broadcast_suffix(a, b);
  if (suf < 0) {
    suf = broadcast_suffix(b, a);
    if (suf < 0)
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                  " vs " + shape_str(b));
    p.swap = true;
    for (size_t i = 0; i + size_t(suf) < b.size(); ++i) p.outer *= b[i];
    for (size_t i = b.size() - size_t(suf); i < b.size(); ++i) p.inner *= b[i];
  } else {
    for (size_t i = 0; i + size_t(suf) < a.size(); ++i) p.outer *= a[i];
    for (size_t i = a.size() - size_t(suf); i < a.size(); ++i) p.inner *= a[i];
  }
  return p;
}

template <class Fwd>
std::vector<float> ew_forward(const Tensor& big, const Tensor& small,
                              const BroadcastPlan& p, Fwd f) {
  const auto xb = big.data();
  const auto xs = small.data();
  std::vector<float> out(xb.size());
  for (int64_t o = 0; o < p.outer; ++o) {
    const float s = xs[size_t(o)];
    for (int64_t i = 0; i < p.inner; ++i) {
      size_t idx = size_t(o * p.inner + i);
      out[idx] = f(xb[idx], s);
    }
  }
  return out;
}

// f64 view of a tensor for shadow forwards
std::vector<double> widen(const Tensor& t) {
  const detail::NodePtr& n = t.node();
  if (!n->value64.empty()) return n->value64;
  std::vector<double> out(n->value.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = double(n->value[i]);
  return out;
}

template <class F64>
void ew_shadow(Tensor& out, const Tensor& big, const Tensor& small,
               const BroadcastPlan& p, F64 f) {
  if (!g_precise_forward) return;
  auto& n = *out.node();
  n.value64.resize(n.value.size());
  for (int64_t o = 0; o < p.outer; ++o) {
    const double s = detail::val64(small.node(), size_t(o));
    for (int64_t i = 0; i < p.inner; ++i) {
      size_t idx = size_t(o * p.inner + i);
      n.value64[idx] = f(detail::val64(big.node(), idx), s);
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  BroadcastPlan p = plan_elementwise("add", a.shape(), b.shape());
  const Tensor& big = p.swap ? b : a;
  const Tensor& small = p.swap ? a : b;
  auto out = ew_forward(big, small, p, [](float x, float y) { return x + y; });
  Tensor t = make_op("add", big.shape(), std::move(out), {a, b}, [p](Node& self) {
    Node* na = self.inputs[0].get();
    Node* nb = self.inputs[1].get();
    Node* nbig = p.swap ? nb : na;
    Node* nsmall = p.swap ? na : nb;
    if (float* g = grad_buf(nbig))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (float* g = grad_buf(nsmall)) {
      for (int64_t o = 0; o < p.outer; ++o) {
        double acc = 0.0;
        for (int64_t i = 0; i < p.inner; ++i) acc += self.grad[size_t(o * p.inner + i)];
        g[o] += float(acc);
      }
    }
  });
  ew_shadow(t, big, small, p, [](double x, double y) { return x + y; });
  return t;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  BroadcastPlan p = plan_elementwise("sub", a.shape(), b.shape());
  const Tensor& big = p.swap ? b : a;
  const Tensor& small = p.swap ? a : b;
  float (*f)(float, float) = p.swap ? +[](float x, float y) { return y - x; }
                                    : +[](float x, float y) { return x - y; };
  auto out = ew_forward(big, small, p, f);
  Tensor t = make_op("sub", big.shape(), std::move(out), {a, b}, [p](Node& self) {
    Node* na = self.inputs[0].get();
    Node* nb = self.inputs[1].get();
    Node* nbig = p.swap ? nb : na;
    Node* nsmall = p.swap ? na : nb;
    const float sign_big = p.swap ? -1.0f : 1.0f;
    if (float* g = grad_buf(nbig))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += sign_big * self.grad[i];
    if (float* g = grad_buf(nsmall)) {
      for (int64_t o = 0; o < p.outer; ++o) {
        double acc = 0.0;
        for (int64_t i = 0; i < p.inner; ++i) acc += self.grad[size_t(o * p.inner + i)];
        g[o] += float(-sign_big * acc);
      }
    }
  });
  if (p.swap)
    ew_shadow(t, big, small, p, [](double x, double y) { return y - x; });
  else
    ew_shadow(t, big, small, p, [](double x, double y) { return x - y; });
  return t;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  BroadcastPlan p = plan_elementwise("mul", a.shape(), b.shape());
  const Tensor& big = p.swap ? b : a;
  const Tensor& small = p.swap ? a : b;
  auto out = ew_forward(big, small, p, [](float x, float y) { return x * y; });
  Tensor t = make_op("mul", big.shape(), std::move(out), {a, b}, [p](Node& self) {
    Node* na = self.inputs[0].get();
    Node* nb = self.inputs[1].get();
    Node* nbig = p.swap ? nb : na;
    Node* nsmall = p.swap ? na : nb;
    const auto& vb = nbig->value;
    const auto& vs = nsmall->value;
    if (float* g = grad_buf(nbig)) {
      for (int64_t o = 0; o < p.outer; ++o)
        for (int64_t i = 0; i < p.inner; ++i) {
          size_t idx = size_t(o * p.inner + i);
          g[idx] += self.grad[idx] * vs[size_t(o)];
        }
    }
    if (float* g = grad_buf(nsmall)) {
      for (int64_t o = 0; o < p.outer; ++o) {
        double acc = 0.0;
        for (int64_t i = 0; i < p.inner; ++i) {
          size_t idx = size_t(o * p.inner + i);
          acc += double(self.grad[idx]) * vb[idx];
        }
        g[o] += float(acc);
      }
    }
  });
  ew_shadow(t, big, small, p, [](double x, double y) { return x * y; });
  return t;
}

Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (float& x : out) x *= c;
  Tensor t = make_op("scale", a.shape(), std::move(out), {a}, [c](Node& self) {
    if (float* g = grad_buf(self.inputs[0].get()))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
  });
  if (g_precise_forward) {
    auto& n = *t.node();
    n.value64.resize(n.value.size());
    for (size_t i = 0; i < n.value64.size(); ++i)
      n.value64[i] = detail::val64(a.node(), i) * double(c);
  }
  return t;
}

// ---- matmul / linear ----------------------------------------------------

namespace {

// out[i,j] = sum_k a[i,k]*b[k,j], double accumulation, k ascending.
void matmul_ref(const float* a, const float* b, float* out, int M, int K, int N) {
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += double(a[i * K + k]) * double(b[k * N + j]);
      out[i * N + j] = float(acc);
    }
}

// Same accumulation order (k ascending per output element) with row-buffered
// cache-friendly traversal; bit-identical to matmul_ref.
void matmul_opt(const float* a, const float* b, float* out, int M, int K, int N) {
  std::vector<double> acc(size_t(N), 0.0);
  for (int i = 0; i < M; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a + size_t(i) * K;
    for (int k = 0; k < K; ++k) {
      const double av = arow[k];
      const float* brow = b + size_t(k) * N;
      for (int j = 0; j < N; ++j) acc[size_t(j)] += av * double(brow[j]);
    }
    for (int j = 0; j < N; ++j) out[size_t(i) * N + j] = float(acc[size_t(j)]);
  }
}

void matmul_dispatch(const float* a, const float* b, float* out, int M, int K, int N) {
  if (g_reference_kernels)
    matmul_ref(a, b, out, M, K, N);
  else
    matmul_opt(a, b, out, M, K, N);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  std::vector<float> out(size_t(M) * N);
  matmul_dispatch(a.data().data(), b.data().data(), out.data(), M, K, N);
  std::vector<double> out64;
  if (g_precise_forward) {
    const auto av = widen(a);
    const auto bv = widen(b);
    out64.resize(size_t(M) * N);
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += av[size_t(i) * K + k] * bv[size_t(k) * N + j];
        out64[size_t(i) * N + j] = acc;
      }
  }
  Tensor t = make_op("matmul", {M, N}, std::move(out), {a, b}, [M, K, N](Node& self) {
    Node* na = self.inputs[0].get();
    Node* nb = self.inputs[1].get();
    const float* av = na->value.data();
    const float* bv = nb->value.data();
    const float* g = self.grad.data();
    if (float* ga = grad_buf(na)) {
      // dA[i,k] = sum_j G[i,j] * B[k,j]
      for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
          double acc = 0.0;
          for (int j = 0; j < N; ++j)
            acc += double(g[i * N + j]) * double(bv[k * N + j]);
          ga[i * K + k] += float(acc);
        }
    }
    if (float* gb = grad_buf(nb)) {
      // dB[k,j] = sum_i A[i,k] * G[i,j]
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < N; ++j) {
          double acc = 0.0;
          for (int i = 0; i < M; ++i)
            acc += double(av[i * K + k]) * double(g[i * N + j]);
          gb[k * N + j] += float(acc);
        }
    }
  });
  if (!out64.empty()) t.node()->value64 = std::move(out64);
  return t;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1])
    throw std::invalid_argument("linear: shape mismatch x " + shape_str(x.shape()) +
                                " vs w " + shape_str(w.shape()));
  const int M = x.shape()[0], In = x.shape()[1], Out = w.shape()[0];
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != Out))
    throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()) +
                                " does not match out dim " + std::to_string(Out));
  const float* xv = x.data().data();
  const float* wv = w.data().data();
  std::vector<float> out(size_t(M) * Out);
  for (int i = 0; i < M; ++i)
    for (int o = 0; o < Out; ++o) {
      double acc = b.defined() ? double(b.data()[size_t(o)]) : 0.0;
      for (int k = 0; k < In; ++k)
        acc += double(xv[i * In + k]) * double(wv[o * In + k]);
      out[size_t(i) * Out + o] = float(acc);
    }
  std::vector<double> out64;
  if (g_precise_forward) {
    const auto xa = widen(x);
    const auto wa = widen(w);
    out64.resize(size_t(M) * Out);
    for (int i = 0; i < M; ++i)
      for (int o = 0; o < Out; ++o) {
        double acc = b.defined() ? detail::val64(b.node(), size_t(o)) : 0.0;
        for (int k = 0; k < In; ++k)
          acc += xa[size_t(i) * In + k] * wa[size_t(o) * In + k];
        out64[size_t(i) * Out + o] = acc;
      }
  }
  auto back = [M, In, Out, has_b = b.defined()](Node& self) {
    Node* nx = self.inputs[0].get();
    Node* nw = self.inputs[1].get();
    const float* xv = nx->value.data();
    const float* wv = nw->value.data();
    const float* g = self.grad.data();
    if (float* gx = grad_buf(nx)) {
      for (int i = 0; i < M; ++i)
        for (int k = 0; k < In; ++k) {
          double acc = 0.0;
          for (int o = 0; o < Out; ++o)
            acc += double(g[i * Out + o]) * double(wv[o * In + k]);
          gx[i * In + k] += float(acc);
        }
    }
    if (float* gw = grad_buf(nw)) {
      for (int o = 0; o < Out; ++o)
        for (int k = 0; k < In; ++k) {
          double acc = 0.0;
          for (int i = 0; i < M; ++i)
            acc += double(g[i * Out + o]) * double(xv[i * In + k]);
          gw[o * In + k] += float(acc);
        }
    }
    if (has_b) {
      if (float* gb = grad_buf(self.inputs[2].get())) {
        for (int o = 0; o < Out; ++o) {
          double acc = 0.0;
          for (int i = 0; i < M; ++i) acc += double(g[i * Out + o]);
          gb[o] += float(acc);
        }
      }
    }
  };
  Tensor t = b.defined()
                 ? make_op("linear", {M, Out}, std::move(out), {x, w, b}, std::move(back))
                 : make_op("linear", {M, Out}, std::move(out), {x, w}, std::move(back));
  if (!out64.empty()) t.node()->value64 = std::move(out64);
  return t;
}

// ---- activations --------------------------------------------------------

namespace {

template <class F, class DF, class F64>
Tensor unary_op(const char* name, const Tensor& x, F f, DF df, F64 f64) {
  std::vector<float> out(x.data().size());
  const auto xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Tensor t = make_op(name, x.shape(), std::move(out), {x}, [df](Node& self) {
    Node* nx = self.inputs[0].get();
    if (float* g = grad_buf(nx))
      for (size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * df(nx->value[i], self.value[i]);
  });
  if (g_precise_forward) {
    auto& n = *t.node();
    n.value64.resize(n.value.size());
    for (size_t i = 0; i < n.value64.size(); ++i)
      n.value64[i] = f64(detail::val64(x.node(), i));
  }
  return t;
}

float sigmoid_f(float x) {
  return x >= 0 ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
}

}  // namespace

namespace {
double sigmoid_d(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace

Tensor relu(const Tensor& x) {
  return unary_op("relu", x, [](float v) { return v > 0 ? v : 0.0f; },
                  [](float v, float) { return v > 0 ? 1.0f : 0.0f; },
                  [](double v) { return v > 0 ? v : 0.0; });
}

Tensor leaky_relu(const Tensor& x, float slope) {
  return unary_op("leaky_relu", x,
                  [slope](float v) { return v > 0 ? v : slope * v; },
                  [slope](float v, float) { return v > 0 ? 1.0f : slope; },
                  [slope](double v) { return v > 0 ? v : double(slope) * v; });
}

Tensor silu(const Tensor& x) {
  return unary_op("silu", x, [](float v) { return v * sigmoid_f(v); },
                  [](float v, float) {
                    float s = sigmoid_f(v);
                    return s * (1.0f + v * (1.0f - s));
                  },
                  [](double v) { return v * sigmoid_d(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op("sigmoid", x, [](float v) { return sigmoid_f(v); },
                  [](float, float y) { return y * (1.0f - y); },
                  [](double v) { return sigmoid_d(v); });
}

Tensor softmax_lastdim(const Tensor& x) {
  const Shape& s = x.shape();
  const int64_t last = s.back();
  const int64_t rows = x.numel() / last;
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * last;
    float m = row[0];
    for (int64_t j = 1; j < last; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < last; ++j) z += std::exp(double(row[j]) - m);
    for (int64_t j = 0; j < last; ++j)
      out[size_t(r * last + j)] = float(std::exp(double(row[j]) - m) / z);
  }
  Tensor t = make_op("softmax", s, std::move(out), {x}, [last, rows](Node& self) {
    if (float* g = grad_buf(self.inputs[0].get())) {
      for (int64_t r = 0; r < rows; ++r) {
        const float* p = self.value.data() + r * last;
        const float* go = self.grad.data() + r * last;
        double dot = 0.0;
        for (int64_t j = 0; j < last; ++j) dot += double(go[j]) * p[j];
        for (int64_t j = 0; j < last; ++j)
          g[r * last + j] += float(p[j] * (double(go[j]) - dot));
      }
    }
  });
  if (g_precise_forward) {
    const auto xa = widen(x);
    auto& n = *t.node();
    n.value64.resize(xa.size());
    for (int64_t r = 0; r < rows; ++r) {
      double m2 = xa[size_t(r * last)];
      for (int64_t j = 1; j < last; ++j) m2 = std::max(m2, xa[size_t(r * last + j)]);
      double z = 0.0;
      for (int64_t j = 0; j < last; ++j) z += std::exp(xa[size_t(r * last + j)] - m2);
      for (int64_t j = 0; j < last; ++j)
        n.value64[size_t(r * last + j)] = std::exp(xa[size_t(r * last + j)] - m2) / z;
    }
  }
  return t;
}

Tensor instance_norm(const Tensor& x, float eps) {
  if (x.shape().size() < 2)
    throw std::invalid_argument("instance_norm: rank >= 2 required, got " +
                                shape_str(x.shape()));
  const int C = x.shape()[0];
  const int64_t m = x.numel() / C;
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  std::vector<float> inv_std(size_t(C), 0.0f);
  for (int c = 0; c < C; ++c) {
    const float* ch = xv.data() + int64_t(c) * m;
    double mu = 0.0;
    for (int64_t i = 0; i < m; ++i) mu += ch[i];
    mu /= double(m);
    double var = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      double d = ch[i] - mu;
      var += d * d;
    }
    var /= double(m);
    double inv = 1.0 / std::sqrt(var + double(eps));
    inv_std[size_t(c)] = float(inv);
    for (int64_t i = 0; i < m; ++i)
      out[size_t(int64_t(c) * m + i)] = float((ch[i] - mu) * inv);
  }
  Tensor t = make_op("instance_norm", x.shape(), std::move(out), {x},
                 [C, m, inv_std = std::move(inv_std)](Node& self) {
                   if (float* g = grad_buf(self.inputs[0].get())) {
                     for (int c = 0; c < C; ++c) {
                       const float* y = self.value.data() + int64_t(c) * m;
                       const float* go = self.grad.data() + int64_t(c) * m;
                       double mg = 0.0, mgy = 0.0;
                       for (int64_t i = 0; i < m; ++i) {
                         mg += go[i];
                         mgy += double(go[i]) * y[i];
                       }
                       mg /= double(m);
                       mgy /= double(m);
                       const double inv = inv_std[size_t(c)];
                       float* gc = g + int64_t(c) * m;
                       for (int64_t i = 0; i < m; ++i)
                         gc[i] += float(inv * (double(go[i]) - mg - double(y[i]) * mgy));
                     }
                   }
                 });
  if (g_precise_forward) {
    const auto xa = widen(x);
    auto& n = *t.node();
    n.value64.resize(xa.size());
    for (int c = 0; c < C; ++c) {
      const double* ch = xa.data() + int64_t(c) * m;
      double mu = 0.0;
      for (int64_t i = 0; i < m; ++i) mu += ch[i];
      mu /= double(m);
      double var = 0.0;
      for (int64_t i = 0; i < m; ++i) var += (ch[i] - mu) * (ch[i] - mu);
      var /= double(m);
      const double inv = 1.0 / std::sqrt(var + double(eps));
      for (int64_t i = 0; i < m; ++i)
        n.value64[size_t(int64_t(c) * m + i)] = (ch[i] - mu) * inv;
    }
  }
  return t;
}

// ---- shape ops ----------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= int(s0.size()))
    throw std::invalid_argument("concat: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(s0));
  Shape out_shape = s0;
  int64_t axis_total = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != s0.size())
      throw std::invalid_argument("concat: rank mismatch " + shape_str(s0) + " vs " +
                                  shape_str(s));
    for (size_t i = 0; i < s.size(); ++i)
      if (int(i) != axis && s[i] != s0[i])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(s0) +
                                    " vs " + shape_str(s));
    axis_total += s[size_t(axis)];
  }
  out_shape[size_t(axis)] = int(axis_total);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[size_t(i)];
  for (size_t i = size_t(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<float> out(size_t(shape_numel(out_shape)));
  std::vector<int64_t> blocks;
  int64_t off = 0;
  for (const Tensor& t : parts) {
    const int64_t blk = t.shape()[size_t(axis)] * inner;
    blocks.push_back(blk);
    const auto tv = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * axis_total * inner + off, tv.data() + o * blk,
                  size_t(blk) * sizeof(float));
    off += blk;
  }
  std::vector<Tensor> ins(parts.begin(), parts.end());
  auto n = std::make_shared<Node>();
  n->shape = out_shape;
  n->value = std::move(out);
  n->op = "concat";
  for (const Tensor& t : ins)
    if (t.node()->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    for (const Tensor& t : ins) n->inputs.push_back(t.node());
    const int64_t row = axis_total * inner;
    n->backward = [outer, row, blocks](Node& self) {
      int64_t off = 0;
      for (size_t p = 0; p < self.inputs.size(); ++p) {
        const int64_t blk = blocks[p];
        if (float* g = grad_buf(self.inputs[p].get())) {
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < blk; ++i)
              g[o * blk + i] += self.grad[size_t(o * row + off + i)];
        }
        off += blk;
      }
    };
  }
  check_finite("concat", n->value);
  if (g_precise_forward) {
    n->value64.resize(n->value.size());
    int64_t off64 = 0;
    for (size_t p_i = 0; p_i < ins.size(); ++p_i) {
      const auto tv = widen(ins[p_i]);
      const int64_t blk = blocks[p_i];
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < blk; ++i)
          n->value64[size_t(o * axis_total * inner + off64 + i)] = tv[size_t(o * blk + i)];
      off64 += blk;
    }
  }
  return Tensor(n);
}

Tensor reshape(const Tensor& x, Shape s) {
  validate_shape(s);
  if (shape_numel(s) != x.numel())
    throw std::invalid_argument("reshape: element count mismatch " +
                                shape_str(x.shape()) + " -> " + shape_str(s));
  std::vector<float> out(x.data().begin(), x.data().end());
  Tensor t = make_op("reshape", std::move(s), std::move(out), {x}, [](Node& self) {
    if (float* g = grad_buf(self.inputs[0].get()))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
  if (g_precise_forward) t.node()->value64 = widen(x);
  return t;
}

Tensor transpose2d(const Tensor& x) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("transpose2d: rank-2 required, got " +
                                shape_str(x.shape()));
  const int R = x.shape()[0], C = x.shape()[1];
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[size_t(c) * R + r] = xv[size_t(r) * C + c];
  Tensor t = make_op("transpose2d", {C, R}, std::move(out), {x}, [R, C](Node& self) {
    if (float* g = grad_buf(self.inputs[0].get()))
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          g[size_t(r) * C + c] += self.grad[size_t(c) * R + r];
  });
  if (g_precise_forward) {
    const auto xa = widen(x);
    auto& n = *t.node();
    n.value64.resize(xa.size());
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) n.value64[size_t(c) * R + r] = xa[size_t(r) * C + c];
  }
  return t;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor t = make_op("sum", {1}, {float(acc)}, {x}, [](Node& self) {
    if (float* g = grad_buf(self.inputs[0].get())) {
      const float go = self.grad[0];
      for (size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += go;
    }
  });
  if (g_precise_forward) {
    double a64 = 0.0;
    for (size_t i = 0; i < x.data().size(); ++i) a64 += detail::val64(x.node(), i);
    t.node()->value64 = {a64};
  }
  return t;
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const int64_t n = x.numel();
  Tensor t = make_op("mean", {1}, {float(acc / double(n))}, {x}, [n](Node& self) {
    if (float* g = grad_buf(self.inputs[0].get())) {
      const float go = self.grad[0] / float(n);
      for (size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += go;
    }
  });
  if (g_precise_forward) {
    double a64 = 0.0;
    for (size_t i = 0; i < x.data().size(); ++i) a64 += detail::val64(x.node(), i);
    t.node()->value64 = {a64 / double(n)};
  }
  return t;
}

// ---- conv3d / upsample --------------------------------------------------

namespace {

struct ConvDims {
  int ci, d, h, w;       // input
  int co, k;             // kernel
  int stride, pad;
  int od, oh, ow;        // output
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.shape().size() != 4 || w.shape().size() != 5)
    throw std::invalid_argument("conv3d: expected x[C,D,H,W], w[Co,Ci,k,k,k], got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  ConvDims d{};
  d.ci = x.shape()[0];
  d.d = x.shape()[1];
  d.h = x.shape()[2];
  d.w = x.shape()[3];
  d.co = w.shape()[0];
  d.k = w.shape()[2];
  if (w.shape()[1] != d.ci || w.shape()[3] != d.k || w.shape()[4] != d.k)
    throw std::invalid_argument("conv3d: kernel shape " + shape_str(w.shape()) +
                                " does not match input " + shape_str(x.shape()));
  if (d.k % 2 == 0 || d.k < 1) throw std::invalid_argument("conv3d: kernel size must be odd");
  if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv3d: padding must be >= 0");
  d.stride = stride;
  d.pad = padding;
  d.od = (d.d + 2 * padding - d.k) / stride + 1;
  d.oh = (d.h + 2 * padding - d.k) / stride + 1;
  d.ow = (d.w + 2 * padding - d.k) / stride + 1;
  if (d.d + 2 * padding < d.k || d.h + 2 * padding < d.k || d.w + 2 * padding < d.k ||
      d.od < 1 || d.oh < 1 || d.ow < 1)
    throw std::invalid_argument("conv3d: non-positive output extent for input " +
                                shape_str(x.shape()));
  return d;
}

// Reference kernel: plain bounds-checked loops. Accumulation order per output
// element is (ci, kz, ky, kx) ascending in double; padded taps are skipped.
void conv3d_ref(const ConvDims& c, const float* x, const float* w, const float* b,
                float* out) {
  for (int co = 0; co < c.co; ++co)
    for (int od = 0; od < c.od; ++od)
      for (int oh = 0; oh < c.oh; ++oh)
        for (int ow = 0; ow < c.ow; ++ow) {
          double acc = b ? double(b[co]) : 0.0;
          for (int ci = 0; ci < c.ci; ++ci)
            for (int kz = 0; kz < c.k; ++kz) {
              const int iz = od * c.stride + kz - c.pad;
              if (iz < 0 || iz >= c.d) continue;
              for (int ky = 0; ky < c.k; ++ky) {
                const int iy = oh * c.stride + ky - c.pad;
                if (iy < 0 || iy >= c.h) continue;
                for (int kx = 0; kx < c.k; ++kx) {
                  const int ix = ow * c.stride + kx - c.pad;
                  if (ix < 0 || ix >= c.w) continue;
                  acc += double(x[((int64_t(ci) * c.d + iz) * c.h + iy) * c.w + ix]) *
                         double(w[(((int64_t(co) * c.ci + ci) * c.k + kz) * c.k + ky) * c.k + kx]);
                }
              }
            }
          out[((int64_t(co) * c.od + od) * c.oh + oh) * c.ow + ow] = float(acc);
        }
}

// Optimized kernel: hoists bounds checks by clamping tap ranges per output
// coordinate. Same (ci, kz, ky, kx) ascending order, bit-identical to ref.
void conv3d_opt(const ConvDims& c, const float* x, const float* w, const float* b,
                float* out) {
  for (int co = 0; co < c.co; ++co) {
    const float* wco = w + int64_t(co) * c.ci * c.k * c.k * c.k;
    for (int od = 0; od < c.od; ++od) {
      const int z0 = od * c.stride - c.pad;
      const int kz_lo = std::max(0, -z0), kz_hi = std::min(c.k, c.d - z0);
      for (int oh = 0; oh < c.oh; ++oh) {
        const int y0 = oh * c.stride - c.pad;
        const int ky_lo = std::max(0, -y0), ky_hi = std::min(c.k, c.h - y0);
        for (int ow = 0; ow < c.ow; ++ow) {
          const int x0 = ow * c.stride - c.pad;
          const int kx_lo = std::max(0, -x0), kx_hi = std::min(c.k, c.w - x0);
          double acc = b ? double(b[co]) : 0.0;
          for (int ci = 0; ci < c.ci; ++ci) {
            const float* xci = x + int64_t(ci) * c.d * c.h * c.w;
            const float* wci = wco + int64_t(ci) * c.k * c.k * c.k;
            for (int kz = kz_lo; kz < kz_hi; ++kz) {
              const float* xz = xci + int64_t(z0 + kz) * c.h * c.w;
              const float* wz = wci + int64_t(kz) * c.k * c.k;
              for (int ky = ky_lo; ky < ky_hi; ++ky) {
                const float* xy = xz + int64_t(y0 + ky) * c.w + x0;
                const float* wy = wz + int64_t(ky) * c.k;
                for (int kx = kx_lo; kx < kx_hi; ++kx)
                  acc += double(xy[kx]) * double(wy[kx]);
              }
            }
          }
          out[((int64_t(co) * c.od + od) * c.oh + oh) * c.ow + ow] = float(acc);
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding) {
  ConvDims c = conv_dims(x, w, stride, padding);
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != c.co))
    throw std::invalid_argument("conv3d: bias shape " + shape_str(b.shape()) +
                                " does not match out channels " + std::to_string(c.co));
  std::vector<float> out(size_t(c.co) * c.od * c.oh * c.ow);
  const float* bp = b.defined() ? b.data().data() : nullptr;
  if (g_reference_kernels)
    conv3d_ref(c, x.data().data(), w.data().data(), bp, out.data());
  else
    conv3d_opt(c, x.data().data(), w.data().data(), bp, out.data());

  std::vector<double> out64;
  if (g_precise_forward) {
    const auto xa = widen(x);
    const auto wa = widen(w);
    std::vector<double> ba;
    if (b.defined()) ba = widen(b);
    out64.assign(out.size(), 0.0);
    for (int co = 0; co < c.co; ++co)
      for (int od = 0; od < c.od; ++od)
        for (int oh = 0; oh < c.oh; ++oh)
          for (int ow = 0; ow < c.ow; ++ow) {
            double acc = b.defined() ? ba[size_t(co)] : 0.0;
            for (int ci = 0; ci < c.ci; ++ci)
              for (int kz = 0; kz < c.k; ++kz) {
                const int iz = od * c.stride + kz - c.pad;
                if (iz < 0 || iz >= c.d) continue;
                for (int ky = 0; ky < c.k; ++ky) {
                  const int iy = oh * c.stride + ky - c.pad;
                  if (iy < 0 || iy >= c.h) continue;
                  for (int kx = 0; kx < c.k; ++kx) {
                    const int ix = ow * c.stride + kx - c.pad;
                    if (ix < 0 || ix >= c.w) continue;
                    acc += xa[size_t(((int64_t(ci) * c.d + iz) * c.h + iy) * c.w + ix)] *
                           wa[size_t((((int64_t(co) * c.ci + ci) * c.k + kz) * c.k + ky) * c.k + kx)];
                  }
                }
              }
            out64[size_t(((int64_t(co) * c.od + od) * c.oh + oh) * c.ow + ow)] = acc;
          }
  }

  auto back = [c, has_b = b.defined()](Node& self) {
    Node* nx = self.inputs[0].get();
    Node* nw = self.inputs[1].get();
    const float* xv = nx->value.data();
    const float* wv = nw->value.data();
    const float* g = self.grad.data();
    float* gx = grad_buf(nx);
    float* gw = grad_buf(nw);
    float* gb = has_b ? grad_buf(self.inputs[2].get()) : nullptr;
    for (int co = 0; co < c.co; ++co)
      for (int od = 0; od < c.od; ++od)
        for (int oh = 0; oh < c.oh; ++oh)
          for (int ow = 0; ow < c.ow; ++ow) {
            const float go = g[((int64_t(co) * c.od + od) * c.oh + oh) * c.ow + ow];
            if (go == 0.0f && !gb) continue;
            if (gb) gb[co] += go;
            if (!gx && !gw) continue;
            for (int ci = 0; ci < c.ci; ++ci)
              for (int kz = 0; kz < c.k; ++kz) {
                const int iz = od * c.stride + kz - c.pad;
                if (iz < 0 || iz >= c.d) continue;
                for (int ky = 0; ky < c.k; ++ky) {
                  const int iy = oh * c.stride + ky - c.pad;
                  if (iy < 0 || iy >= c.h) continue;
                  for (int kx = 0; kx < c.k; ++kx) {
                    const int ix = ow * c.stride + kx - c.pad;
                    if (ix < 0 || ix >= c.w) continue;
                    const int64_t xi = ((int64_t(ci) * c.d + iz) * c.h + iy) * c.w + ix;
                    const int64_t wi =
                        (((int64_t(co) * c.ci + ci) * c.k + kz) * c.k + ky) * c.k + kx;
                    if (gx) gx[xi] += go * wv[wi];
                    if (gw) gw[wi] += go * xv[xi];
                  }
                }
              }
          }
  };
  Shape os{c.co, c.od, c.oh, c.ow};
  Tensor t = b.defined()
                 ? make_op("conv3d", std::move(os), std::move(out), {x, w, b}, std::move(back))
                 : make_op("conv3d", std::move(os), std::move(out), {x, w}, std::move(back));
  if (!out64.empty()) t.node()->value64 = std::move(out64);
  return t;
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("upsample_nearest2x: expected [C,D,H,W], got " +
                                shape_str(x.shape()));
  const int C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::vector<float> out(size_t(C) * 8 * D * H * W);
  const auto xv = x.data();
  const int OD = 2 * D, OH = 2 * H, OW = 2 * W;
  for (int cch = 0; cch < C; ++cch)
    for (int od = 0; od < OD; ++od)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow)
          out[((int64_t(cch) * OD + od) * OH + oh) * OW + ow] =
              xv[((int64_t(cch) * D + od / 2) * H + oh / 2) * W + ow / 2];
  Tensor t = make_op("upsample_nearest2x", {C, OD, OH, OW}, std::move(out), {x},
                 [C, D, H, W, OD, OH, OW](Node& self) {
                   if (float* g = grad_buf(self.inputs[0].get())) {
                     for (int cch = 0; cch < C; ++cch)
                       for (int od = 0; od < OD; ++od)
                         for (int oh = 0; oh < OH; ++oh)
                           for (int ow = 0; ow < OW; ++ow)
                             g[((int64_t(cch) * D + od / 2) * H + oh / 2) * W + ow / 2] +=
                                 self.grad[size_t(((int64_t(cch) * OD + od) * OH + oh) * OW +
                                                  ow)];
                   }
                 });
  if (g_precise_forward) {
    const auto xa = widen(x);
    auto& n = *t.node();
    n.value64.resize(n.value.size());
    for (int cch = 0; cch < C; ++cch)
      for (int od = 0; od < OD; ++od)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow)
            n.value64[size_t(((int64_t(cch) * OD + od) * OH + oh) * OW + ow)] =
                xa[size_t(((int64_t(cch) * D + od / 2) * H + oh / 2) * W + ow / 2)];
  }
  return t;
}

// ---- backward / grad_check ----------------------------------------------

void backward(const Tensor& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined tensor");
  NodePtr r = root.node();
  if (shape_numel(r->shape) != 1)
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_str(r->shape));
  if (!r->requires_grad) return;

  // iterative post-order topological sort
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  std::vector<std::pair<Node*, size_t>> stack{{r.get(), 0}};
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size()) {
      Node* in = n->inputs[idx++].get();
      if (in->requires_grad && !done.count(in)) stack.push_back({in, 0});
    } else {
      if (!done.count(n)) {
        done.insert(n);
        order.push_back(n);
      }
      stack.pop_back();
    }
  }

  r->grad.assign(1, 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                  const Tensor& point, float eps) {
  if (eps <= 0.0f) throw std::invalid_argument("grad_check: eps must be positive");
  struct PreciseGuard {
    bool was;
    PreciseGuard() : was(precise_forward()) { set_precise_forward(true); }
    ~PreciseGuard() { set_precise_forward(was); }
  } precise_guard;

  Tensor p = Tensor::from(point.shape(),
                          std::vector<float>(point.data().begin(), point.data().end()),
                          /*requires_grad=*/true);
  Tensor y = fn(p);
  if (y.numel() != 1)
    throw std::invalid_argument("grad_check: fn must return a scalar, got " +
                                shape_str(y.shape()));
  backward(y);
  std::vector<float> analytic(p.grad().begin(), p.grad().end());
  if (analytic.empty()) analytic.assign(size_t(p.numel()), 0.0f);

  Tensor q = Tensor::from(point.shape(),
                          std::vector<float>(point.data().begin(), point.data().end()));
  double worst = 0.0;
  for (int64_t i = 0; i < q.numel(); ++i) {
    const float orig = q.raw()[size_t(i)];
    // divide by the realized float perturbation, not the nominal eps
    const float xp = orig + eps;
    const float xm = orig - eps;
    q.raw()[size_t(i)] = xp;
    const double fp = fn(q).item_precise();
    q.raw()[size_t(i)] = xm;
    const double fm = fn(q).item_precise();
    q.raw()[size_t(i)] = orig;
    const double numeric = (fp - fm) / (double(xp) - double(xm));
    const double a = double(analytic[size_t(i)]);
    const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---- serialization ------------------------------------------------------

namespace {
constexpr char kTensorMagic[4] = {'P', 'U', 'M', 'T'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                        (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor read: truncated stream");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 4);
  write_u32(os, uint32_t(t.shape().size()));
  for (int e : t.shape()) write_u32(os, uint32_t(e));
  // assumes little-endian host (x86/arm64), true everywhere this runs
  static_assert(sizeof(float) == 4);
  const auto d = t.data();
  for (float v : d) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
  }
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw std::runtime_error("tensor read: bad magic");
  const uint32_t rank = read_u32(is);
  if (rank == 0 || rank > 8) throw std::runtime_error("tensor read: bad rank");
  Shape s(rank);
  for (uint32_t i = 0; i < rank; ++i) s[i] = int(read_u32(is));
  std::vector<float> data(size_t(shape_numel(s)));
  for (float& v : data) {
    uint32_t bits = read_u32(is);
    std::memcpy(&v, &bits, 4);
  }
  return Tensor::from(std::move(s), std::move(data));
}

}  // namespace puuma
