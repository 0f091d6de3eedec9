#include "puuma/ssm.hpp"

#include <cmath>
#include <stdexcept>

namespace puuma {

namespace {

double softplus_d(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

}  // namespace

SsmParams SsmParams::init(int channels, int state_dim, Rng& rng, bool requires_grad) {
  if (channels < 1 || state_dim < 1)
    throw std::invalid_argument("SsmParams: channels and state_dim must be >= 1");
  SsmParams p;
  p.state_dim = state_dim;
  // a[c,n] = log(n+1): the usual real-valued SSM decay ladder
  std::vector<float> a(size_t(channels) * state_dim);
  for (int c = 0; c < channels; ++c)
    for (int n = 0; n < state_dim; ++n)
      a[size_t(c) * state_dim + n] = float(std::log(double(n + 1)));
  p.log_decay = Tensor::from({channels, state_dim}, std::move(a), requires_grad);
  const float ws = float(1.0 / std::sqrt(double(channels)));
  p.w_b = Tensor::randn({state_dim, channels}, rng, ws, requires_grad);
  p.w_c = Tensor::randn({state_dim, channels}, rng, ws, requires_grad);
  p.w_delta = Tensor::randn({channels, channels}, rng, ws, requires_grad);
  // softplus(-2.2522) ~ 0.1: moderate initial step size
  p.b_delta = Tensor::full({channels}, -2.2522f, requires_grad);
  return p;
}

std::vector<Tensor> SsmParams::parameters() const {
  return {log_decay, w_b, w_c, w_delta, b_delta};
}

Tensor ssm_scan(const Tensor& x, const SsmParams& params) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("ssm_scan: expected x[L,C], got " + shape_str(x.shape()));
  const int L = x.shape()[0], C = x.shape()[1], N = params.state_dim;
  if (L < 1) throw std::invalid_argument("ssm_scan: empty sequence");
  if (params.log_decay.shape() != Shape{C, N} || params.w_b.shape() != Shape{N, C} ||
      params.w_c.shape() != Shape{N, C} || params.w_delta.shape() != Shape{C, C} ||
      params.b_delta.shape() != Shape{C})
    throw std::invalid_argument("ssm_scan: parameter shapes inconsistent with C=" +
                                std::to_string(C) + " N=" + std::to_string(N));

  const bool force_zero = params.force_decay_zero;
  const float* xv = x.data().data();
  const float* av = params.log_decay.data().data();
  const float* wb = params.w_b.data().data();
  const float* wc = params.w_c.data().data();
  const float* wd = params.w_delta.data().data();
  const float* bd = params.b_delta.data().data();

  // per-step projections
  std::vector<float> B(size_t(L) * N), Cc(size_t(L) * N), delta(size_t(L) * C);
  for (int t = 0; t < L; ++t) {
    const float* xt = xv + size_t(t) * C;
    for (int n = 0; n < N; ++n) {
      double accB = 0.0, accC = 0.0;
      for (int c = 0; c < C; ++c) {
        accB += double(wb[n * C + c]) * xt[c];
        accC += double(wc[n * C + c]) * xt[c];
      }
      B[size_t(t) * N + n] = float(accB);
      Cc[size_t(t) * N + n] = float(accC);
    }
    for (int c = 0; c < C; ++c) {
      double acc = bd[c];
      for (int k = 0; k < C; ++k) acc += double(wd[c * C + k]) * xt[k];
      delta[size_t(t) * C + c] = float(softplus_d(acc));
    }
  }

  std::vector<float> A(size_t(C) * N);
  for (int64_t i = 0; i < int64_t(C) * N; ++i) A[size_t(i)] = -std::exp(av[i]);

  // recurrence; the full state history is saved for the backward pass
  std::vector<float> h(size_t(L) * C * N, 0.0f);
  std::vector<float> y(size_t(L) * C);
  for (int t = 0; t < L; ++t) {
    const float* hprev = t > 0 ? h.data() + size_t(t - 1) * C * N : nullptr;
    float* ht = h.data() + size_t(t) * C * N;
    for (int c = 0; c < C; ++c) {
      const float dt = delta[size_t(t) * C + c];
      const float xt = xv[size_t(t) * C + c];
      double yacc = 0.0;
      for (int n = 0; n < N; ++n) {
        const float abar = force_zero ? 0.0f : std::exp(dt * A[size_t(c) * N + n]);
        const float hp = hprev ? hprev[size_t(c) * N + n] : 0.0f;
        const float hv = abar * hp + dt * B[size_t(t) * N + n] * xt;
        ht[size_t(c) * N + n] = hv;
        yacc += double(Cc[size_t(t) * N + n]) * hv;
      }
      y[size_t(t) * C + c] = float(yacc);
    }
  }

  auto back = [L, C, N, force_zero, B = std::move(B), Cc = std::move(Cc),
               delta = std::move(delta), A = std::move(A),
               h = std::move(h)](detail::Node& self) {
    using detail::grad_buf;
    detail::Node* nx = self.inputs[0].get();
    detail::Node* na = self.inputs[1].get();
    detail::Node* nwb = self.inputs[2].get();
    detail::Node* nwc = self.inputs[3].get();
    detail::Node* nwd = self.inputs[4].get();
    detail::Node* nbd = self.inputs[5].get();
    const float* xv = nx->value.data();
    const float* wb = nwb->value.data();
    const float* wc = nwc->value.data();
    const float* wd = nwd->value.data();
    const float* g = self.grad.data();

    float* gx = grad_buf(nx);
    float* ga = grad_buf(na);
    float* gwb = grad_buf(nwb);
    float* gwc = grad_buf(nwc);
    float* gwd = grad_buf(nwd);
    float* gbd = grad_buf(nbd);

    // intermediate grads on the per-step projections
    std::vector<float> gB(size_t(L) * N, 0.0f), gC(size_t(L) * N, 0.0f),
        gDelta(size_t(L) * C, 0.0f);
    std::vector<double> gh(size_t(C) * N, 0.0);  // carried dL/dh_t

    for (int t = L - 1; t >= 0; --t) {
      const float* ht = h.data() + size_t(t) * C * N;
      const float* hprev = t > 0 ? h.data() + size_t(t - 1) * C * N : nullptr;
      for (int c = 0; c < C; ++c) {
        const float gy = g[size_t(t) * C + c];
        const float dt = delta[size_t(t) * C + c];
        const float xt = xv[size_t(t) * C + c];
        double gdt = 0.0, gxt = 0.0;
        for (int n = 0; n < N; ++n) {
          const size_t cn = size_t(c) * N + n;
          const size_t tn = size_t(t) * N + n;
          // y_t[c] = sum_n Cc[t,n] h_t[c,n]
          gC[tn] += gy * ht[cn];
          double ghv = gh[cn] + double(gy) * Cc[tn];
          // h_t = abar h_{t-1} + dt B x
          const double a = A[cn];
          const double abar = force_zero ? 0.0 : std::exp(double(dt) * a);
          const double hp = hprev ? hprev[cn] : 0.0;
          if (!force_zero) {
            const double gabar = ghv * hp;
            gdt += gabar * abar * a;
            if (ga) ga[cn] += float(gabar * abar * double(dt) * a);  // dA/da = -exp(a) = A
          }
          gdt += ghv * double(B[tn]) * xt;
          gB[tn] += float(ghv * dt * xt);
          gxt += ghv * dt * double(B[tn]);
          gh[cn] = ghv * abar;  // carry to t-1
        }
        // softplus'(d) = sigmoid(d) = 1 - exp(-delta)
        gDelta[size_t(t) * C + c] = float(gdt * (1.0 - std::exp(-double(dt))));
        if (gx) gx[size_t(t) * C + c] += float(gxt);
      }
    }

    // backprop the projections: B = x wb^T, C = x wc^T, d = x wd^T + bd
    for (int t = 0; t < L; ++t) {
      const float* xt = xv + size_t(t) * C;
      for (int n = 0; n < N; ++n) {
        const float gb = gB[size_t(t) * N + n];
        const float gc = gC[size_t(t) * N + n];
        for (int c = 0; c < C; ++c) {
          if (gwb) gwb[n * C + c] += gb * xt[c];
          if (gwc) gwc[n * C + c] += gc * xt[c];
          if (gx) gx[size_t(t) * C + c] += gb * wb[n * C + c] + gc * wc[n * C + c];
        }
      }
      for (int c = 0; c < C; ++c) {
        const float gd = gDelta[size_t(t) * C + c];
        if (gbd) gbd[c] += gd;
        for (int k = 0; k < C; ++k) {
          if (gwd) gwd[c * C + k] += gd * xt[k];
          if (gx) gx[size_t(t) * C + k] += gd * wd[c * C + k];
        }
      }
    }
  };

  Tensor out = detail::make_op("ssm_scan", {L, C}, std::move(y),
                               {x, params.log_decay, params.w_b, params.w_c,
                                params.w_delta, params.b_delta},
                               std::move(back));

  if (precise_forward()) {
    auto w64 = [](const Tensor& t) {
      std::vector<double> v(t.data().size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = detail::val64(t.node(), i);
      return v;
    };
    const auto xa = w64(x);
    const auto aa = w64(params.log_decay);
    const auto wba = w64(params.w_b);
    const auto wca = w64(params.w_c);
    const auto wda = w64(params.w_delta);
    const auto bda = w64(params.b_delta);
    std::vector<double> h64(size_t(C) * N, 0.0), y64(size_t(L) * C);
    std::vector<double> Bt(size_t(N), 0.0), Ct(size_t(N), 0.0), dt64(size_t(C), 0.0);
    for (int t = 0; t < L; ++t) {
      const double* xt = xa.data() + size_t(t) * C;
      for (int n = 0; n < N; ++n) {
        double ab = 0.0, ac = 0.0;
        for (int c = 0; c < C; ++c) {
          ab += wba[size_t(n) * C + c] * xt[c];
          ac += wca[size_t(n) * C + c] * xt[c];
        }
        Bt[size_t(n)] = ab;
        Ct[size_t(n)] = ac;
      }
      for (int c = 0; c < C; ++c) {
        double acc = bda[size_t(c)];
        for (int k = 0; k < C; ++k) acc += wda[size_t(c) * C + k] * xt[k];
        dt64[size_t(c)] = softplus_d(acc);
      }
      for (int c = 0; c < C; ++c) {
        double yacc = 0.0;
        for (int n = 0; n < N; ++n) {
          const double a64 = -std::exp(aa[size_t(c) * N + n]);
          const double abar = force_zero ? 0.0 : std::exp(dt64[size_t(c)] * a64);
          double& hv = h64[size_t(c) * N + n];
          hv = abar * hv + dt64[size_t(c)] * Bt[size_t(n)] * xt[c];
          yacc += Ct[size_t(n)] * hv;
        }
        y64[size_t(t) * C + c] = yacc;
      }
    }
    out.node()->value64 = std::move(y64);
  }
  return out;
}

MambaBlock MambaBlock::init(int channels, int state_dim, Rng& rng, bool requires_grad) {
  MambaBlock b;
  const float ws = float(std::sqrt(2.0 / double(channels)));
  b.w_in = Tensor::randn({channels, channels}, rng, ws, requires_grad);
  b.b_in = Tensor::zeros({channels}, requires_grad);
  b.ssm = SsmParams::init(channels, state_dim, rng, requires_grad);
  b.w_out = Tensor::zeros({channels, channels}, requires_grad);
  b.b_out = Tensor::zeros({channels}, requires_grad);
  return b;
}

Tensor MambaBlock::forward(const Tensor& features) const {
  if (features.shape().size() != 4)
    throw std::invalid_argument("mamba_block: expected [C,D,H,W], got " +
                                shape_str(features.shape()));
  const int C = features.shape()[0];
  const int L = int(features.numel() / C);
  Tensor seq = transpose2d(reshape(features, {C, L}));  // [L,C], W fastest
  Tensor u = silu(linear(seq, w_in, b_in));
  Tensor s = ssm_scan(u, ssm);
  Tensor o = linear(s, w_out, b_out);
  Tensor y = add(seq, o);
  return reshape(transpose2d(y), features.shape());
}

std::vector<Tensor> MambaBlock::parameters() const {
  std::vector<Tensor> p{w_in, b_in};
  for (const Tensor& t : ssm.parameters()) p.push_back(t);
  p.push_back(w_out);
  p.push_back(b_out);
  return p;
}

}  // namespace puuma
