#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "puuma/tensor.hpp"

using namespace puuma;

namespace {

Rng test_rng(uint64_t salt) { return Rng(Rng::mix(42, salt)); }

// random values kept away from relu/leaky kinks
Tensor random_tensor(Shape s, Rng& rng, bool requires_grad = false) {
  std::vector<float> v(size_t(shape_numel(s)));
  for (float& x : v) {
    double d = rng.uniform(-1.5, 1.5);
    if (std::abs(d) < 0.05) d = d < 0 ? d - 0.1 : d + 0.1;
    x = float(d);
  }
  return Tensor::from(std::move(s), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("factories validate shapes") {
  CHECK_THROWS_AS(Tensor::zeros({0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({2, 0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.f, 2.f, 3.f}), std::invalid_argument);
}

TEST_CASE("add componentwise") {
  Tensor a = Tensor::from({2}, {1.f, 2.f});
  Tensor b = Tensor::from({2}, {3.f, 4.f});
  Tensor c = add(a, b);
  CHECK(c.data()[0] == 4.f);
  CHECK(c.data()[1] == 6.f);
}

TEST_CASE("elementwise shape errors carry both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4});
  try {
    (void)add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
}

TEST_CASE("trailing singleton broadcast") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({2, 1}, {10, 100});
  Tensor c = add(a, b);
  CHECK(c.data()[0] == 11.f);
  CHECK(c.data()[2] == 13.f);
  CHECK(c.data()[3] == 104.f);
  // leading broadcast stays rejected
  Tensor lead = Tensor::from({1, 3}, {1, 1, 1});
  CHECK_THROWS_AS(add(a, lead), std::invalid_argument);
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::from({3}, {0.f, 0.f, 0.f});
  Tensor y = softmax_lastdim(x);
  for (float v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("matmul of ones") {
  Tensor a = Tensor::full({2, 3}, 1.f);
  Tensor b = Tensor::full({3, 2}, 1.f);
  Tensor c = matmul(a, b);
  // hand-computed inner products: each entry is 1*1 summed 3 times
  for (float v : c.data()) CHECK(v == 3.f);
  CHECK(c.shape() == Shape{2, 2});
}

TEST_CASE("reference and optimized kernels agree bit-for-bit") {
  Rng rng = test_rng(7);
  Tensor a = random_tensor({9, 13}, rng);
  Tensor b = random_tensor({13, 7}, rng);
  Tensor x = random_tensor({3, 6, 5, 4}, rng);
  Tensor w = random_tensor({2, 3, 3, 3, 3}, rng);
  Tensor bias = random_tensor({2}, rng);

  set_reference_kernels(true);
  Tensor m_ref = matmul(a, b);
  Tensor c_ref = conv3d(x, w, bias, 1, 1);
  Tensor c2_ref = conv3d(x, w, bias, 2, 1);
  set_reference_kernels(false);
  Tensor m_opt = matmul(a, b);
  Tensor c_opt = conv3d(x, w, bias, 1, 1);
  Tensor c2_opt = conv3d(x, w, bias, 2, 1);

  for (int64_t i = 0; i < m_ref.numel(); ++i)
    CHECK(m_ref.data()[size_t(i)] == m_opt.data()[size_t(i)]);
  for (int64_t i = 0; i < c_ref.numel(); ++i)
    CHECK(c_ref.data()[size_t(i)] == c_opt.data()[size_t(i)]);
  for (int64_t i = 0; i < c2_ref.numel(); ++i)
    CHECK(c2_ref.data()[size_t(i)] == c2_opt.data()[size_t(i)]);
}

TEST_CASE("conv3d identity kernel") {
  Rng rng = test_rng(11);
  Tensor x = random_tensor({1, 3, 4, 5}, rng);
  Tensor w = Tensor::from({1, 1, 1, 1, 1}, {1.f});
  Tensor y = conv3d(x, w, Tensor(), 1, 0);
  CHECK(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[size_t(i)] == x.data()[size_t(i)]);
}

TEST_CASE("conv3d zero kernel gives zero output") {
  Rng rng = test_rng(12);
  Tensor x = random_tensor({2, 4, 4, 4}, rng);
  Tensor w = Tensor::zeros({3, 2, 3, 3, 3});
  Tensor y = conv3d(x, w, Tensor(), 1, 1);
  for (float v : y.data()) CHECK(v == 0.f);
}

TEST_CASE("conv3d ones kernel sums the input") {
  Rng rng = test_rng(13);
  Tensor x = random_tensor({1, 3, 3, 3}, rng);
  Tensor w = Tensor::full({1, 1, 3, 3, 3}, 1.f);
  Tensor y = conv3d(x, w, Tensor(), 1, 0);
  CHECK(y.numel() == 1);
  // brute-force oracle: plain accumulation over the input
  double expected = 0.0;
  for (float v : x.data()) expected += v;
  CHECK(y.item() == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("conv3d rejects non-positive output extents and bad kernels") {
  Tensor x = Tensor::zeros({1, 2, 2, 2});
  Tensor w = Tensor::zeros({1, 1, 3, 3, 3});
  CHECK_THROWS_AS(conv3d(x, w, Tensor(), 1, 0), std::invalid_argument);
  Tensor weven = Tensor::zeros({1, 1, 2, 2, 2});
  Tensor x4 = Tensor::zeros({1, 4, 4, 4});
  CHECK_THROWS_AS(conv3d(x4, weven, Tensor(), 1, 0), std::invalid_argument);
}

TEST_CASE("same-padding conv preserves spatial extents") {
  Rng rng = test_rng(14);
  for (Shape s : {Shape{1, 2, 3, 4}, Shape{2, 5, 5, 5}, Shape{3, 4, 6, 2}}) {
    Tensor x = random_tensor(s, rng);
    for (int k : {1, 3, 5}) {
      Tensor w = random_tensor({2, s[0], k, k, k}, rng);
      Tensor y = conv3d(x, w, Tensor(), 1, (k - 1) / 2);
      CHECK(y.shape() == Shape{2, s[1], s[2], s[3]});
    }
  }
}

TEST_CASE("upsample inverts the stride-2 shape contract") {
  Rng rng = test_rng(15);
  Tensor x = random_tensor({2, 4, 6, 8}, rng);
  Tensor w = random_tensor({2, 2, 3, 3, 3}, rng);
  Tensor down = conv3d(x, w, Tensor(), 2, 1);
  CHECK(down.shape() == Shape{2, 2, 3, 4});
  Tensor up = upsample_nearest2x(down);
  CHECK(up.shape() == x.shape());
}

TEST_CASE("backward product rule") {
  Tensor x = Tensor::scalar(2.f, true);
  Tensor y = Tensor::scalar(5.f, true);
  Tensor z = mul(x, y);
  backward(z);
  CHECK(x.grad()[0] == 5.f);
  CHECK(y.grad()[0] == 2.f);
}

TEST_CASE("backward relu gate") {
  Tensor x = Tensor::from({2}, {-1.f, 2.f}, true);
  Tensor z = sum(relu(x));
  backward(z);
  CHECK(x.grad()[0] == 0.f);
  CHECK(x.grad()[1] == 1.f);
}

TEST_CASE("backward rejects non-scalar roots") {
  Tensor x = Tensor::from({2}, {1.f, 2.f}, true);
  Tensor y = relu(x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("fan-out gradients add across branches") {
  // f(x) = sum(x*x) + sum(3*x): both consumers feed the same leaf
  Tensor x = Tensor::from({3}, {1.f, -2.f, 0.5f}, true);
  Tensor both = add(sum(mul(x, x)), sum(scale(x, 3.f)));
  backward(both);
  for (int i = 0; i < 3; ++i)
    CHECK(x.grad()[size_t(i)] ==
          doctest::Approx(2.f * x.data()[size_t(i)] + 3.f).epsilon(1e-6));

  // against single-branch runs
  Tensor xa = Tensor::from({3}, {1.f, -2.f, 0.5f}, true);
  backward(sum(mul(xa, xa)));
  Tensor xb = Tensor::from({3}, {1.f, -2.f, 0.5f}, true);
  backward(sum(scale(xb, 3.f)));
  for (int i = 0; i < 3; ++i)
    CHECK(x.grad()[size_t(i)] ==
          doctest::Approx(xa.grad()[size_t(i)] + xb.grad()[size_t(i)]).epsilon(1e-6));
}

TEST_CASE("random 4-op composite matches finite differences") {
  Rng rng = test_rng(21);
  Tensor point = random_tensor({3, 4}, rng);
  auto fn = [](const Tensor& t) {
    return mean(mul(silu(t), sigmoid(scale(t, 0.5f))));
  };
  CHECK(grad_check(fn, point, 1e-3f) < 1e-4);
}

TEST_CASE("grad_check: fn = sum has zero error") {
  Rng rng = test_rng(22);
  Tensor p = random_tensor({5}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(t); }, p, 1e-3f) ==
        doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("grad_check: fn = sum(x^2) at [1,2,3]") {
  Tensor p = Tensor::from({3}, {1.f, 2.f, 3.f});
  // closed-form gradient is [2,4,6]
  Tensor q = Tensor::from({3}, {1.f, 2.f, 3.f}, true);
  backward(sum(mul(q, q)));
  CHECK(q.grad()[0] == doctest::Approx(2.f));
  CHECK(q.grad()[1] == doctest::Approx(4.f));
  CHECK(q.grad()[2] == doctest::Approx(6.f));
  // f32 forward storage bottoms FD out near 3e-5; the closed-form check above
  // is the tight one
  CHECK(grad_check([](const Tensor& t) { return sum(mul(t, t)); }, p, 1e-3f) < 1e-4);
}

TEST_CASE("grad_check rejects non-scalar functions and bad eps") {
  Tensor p = Tensor::from({2}, {1.f, 2.f});
  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return relu(t); }, p, 1e-3f),
                  std::invalid_argument);
  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return sum(t); }, p, 0.0f),
                  std::invalid_argument);
}

TEST_CASE("every registered op passes grad_check at 5 random points") {
  struct OpCase {
    const char* name;
    std::function<double(Rng&)> run;  // returns max rel err for one random point
  };
  auto scalarize = [](Tensor t) { return mean(t); };

  std::vector<OpCase> ops;
  ops.push_back({"add", [&](Rng& rng) {
    Tensor b = random_tensor({3, 4}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(add(t, b)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"sub", [&](Rng& rng) {
    Tensor b = random_tensor({3, 4}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(sub(b, t)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"mul", [&](Rng& rng) {
    Tensor b = random_tensor({3, 4}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(mul(t, b)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"mul_broadcast", [&](Rng& rng) {
    Tensor a = random_tensor({3, 4}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(mul(a, t)); },
                      random_tensor({3, 1}, rng), 1e-3f);
  }});
  ops.push_back({"scale", [&](Rng& rng) {
    return grad_check([&](const Tensor& t) { return scalarize(scale(t, -1.7f)); },
                      random_tensor({4}, rng), 1e-3f);
  }});
  ops.push_back({"matmul", [&](Rng& rng) {
    Tensor b = random_tensor({4, 3}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(matmul(t, b)); },
                      random_tensor({2, 4}, rng), 1e-3f);
  }});
  ops.push_back({"matmul_rhs", [&](Rng& rng) {
    Tensor a = random_tensor({3, 4}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(matmul(a, t)); },
                      random_tensor({4, 2}, rng), 1e-3f);
  }});
  ops.push_back({"linear", [&](Rng& rng) {
    Tensor w = random_tensor({5, 4}, rng);
    Tensor b = random_tensor({5}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(linear(t, w, b)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"linear_weights", [&](Rng& rng) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({5}, rng);
    return grad_check([&](const Tensor& t) { return scalarize(linear(x, t, b)); },
                      random_tensor({5, 4}, rng), 1e-3f);
  }});
  ops.push_back({"relu", [&](Rng& rng) {
    return grad_check([&](const Tensor& t) { return scalarize(relu(t)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"leaky_relu", [&](Rng& rng) {
    return grad_check([&](const Tensor& t) { return scalarize(leaky_relu(t)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"silu", [&](Rng& rng) {
    return grad_check([&](const Tensor& t) { return scalarize(silu(t)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"sigmoid", [&](Rng& rng) {
    return grad_check([&](const Tensor& t) { return scalarize(sigmoid(t)); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"softmax", [&](Rng& rng) {
    Tensor sel = random_tensor({2, 5}, rng);
    return grad_check(
        [&](const Tensor& t) { return scalarize(mul(softmax_lastdim(t), sel)); },
        random_tensor({2, 5}, rng), 1e-3f);
  }});
  ops.push_back({"instance_norm", [&](Rng& rng) {
    Tensor sel = random_tensor({2, 3, 4}, rng);
    return grad_check(
        [&](const Tensor& t) { return scalarize(mul(instance_norm(t), sel)); },
        random_tensor({2, 3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"concat", [&](Rng& rng) {
    Tensor other = random_tensor({2, 3}, rng);
    return grad_check(
        [&](const Tensor& t) {
          Tensor parts[] = {t, other};
          return scalarize(concat(std::span<const Tensor>(parts, 2), 1));
        },
        random_tensor({2, 2}, rng), 1e-3f);
  }});
  ops.push_back({"reshape", [&](Rng& rng) {
    Tensor sel = random_tensor({6}, rng);
    return grad_check(
        [&](const Tensor& t) { return scalarize(mul(reshape(t, {6}), sel)); },
        random_tensor({2, 3}, rng), 1e-3f);
  }});
  ops.push_back({"transpose2d", [&](Rng& rng) {
    Tensor sel = random_tensor({4, 3}, rng);
    return grad_check(
        [&](const Tensor& t) { return scalarize(mul(transpose2d(t), sel)); },
        random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"sum", [&](Rng& rng) {
    return grad_check([](const Tensor& t) { return sum(t); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"mean", [&](Rng& rng) {
    return grad_check([](const Tensor& t) { return mean(t); },
                      random_tensor({3, 4}, rng), 1e-3f);
  }});
  ops.push_back({"conv3d_input", [&](Rng& rng) {
    Tensor w = random_tensor({2, 2, 3, 3, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    return grad_check(
        [&](const Tensor& t) { return scalarize(conv3d(t, w, b, 1, 1)); },
        random_tensor({2, 4, 4, 4}, rng), 1e-3f);
  }});
  ops.push_back({"conv3d_weights", [&](Rng& rng) {
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    Tensor b = random_tensor({2}, rng);
    return grad_check(
        [&](const Tensor& t) { return scalarize(conv3d(x, t, b, 2, 1)); },
        random_tensor({2, 2, 3, 3, 3}, rng), 1e-3f);
  }});
  ops.push_back({"upsample_nearest2x", [&](Rng& rng) {
    Tensor sel = random_tensor({1, 4, 4, 4}, rng);
    return grad_check(
        [&](const Tensor& t) { return scalarize(mul(upsample_nearest2x(t), sel)); },
        random_tensor({1, 2, 2, 2}, rng), 1e-3f);
  }});

  for (const OpCase& op : ops) {
    Rng rng = test_rng(std::hash<std::string>{}(op.name));
    for (int rep = 0; rep < 5; ++rep) {
      const double err = op.run(rng);
      INFO(op.name << " repetition " << rep);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("forward ops are deterministic") {
  Rng rng1 = test_rng(31), rng2 = test_rng(31);
  Tensor a1 = random_tensor({4, 5}, rng1), a2 = random_tensor({4, 5}, rng2);
  Tensor b1 = random_tensor({5, 3}, rng1), b2 = random_tensor({5, 3}, rng2);
  Tensor y1 = softmax_lastdim(matmul(silu(a1), b1));
  Tensor y2 = softmax_lastdim(matmul(silu(a2), b2));
  for (int64_t i = 0; i < y1.numel(); ++i)
    CHECK(y1.data()[size_t(i)] == y2.data()[size_t(i)]);
}

TEST_CASE("no graph is recorded without requires_grad") {
  Tensor a = Tensor::from({2}, {1.f, 2.f});
  Tensor b = Tensor::from({2}, {3.f, 4.f});
  Tensor c = add(a, b);
  CHECK_FALSE(c.requires_grad());
  CHECK(c.node()->inputs.empty());
}

TEST_CASE("tensor serialization round-trips bit-exactly") {
  Rng rng = test_rng(41);
  Tensor t = random_tensor({3, 5, 2}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  Tensor back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i)
    CHECK(back.data()[size_t(i)] == t.data()[size_t(i)]);
}

TEST_CASE("softmax over an empty axis cannot be constructed") {
  // zero extents are rejected at tensor creation, so no empty softmax exists
  CHECK_THROWS_AS(Tensor::zeros({3, 0}), std::invalid_argument);
}
