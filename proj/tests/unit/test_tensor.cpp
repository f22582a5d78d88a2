#include <cmath>
#include <limits>

#include "doctest.h"
#include "testing.hpp"

#include "c2l/ops.hpp"

using namespace c2l;
using c2l::testing::random64;

TEST_CASE("tensor construction checks shape and finiteness") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.f, 2.f, 3.f}), Error);
  try {
    Tensor({1}, {std::numeric_limits<float>::quiet_NaN()});
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
  Tensor t = Tensor::full({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.dim(1) == 3);
  CHECK(t.values()[5] == 1.5f);
}

TEST_CASE("op producing inf is an error naming the op") {
  Tensor a({1}, {3e38f});
  try {
    ops::add(a, a);
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
}

TEST_CASE("x squared at 3 has gradient 6") {
  Tensor64 x({1}, {3.0}, true);
  ops::mul(x, x).backward();
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("sum(a*b) gives grad_a = b, grad_b = a") {
  Rng rng(1);
  Tensor64 a = random64({4, 3}, rng, true), b = random64({4, 3}, rng, true);
  ops::sum(ops::mul(a, b)).backward();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a.grad()[i] == b.values()[i]);
    CHECK(b.grad()[i] == a.values()[i]);
  }
}

TEST_CASE("backward on a non-scalar is a contract error") {
  Tensor64 x({2}, {1.0, 2.0}, true);
  auto y = ops::scale(x, 2.0);
  try {
    y.backward();
    FAIL("expected contract error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Contract);
  }
}

TEST_CASE("fan-out accumulates additively, each node visited once") {
  Tensor64 x({1}, {2.0}, true);
  auto y = ops::mul(x, x);       // 4
  auto z = ops::add(y, y);       // 8, dz/dx = 4x = 8
  auto w = ops::mul(z, y);       // 2x^4, dw/dx = 8x^3 = 64
  w.backward();
  CHECK(x.grad()[0] == doctest::Approx(64.0).epsilon(1e-15));
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(2);
  Tensor64 x = random64({5}, rng, true);
  auto l1 = [&] { return ops::sum(ops::silu(x)); };
  auto l2 = [&] { return ops::mean(ops::mul(x, x)); };
  const double alpha = 0.7, beta = -1.3;
  x.zero_grad();
  l1().backward();
  std::vector<double> g1(x.grad().begin(), x.grad().end());
  x.zero_grad();
  l2().backward();
  std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  ops::add(ops::scale(l1(), alpha), ops::scale(l2(), beta)).backward();
  for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(alpha * g1[i] + beta * g2[i]).epsilon(1e-14));
}

TEST_CASE("no-grad guard records nothing") {
  Tensor64 x({2}, {1.0, 2.0}, true);
  NoGradGuard ng;
  auto y = ops::mul(x, x);
  CHECK(y.is_leaf());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("mutable values only on leaves; detach and clone") {
  Tensor64 x({2}, {1.0, 2.0}, true);
  auto y = ops::scale(x, 3.0);
  CHECK_THROWS_AS(y.mutable_values(), Error);
  auto d = y.detach();
  CHECK(d.is_leaf());
  CHECK(d.values()[1] == 6.0);
  auto c = x.clone();
  c.mutable_values()[0] = 9.0;
  CHECK(x.values()[0] == 1.0);
}

TEST_CASE("identical inputs give bit-identical forward and backward") {
  auto run = [] {
    Rng rng(5);
    Tensor64 x = random64({2, 3, 5, 5}, rng, true), k = random64({4, 3, 3, 3}, rng, true);
    auto y = ops::sum(ops::silu(ops::conv2d<double>(x, k, nullptr, 1, 1)));
    y.backward();
    std::vector<double> out{y.item()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    return out;
  };
  CHECK(run() == run());
}
