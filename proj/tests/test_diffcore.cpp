#include <cmath>
#include <random>

#include "doctest.h"
#include "test_support.hpp"
#include "trs/autodiff.hpp"
#include "trs/calculus.hpp"

using namespace trs;
using namespace trs::ad;
using trs::testing::random_tensor;
using trs::testing::relative_error;

namespace {

double eval_scalar(const ScalarFunction& f, std::span<const Tensor> params, const Tensor& x) {
  NoGradGuard guard;
  std::vector<Var> p(params.begin(), params.end());
  return f(p, Var(x)).value().item();
}

// Two-layer tanh network with a cross-entropy head; params = {W1, b1, W2, b2}.
Var two_layer_loss(std::span<const Var> p, const Var& x, std::size_t label) {
  Var h = tanh(add(matmul(x, p[0]), p[1]));
  Var logits = add(matmul(h, p[2]), p[3]);
  const std::size_t idx[] = {label};
  return neg(pick(log_softmax(logits), idx));
}

}  // namespace

TEST_CASE("tensor rejects non-finite values and shape mismatches") {
  CHECK_THROWS_AS(Tensor({1, 2}, {1.0, NAN}), NumericError);
  CHECK_THROWS_AS(Tensor({1, 2}, {1.0, INFINITY}), NumericError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), std::invalid_argument);
  CHECK(Tensor::zeros({3, 4}).size() == 12);
}

TEST_CASE("grad of quadratic, constant and logistic examples") {
  ScalarFunction half_sq = [](std::span<const Var>, const Var& x) { return scale(sum(square(x)), 0.5); };
  const Tensor g = gradient(half_sq, {}, Tensor::row({3.0, 4.0}), Argument::input());
  CHECK(g[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-15));

  ScalarFunction constant = [](std::span<const Var>, const Var& x) {
    return add(scale(sum(x), 0.0), Var(Tensor::scalar(7.0)));
  };
  const Tensor z = gradient(constant, {}, Tensor::row({1.0, -2.0, 5.0}), Argument::input());
  CHECK(linf_norm(z) == 0.0);

  // -log sigmoid(w x) at w = 1, x = 0: sigma(0) - 1 = -0.5.
  ScalarFunction logistic = [](std::span<const Var> p, const Var& x) { return neg(sum(log(sigmoid(mul(p[0], x))))); };
  const Tensor w = Tensor::scalar(1.0);
  const Tensor gx = gradient(logistic, std::span(&w, 1), Tensor::scalar(0.0), Argument::input());
  CHECK(gx.item() == doctest::Approx(-0.5).epsilon(1e-15));

  const auto fd = fd_gradient([&](const Tensor& x) { return eval_scalar(logistic, std::span(&w, 1), x); },
                              Tensor::scalar(0.0), 1e-5);
  CHECK(fd.item() == doctest::Approx(-0.5).epsilon(1e-9));
}

TEST_CASE("fd_gradient examples") {
  const auto sq = fd_gradient([](const Tensor& x) { return x[0] * x[0]; }, Tensor::scalar(3.0), 1e-5);
  CHECK(std::abs(sq.item() - 6.0) < 1e-8);
  const auto c = fd_gradient([](const Tensor&) { return 4.2; }, Tensor::row({1, 2, 3}), 1e-5);
  CHECK(linf_norm(c) == 0.0);
  CHECK_THROWS_AS(fd_gradient([](const Tensor&) { return 0.0; }, Tensor::scalar(1.0), 0.0), std::invalid_argument);
}

TEST_CASE("grad rejects non-scalar outputs") {
  Var x(Tensor::row({1.0, 2.0}), true);
  CHECK_THROWS_AS(grad(tanh(x), x), std::invalid_argument);
}

TEST_CASE("every primitive matches central differences on random instances") {
  std::mt19937_64 rng(20240101);
  struct Primitive {
    const char* name;
    std::function<Var(const Var& x, const Var& w)> apply;  // w is a fixed random weighting
  };
  const std::vector<Primitive> primitives = {
      {"matmul", [](const Var& x, const Var& w) { return sum(mul(matmul(x, transpose(w)), matmul(x, transpose(w)))); }},
      {"add", [](const Var& x, const Var& w) { return sum(square(add(x, w))); }},
      {"tanh", [](const Var& x, const Var& w) { return sum(mul(tanh(x), w)); }},
      {"softplus", [](const Var& x, const Var& w) { return sum(mul(softplus(x), w)); }},
      {"softmax_ce",
       [](const Var& x, const Var& w) {
         std::vector<std::size_t> labels(x.rows());
         for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % x.cols();
         return neg(sum(pick(log_softmax(mul(x, w)), labels)));
       }},
      {"l2_norm", [](const Var& x, const Var& w) { return sum(row_norm(add(x, w))); }},
      {"dot", [](const Var& x, const Var& w) { return sum(mul(row_sum(mul(x, w)), row_sum(x))); }},
  };
  for (const auto& prim : primitives) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t rows = 1 + trial % 3, cols = 2 + trial % 4;
      const Tensor x = random_tensor(rng, {rows, cols});
      const Tensor w = random_tensor(rng, {rows, cols});
      Var xv(x, true);
      const Tensor g = grad(prim.apply(xv, Var(w)), xv).value();
      const Tensor fd = fd_gradient(
          [&](const Tensor& at) {
            NoGradGuard guard;
            return prim.apply(Var(at), Var(w)).value().item();
          },
          x, 1e-5);
      worst = std::max(worst, relative_error(g, fd));
    }
    INFO(prim.name);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("grad is linear on a shared tape") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = random_tensor(rng, {2, 3});
    Var x(x0, true);
    Var f = sum(tanh(x));
    Var g = sum(mul(softplus(x), x));
    const double a = 1.7, b = -0.3;
    const Tensor combined = grad(add(scale(f, a), scale(g, b)), x).value();
    const Tensor separate = a * grad(f, x).value() + b * grad(g, x).value();
    CHECK(max_abs_diff(combined, separate) <= 1e-12);
  }
}

TEST_CASE("grad_of_grad_functional closed forms") {
  // f = theta x; grad_x f = theta; d|theta|/dtheta = sign(theta).
  ScalarFunction linear = [](std::span<const Var> p, const Var& x) { return sum(mul(p[0], x)); };
  const Tensor theta = Tensor::scalar(2.0);
  auto r = grad_of_grad_functional(linear, std::span(&theta, 1), Tensor::scalar(0.7), GradFunctional::l2_norm);
  CHECK_FALSE(r.degenerate);
  CHECK(r.grads[0].item() == doctest::Approx(1.0).epsilon(1e-14));

  // f = theta x^2 / 2; grad_x f = theta x; d|theta x|/dtheta = |x| = 3.
  ScalarFunction product = [](std::span<const Var> p, const Var& x) { return scale(sum(mul(p[0], square(x))), 0.5); };
  const Tensor one = Tensor::scalar(1.0);
  r = grad_of_grad_functional(product, std::span(&one, 1), Tensor::scalar(3.0), GradFunctional::l2_norm);
  CHECK(r.grads[0].item() == doctest::Approx(3.0).epsilon(1e-14));

  // dot with a constant: <theta x, c> = theta x c -> d/dtheta = x c.
  r = grad_of_grad_functional(product, std::span(&one, 1), Tensor::scalar(3.0), GradFunctional::dot_with_constant,
                              Tensor::scalar(-2.0));
  CHECK(r.grads[0].item() == doctest::Approx(-6.0).epsilon(1e-14));
}

TEST_CASE("grad_of_grad_functional flags a degenerate input gradient") {
  ScalarFunction linear = [](std::span<const Var> p, const Var& x) { return sum(mul(p[0], x)); };
  const Tensor theta = Tensor::scalar(0.0);
  auto r = grad_of_grad_functional(linear, std::span(&theta, 1), Tensor::scalar(1.0), GradFunctional::l2_norm);
  CHECK(r.degenerate);
  CHECK(r.grads[0].item() == 0.0);
}

TEST_CASE("grad_of_grad_functional matches finite differences on two-layer tanh networks") {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 2 + trial % 3, hidden = 4 + (trial * 5) % 13, classes = 2 + trial % 3;
    std::vector<Tensor> params = {random_tensor(rng, {in, hidden}, -1, 1), random_tensor(rng, {1, hidden}, -1, 1),
                                  random_tensor(rng, {hidden, classes}, -1, 1),
                                  random_tensor(rng, {1, classes}, -1, 1)};
    const Tensor x = random_tensor(rng, {1, in}, -1, 1);
    const std::size_t label = trial % classes;
    ScalarFunction f = [label](std::span<const Var> p, const Var& xv) { return two_layer_loss(p, xv, label); };
    const Tensor c = random_tensor(rng, {1, in});
    for (auto functional : {GradFunctional::l2_norm, GradFunctional::dot_with_constant}) {
      const auto exact = grad_of_grad_functional(f, params, x, functional, c);
      REQUIRE_FALSE(exact.degenerate);
      for (std::size_t k = 0; k < params.size(); ++k) {
        const Tensor fd = fd_gradient(
            [&](const Tensor& pk) {
              auto ps = params;
              ps[k] = pk;
              const Tensor gx = gradient(f, ps, x, Argument::input());
              return functional == GradFunctional::l2_norm ? l2_norm(gx) : dot(gx, c);
            },
            params[k], 1e-5);
        worst = std::max(worst, relative_error(exact.grads[k], fd));
      }
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("no-grad guard stops recording") {
  Var x(Tensor::scalar(1.0), true);
  {
    NoGradGuard guard;
    CHECK_FALSE(tanh(x).requires_grad());
  }
  CHECK(tanh(x).requires_grad());
}

TEST_CASE("row_cosine and row_norm treat degenerate rows as zero") {
  Var a(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 0.0}), true);
  Var b(Tensor::matrix(2, 2, {0.5, 0.5, 1.0, 1.0}), true);
  const Var c = row_cosine(a, b);
  CHECK(c.value()[0] == doctest::Approx(std::sqrt(0.5)));
  CHECK(c.value()[1] == 0.0);
  const Tensor ga = grad(sum(row_norm(a)), a).value();
  CHECK(ga[2] == 0.0);
  CHECK(ga[3] == 0.0);
  CHECK(ga[0] == doctest::Approx(1.0));
}
