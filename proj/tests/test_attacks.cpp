#include <doctest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "trained_models.hpp"
#include "trs/attacks.hpp"

using namespace trs;
using namespace trs::attacks;
using models::MlpClassifier;

namespace {

// Logits (0, w x): class 1 when w x > 0.
MlpClassifier logistic(double w) {
  return MlpClassifier({1, 2}, models::Activation::tanh, {Tensor::matrix(1, 2, {0.0, w}), Tensor::zeros({1, 2})});
}

double norm_of(const Tensor& a, const Tensor& b, std::size_t r, Norm norm) {
  double acc = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    const double d = std::abs(a.at(r, c) - b.at(r, c));
    acc = norm == Norm::linf ? std::max(acc, d) : acc + d * d;
  }
  return norm == Norm::linf ? acc : std::sqrt(acc);
}

AttackSpec random_spec(std::mt19937_64& rng, std::size_t dim, std::size_t classes) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Method methods[] = {Method::fgsm, Method::bim, Method::pgd, Method::mim, Method::cw, Method::ead};
  AttackSpec s = AttackSpec::defaults(methods[rng() % 6], 0.5 * unit(rng));
  s.norm = rng() % 2 ? Norm::l2 : Norm::linf;
  s.targeted = rng() % 2;
  s.target = rng() % classes;
  s.steps = 1 + rng() % 6;
  s.restarts = 1 + rng() % 3;
  s.momentum = unit(rng);
  s.loss = rng() % 2 ? AttackLoss::margin : AttackLoss::cross_entropy;
  s.c = 5.0 * unit(rng);
  s.learning_rate = 0.05 + 0.5 * unit(rng);
  if (rng() % 3 == 0) s.step_size = 2.0 * s.epsilon * unit(rng);
  if (rng() % 2) s.box = data::Box::uniform(dim, -0.5, 0.5);
  s.seed = rng();
  return s;
}

}  // namespace

TEST_CASE("FGSM on the logistic example") {
  const auto model = logistic(1.0);
  const Tensor x = Tensor::row({0.0});
  const std::vector<std::size_t> y{1};
  const AdvBatch adv = run_attack(model, x, y, AttackSpec::defaults(Method::fgsm, 0.5));
  CHECK(adv.adversarials.item() == -0.5);
  CHECK(models::loss(model, x, 1) == doctest::Approx(0.693147).epsilon(1e-6));
  const double after = models::loss(model, adv.adversarials, 1);
  CHECK(after == doctest::Approx(std::log1p(std::exp(0.5))).epsilon(1e-14));
  CHECK(after == doctest::Approx(0.9741).epsilon(1e-4));
  CHECK(adv.success[0]);
}

TEST_CASE("zero budget returns the originals for every method") {
  std::mt19937_64 rng(2);
  const auto model = MlpClassifier::initialize({3, 6, 3}, models::Activation::tanh, 4);
  const Tensor x = testing::random_tensor(rng, {5, 3});
  const std::vector<std::size_t> y{0, 1, 2, 0, 1};
  for (Method m : {Method::fgsm, Method::bim, Method::pgd, Method::mim, Method::cw, Method::ead}) {
    for (Norm n : {Norm::l2, Norm::linf}) {
      AttackSpec s = AttackSpec::defaults(m, 0.0);
      s.norm = n;
      s.steps = std::min<std::size_t>(s.steps, 20);
      CHECK(run_attack(model, x, y, s).adversarials == x);
    }
  }
}

TEST_CASE("perturbations stay inside the ball and the box") {
  std::mt19937_64 rng(13);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng() % 4, c = 2 + rng() % 3;
    const auto model = MlpClassifier::initialize({d, 4, c}, models::Activation::tanh, rng());
    const AttackSpec s = random_spec(rng, d, c);
    const Tensor x = testing::random_tensor(rng, {3, d}, -0.5, 0.5);
    std::vector<std::size_t> y{rng() % c, rng() % c, rng() % c};
    const AdvBatch adv = run_attack(model, x, y, s);
    for (std::size_t r = 0; r < 3; ++r)
      if (norm_of(adv.adversarials, x, r, s.norm) > s.epsilon + 1e-9) ++violations;
    if (s.box && !s.box->contains(adv.adversarials)) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("FGSM equals one BIM step of size epsilon") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng() % 5;
    const auto model = MlpClassifier::initialize({d, 5, 3}, models::Activation::softplus, rng());
    const Tensor x = testing::random_tensor(rng, {4, d});
    const std::vector<std::size_t> y{0, 1, 2, 1};
    AttackSpec fgsm = AttackSpec::defaults(Method::fgsm, 0.3 * std::uniform_real_distribution<double>(0, 1)(rng));
    fgsm.norm = trial % 2 ? Norm::l2 : Norm::linf;
    AttackSpec bim = fgsm;
    bim.method = Method::bim;
    bim.steps = 1;
    bim.step_size = fgsm.epsilon;
    CHECK(run_attack(model, x, y, fgsm).adversarials == run_attack(model, x, y, bim).adversarials);
  }
}

TEST_CASE("warm-started PGD success is monotone in the budget") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const auto model = MlpClassifier::initialize({2, 8, 2}, models::Activation::tanh, rng());
    const Tensor x = testing::random_tensor(rng, {20, 2}, -1.0, 1.0);
    const auto y = models::predict_labels(model, x);
    AttackSpec small = AttackSpec::defaults(Method::pgd, 0.05);
    small.steps = 10;
    small.seed = rng();
    const AdvBatch first = run_attack(model, x, y, small);
    AttackSpec large = small;
    large.epsilon = 0.05 + 0.2 * std::uniform_real_distribution<double>(0, 1)(rng);
    const AdvBatch second = run_attack(model, x, y, large, first.adversarials);
    CHECK(effectiveness(model, second).success_rate >= effectiveness(model, first).success_rate);
    for (std::size_t i = 0; i < x.rows(); ++i)
      if (first.success[i]) CHECK(second.success[i]);
  }
}

TEST_CASE("PGD is reproducible per seed") {
  std::mt19937_64 rng(1);
  const auto model = MlpClassifier::initialize({2, 8, 2}, models::Activation::tanh, 3);
  const Tensor x = testing::random_tensor(rng, {10, 2});
  const std::vector<std::size_t> y(10, 1);
  AttackSpec s = AttackSpec::defaults(Method::pgd, 0.2);
  s.seed = 77;
  CHECK(run_attack(model, x, y, s).adversarials == run_attack(model, x, y, s).adversarials);
}

TEST_CASE("targeted attacks move toward the target class") {
  const auto model = logistic(1.0);
  const Tensor x = Tensor::matrix(2, 1, {1.0, 0.5});
  const std::vector<std::size_t> y{1, 1};
  for (Method m : {Method::fgsm, Method::bim, Method::pgd, Method::mim}) {
    AttackSpec s = AttackSpec::defaults(m, 2.0);
    s.targeted = true;
    s.target = 0;
    const AdvBatch adv = run_attack(model, x, y, s);
    CHECK(adv.success[0]);
    CHECK(adv.success[1]);
    CHECK(effectiveness(model, adv).alpha == 0.0);
  }
}

TEST_CASE("CW and EAD reach their analytic optima on the logistic model") {
  const auto model = logistic(1.0);
  const Tensor x = Tensor::row({1.0});
  const std::vector<std::size_t> y{1};

  // (x'-1)^2 + c x' is minimized at 1 - c/2 while the margin is active.
  AttackSpec cw = AttackSpec::carlini_wagner(1.0);
  const AdvBatch weak = run_attack(model, x, y, cw);
  CHECK(weak.adversarials.item() == doctest::Approx(0.5).epsilon(1e-8));
  CHECK_FALSE(weak.success[0]);

  AttackSpec ead = AttackSpec::carlini_wagner(1.0, true);
  CHECK(run_attack(model, x, y, ead).adversarials.item() == doctest::Approx(1.0 - (1.0 - 0.01) / 2).epsilon(1e-8));

  // Strong c crosses the boundary; the least distorted success is kept.
  cw.c = 4.0;
  const AdvBatch strong = run_attack(model, x, y, cw);
  CHECK(strong.success[0]);
  CHECK(strong.adversarials.item() <= 0.0);
  CHECK(strong.adversarials.item() >= -0.05);
}

TEST_CASE("degenerate gradients leave items unperturbed") {
  const MlpClassifier flat({2, 2}, models::Activation::tanh, {Tensor::zeros({2, 2}), Tensor::zeros({1, 2})});
  const Tensor x = Tensor::matrix(2, 2, {0.1, 0.2, 0.3, 0.4});
  const std::vector<std::size_t> y{0, 1};
  AttackSpec s = AttackSpec::defaults(Method::bim, 0.3);
  s.steps = 4;
  const AdvBatch adv = run_attack(flat, x, y, s);
  CHECK(adv.adversarials == x);
  CHECK(adv.degenerate_steps == 8);
}

TEST_CASE("effectiveness examples") {
  const auto model = logistic(1.0);
  const Tensor x = Tensor::matrix(3, 1, {1.0, -1.0, 2.0});
  const std::vector<std::size_t> y{1, 0, 1};
  const AdvBatch none = run_attack(model, x, y, AttackSpec::defaults(Method::pgd, 0.0));
  CHECK(effectiveness(model, none).alpha == 1.0);
  CHECK(effectiveness(model, none).success_rate == 0.0);

  const AdvBatch all = run_attack(model, x, y, AttackSpec::defaults(Method::bim, 3.0));
  CHECK(effectiveness(model, all).alpha == 0.0);
  CHECK_THROWS(effectiveness(model, AdvBatch{}));
}

TEST_CASE("spec validation") {
  AttackSpec s;
  s.epsilon = -1;
  CHECK_THROWS(s.validate());
  s = AttackSpec{};
  s.steps = 0;
  CHECK_THROWS(s.validate());
  s = AttackSpec{};
  s.momentum = 1.5;
  CHECK_THROWS(s.validate());
  s = AttackSpec{};
  s.restarts = 0;
  CHECK_THROWS(s.validate());
  s = AttackSpec{};
  s.epsilon = std::numeric_limits<double>::infinity();
  CHECK_THROWS(s.validate());
  CHECK_NOTHROW(AttackSpec::carlini_wagner(0.1).validate());
  CHECK(parse_method("mim") == Method::mim);
  CHECK_THROWS(parse_method("jsma"));
}

TEST_CASE("PGD-50 breaks an accurate two-moons model") {
  const auto& model = testing::trained_moons_model(1);
  const auto& test = testing::moons_test();
  REQUIRE(models::accuracy(model, test.inputs, test.labels) >= 0.95);
  AttackSpec spec = AttackSpec::defaults(Method::pgd, 0.3);
  const AdvBatch adv = run_attack(model, test.inputs, test.labels, spec);
  const Effectiveness e = effectiveness(model, adv);
  CHECK(e.success_rate >= 0.9);
  CHECK(e.alpha <= 0.1);
}
