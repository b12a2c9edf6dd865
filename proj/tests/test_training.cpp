#include <doctest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "trained_models.hpp"
#include "trs/calculus.hpp"
#include "trs/training.hpp"

using namespace trs;
using namespace trs::training;
using ad::Var;
using models::MlpClassifier;

namespace {

// Per-item loss w . x, whose input gradient is w everywhere.
LossFn linear_loss(std::vector<double> w) {
  const std::size_t d = w.size();
  return [W = Tensor::matrix(d, 1, std::move(w))](const Var& x, std::span<const std::size_t>) {
    return ad::matmul(x, Var(W));
  };
}

// Per-item loss c/2 ||x||^2, whose input gradient is c x.
LossFn quadratic_loss(double c) {
  return [c](const Var& x, std::span<const std::size_t>) { return (c / 2.0) * ad::row_sum(ad::square(x)); };
}

LossFn zero_loss() {
  return [](const Var& x, std::span<const std::size_t>) { return 0.0 * ad::row_sum(x); };
}

std::vector<std::size_t> zeros_labels(std::size_t n) { return std::vector<std::size_t>(n, 0); }

MlpClassifier uniform_model(std::size_t d, std::size_t c) {
  return MlpClassifier({d, c}, models::Activation::tanh, {Tensor::zeros({d, c}), Tensor::zeros({1, c})});
}

TrainConfig small_config(Mode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  cfg.seed = 5;
  cfg.adv_steps = 3;
  return cfg;
}

}  // namespace

TEST_CASE("warm-up radius endpoints and midpoint are exact") {
  TrainConfig cfg;
  cfg.epochs = 120;
  CHECK(warmup_delta(0, cfg) == 0.1);
  CHECK(warmup_delta(60, cfg) == 0.2);
  CHECK(warmup_delta(120, cfg) == 0.3);
  CHECK_THROWS(warmup_delta(121, cfg));
  for (std::size_t m_total : {1, 7, 13, 200}) {
    cfg.epochs = m_total;
    CHECK(warmup_delta(0, cfg) == cfg.delta_0);
    CHECK(warmup_delta(m_total, cfg) == cfg.delta_M);
  }
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda_a = -1;
  CHECK_THROWS(cfg.validate());
  cfg = TrainConfig{};
  cfg.delta_0 = 0.5;
  CHECK_THROWS(cfg.validate());
  cfg = TrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS(cfg.validate());
  CHECK(parse_mode("trs+advt") == Mode::trs_adv_t);
  CHECK_THROWS(parse_mode("dverge"));
}

TEST_CASE("learning rate schedule decays at the milestones") {
  TrainConfig cfg;
  cfg.epochs = 120;
  cfg.learning_rate = 1.0;
  CHECK(cfg.learning_rate_at(1) == 1.0);
  CHECK(cfg.learning_rate_at(40) == 1.0);
  CHECK(cfg.learning_rate_at(41) == doctest::Approx(0.1));
  CHECK(cfg.learning_rate_at(120) == doctest::Approx(0.01));
}

TEST_CASE("similarity loss examples") {
  const Tensor x = Tensor::matrix(3, 2, {0.1, 0.2, -0.3, 0.4, 0.5, 0.6});
  const auto y = zeros_labels(3);
  CHECK(similarity_loss(linear_loss({1, 2}), linear_loss({1, 2}), x, y).value.value().item() ==
        doctest::Approx(1.0).epsilon(1e-15));
  CHECK(similarity_loss(linear_loss({1, 0}), linear_loss({0, 1}), x, y).value.value().item() == 0.0);
  CHECK(similarity_loss(linear_loss({1, 0}), linear_loss({-3, 0}), x, y).value.value().item() ==
        doctest::Approx(1.0).epsilon(1e-15));
  const RegValue degenerate = similarity_loss(linear_loss({1, 0}), zero_loss(), x, y);
  CHECK(degenerate.value.value().item() == 0.0);
  CHECK(degenerate.degenerate == 3);
}

TEST_CASE("similarity loss lies in [0, 1] on random networks") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = MlpClassifier::initialize({3, 6, 3}, models::Activation::tanh, rng());
    const auto b = MlpClassifier::initialize({3, 6, 3}, models::Activation::softplus, rng());
    const Tensor x = testing::random_tensor(rng, {5, 3});
    const std::vector<std::size_t> y{0, 1, 2, 2, 1};
    const double v = similarity_loss(model_loss(a), model_loss(b), x, y).value.value().item();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("smoothness search reaches the corner maximum of a quadratic") {
  // grad = c x, so ||grad|| over the l-inf ball peaks at a corner: c r sqrt(d).
  for (std::size_t d : {1, 2, 5}) {
    for (double c : {0.5, 2.0}) {
      const double r = 0.3;
      const Tensor x = Tensor::full({1, d}, 1e-9);
      const SmoothValue s = smoothness_loss(quadratic_loss(c), zero_loss(), x, zeros_labels(1), r, 5);
      CHECK(s.value.value().item() == doctest::Approx(c * r * std::sqrt(double(d))).epsilon(1e-7));
      CHECK(linf_norm(s.x_hat - x) <= r + 1e-15);
    }
  }
}

TEST_CASE("smoothness loss with zero radius is the objective at x") {
  std::mt19937_64 rng(4);
  const auto a = MlpClassifier::initialize({2, 5, 2}, models::Activation::tanh, 1);
  const auto b = MlpClassifier::initialize({2, 5, 2}, models::Activation::tanh, 2);
  const Tensor x = testing::random_tensor(rng, {4, 2});
  const std::vector<std::size_t> y{0, 1, 1, 0};
  const SmoothValue s = smoothness_loss(model_loss(a), model_loss(b), x, y, 0.0, 5);
  CHECK(s.x_hat == x);
  const auto ga = models::input_gradient(a, x, y), gb = models::input_gradient(b, x, y);
  double expected = 0.0;
  for (std::size_t r = 0; r < 4; ++r) expected += l2_norm(ga.grads.row_at(r)) + l2_norm(gb.grads.row_at(r));
  CHECK(s.value.value().item() == doctest::Approx(expected / 4).epsilon(1e-14));
}

TEST_CASE("smoothness loss never falls below the objective at x") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    const auto a = MlpClassifier::initialize({2, 6, 2}, models::Activation::tanh, rng());
    const auto b = MlpClassifier::initialize({2, 6, 2}, models::Activation::softplus, rng());
    const Tensor x = testing::random_tensor(rng, {6, 2}, -1, 1);
    const std::vector<std::size_t> y{0, 1, 0, 1, 1, 0};
    const double delta = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    const SmoothValue s = smoothness_loss(model_loss(a), model_loss(b), x, y, delta, 5);
    for (std::size_t r = 0; r < 6; ++r) CHECK(std::max(s.at_x[r], s.at_x_hat[r]) >= s.at_x[r]);
    double mean_at_x = 0.0;
    for (double v : s.at_x) mean_at_x += v / 6.0;
    CHECK(s.value.value().item() >= mean_at_x - 1e-12);
    CHECK(linf_norm(s.x_hat - x) <= delta + 1e-12);
  }
}

TEST_CASE("TRS regularizer examples") {
  const Tensor x = Tensor::matrix(2, 2, {0.1, 0.2, 0.3, 0.4});
  const auto y = zeros_labels(2);
  TrainConfig cfg;
  cfg.lambda_a = 0;
  cfg.lambda_b = 0;
  CHECK(trs_regularizer(linear_loss({1, 1}), linear_loss({1, -1}), x, y, 0.1, cfg).value.value().item() == 0.0);
  cfg.lambda_a = 1;
  CHECK(trs_regularizer(linear_loss({1, 1}), linear_loss({1, 1}), x, y, 0.1, cfg).value.value().item() ==
        doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("GAL loss examples") {
  const Tensor x2 = Tensor::matrix(2, 2, {0.1, 0.2, 0.3, 0.4});
  const auto y = zeros_labels(2);
  const std::vector<LossFn> same{linear_loss({1, 2}), linear_loss({1, 2})};
  CHECK(gal_loss(same, x2, y).value.value().item() == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<LossFn> orth{linear_loss({1, 0}), linear_loss({0, 1})};
  CHECK(gal_loss(orth, x2, y).value.value().item() == 0.0);
  const std::vector<LossFn> anti{linear_loss({1, 0}), linear_loss({-1, 0})};
  CHECK(gal_loss(anti, x2, y).value.value().item() == doctest::Approx(-1.0).epsilon(1e-15));

  const Tensor x3 = Tensor::matrix(1, 3, {0.1, 0.2, 0.3});
  const std::vector<LossFn> three{linear_loss({1, 0, 0}), linear_loss({0, 1, 0}), linear_loss({0, 0, 1})};
  CHECK(gal_loss(three, x3, zeros_labels(1)).value.value().item() == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK_THROWS(gal_loss(std::span<const LossFn>(three.data(), 1), x3, zeros_labels(1)));
}

TEST_CASE("adversarial training loss examples") {
  std::mt19937_64 rng(6);
  const auto net = MlpClassifier::initialize({2, 8, 3}, models::Activation::tanh, 7);
  const Tensor x = testing::random_tensor(rng, {10, 2});
  const std::vector<std::size_t> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  const double clean = models::mean_loss(net, x, y);
  CHECK(adv_training_loss(model_loss(net), x, y, 0.0, 10).value().item() == doctest::Approx(clean).epsilon(1e-15));
  CHECK(adv_training_loss(model_loss(net), x, y, 0.2, 10).value().item() >= clean);
  const auto u = uniform_model(2, 3);
  CHECK(adv_training_loss(model_loss(u), x, y, 0.3, 10).value().item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("zero-weight TRS training follows the vanilla trajectory exactly") {
  const auto ds = data::generate_synthetic(data::SyntheticKind::two_moons, 64, 0.1, 2);
  std::vector<MlpClassifier> members{MlpClassifier::initialize({2, 6, 2}, models::Activation::tanh, 1),
                                     MlpClassifier::initialize({2, 6, 2}, models::Activation::tanh, 2)};
  TrainConfig trs_cfg = small_config(Mode::trs);
  trs_cfg.lambda_a = trs_cfg.lambda_b = 0.0;
  Trainer trs_run(models::Ensemble(members), trs_cfg);
  Trainer vanilla_run(models::Ensemble(members), small_config(Mode::vanilla));
  trs_run.fit(ds);
  vanilla_run.fit(ds);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(trs_run.ensemble().member(i).parameters() == vanilla_run.ensemble().member(i).parameters());
}

TEST_CASE("training is deterministic per seed") {
  const auto ds = data::generate_synthetic(data::SyntheticKind::gaussian_blobs, 60, 0.2, 3);
  for (Mode mode : {Mode::trs, Mode::gal, Mode::cos_l2, Mode::trs_adv_t}) {
    std::vector<MlpClassifier> members{MlpClassifier::initialize({2, 5, 3}, models::Activation::tanh, 1),
                                       MlpClassifier::initialize({2, 5, 3}, models::Activation::tanh, 2)};
    Trainer a(models::Ensemble(members), small_config(mode));
    Trainer b(models::Ensemble(members), small_config(mode));
    const auto ma = a.fit(ds), mb = b.fit(ds);
    for (std::size_t i = 0; i < 2; ++i) CHECK(a.ensemble().member(i).parameters() == b.ensemble().member(i).parameters());
    CHECK(ma.back().mean_reg == mb.back().mean_reg);
  }
}

TEST_CASE("batch loss parameter gradients match finite differences") {
  std::mt19937_64 rng(17);
  for (Mode mode : {Mode::vanilla, Mode::trs, Mode::cos_only, Mode::cos_l2, Mode::gal, Mode::adv_t, Mode::trs_adv_t}) {
    for (int trial = 0; trial < 3; ++trial) {
      const std::size_t width = 2 + rng() % 7;
      std::vector<MlpClassifier> members{
          MlpClassifier::initialize({2, width, 3}, models::Activation::tanh, rng()),
          MlpClassifier::initialize({2, width, 3}, models::Activation::softplus, rng())};
      TrainConfig cfg = small_config(mode);
      cfg.lambda_a = 1.5;
      cfg.lambda_b = 0.7;
      const Trainer trainer(models::Ensemble(members), cfg);
      const Tensor x = testing::random_tensor(rng, {4, 2}, -1, 1);
      const std::vector<std::size_t> y{0, 1, 2, 1};

      auto as_vars = [](const std::vector<std::vector<Tensor>>& ts, bool req) {
        std::vector<std::vector<Var>> out;
        for (const auto& m : ts) {
          out.emplace_back();
          for (const auto& t : m) out.back().emplace_back(t, req);
        }
        return out;
      };
      std::vector<std::vector<Tensor>> base;
      for (const auto& m : members) base.push_back(m.parameters());

      auto params = as_vars(base, true);
      const auto searched = trainer.batch_loss(params, x, y, 0.2);
      const auto frozen = searched.search_points;
      params = as_vars(base, true);
      const auto loss = trainer.batch_loss(params, x, y, 0.2, &frozen);
      std::vector<Var> flat;
      for (const auto& m : params) flat.insert(flat.end(), m.begin(), m.end());
      const auto grads = ad::grad(loss.total, flat);

      std::size_t k = 0;
      for (std::size_t i = 0; i < base.size(); ++i) {
        for (std::size_t j = 0; j < base[i].size(); ++j, ++k) {
          const Tensor fd = ad::fd_gradient(
              [&](const Tensor& p) {
                auto moved = base;
                moved[i][j] = p;
                const auto vars = as_vars(moved, false);
                return trainer.batch_loss(vars, x, y, 0.2, &frozen).total.value().item();
              },
              base[i][j], 1e-5);
          INFO("mode " << to_string(mode) << " member " << i << " tensor " << j);
          CHECK(testing::relative_error(grads[k].value(), fd) <= 1e-4);
        }
      }
    }
  }
}

TEST_CASE("vanilla training of a single network reaches high accuracy") {
  const auto& model = testing::trained_moons_model(3);
  CHECK(models::accuracy(model, testing::moons_train().inputs, testing::moons_train().labels) >= 0.95);
  CHECK(models::accuracy(model, testing::moons_test().inputs, testing::moons_test().labels) >= 0.95);
}

TEST_CASE("adversarial loss exceeds clean loss on a trained model") {
  const auto& model = testing::trained_moons_model(1);
  const auto& test = testing::moons_test();
  std::size_t higher = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Tensor x = test.inputs.row_at(i);
    const std::vector<std::size_t> y{test.labels[i]};
    const double adv = adv_training_loss(model_loss(model), x, y, 0.2, 10).value().item();
    higher += adv > models::loss(model, x, y[0]);
  }
  CHECK(static_cast<double>(higher) / static_cast<double>(test.size()) >= 0.95);
}
