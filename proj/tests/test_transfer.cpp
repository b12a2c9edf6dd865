#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "test_support.hpp"
#include "trained_models.hpp"
#include "trs/transfer.hpp"

using namespace trs;
using namespace trs::transfer;
using attacks::AttackSpec;
using attacks::Method;
using models::MlpClassifier;

namespace {

MlpClassifier logistic(double w) {
  return MlpClassifier({1, 2}, models::Activation::tanh, {Tensor::matrix(1, 2, {0.0, w}), Tensor::zeros({1, 2})});
}

data::Dataset line_data() {
  data::Dataset ds;
  ds.inputs = Tensor::matrix(4, 1, {1.0, 0.5, -1.0, -0.5});
  ds.labels = {1, 1, 0, 0};
  ds.num_classes = 2;
  return ds;
}

}  // namespace

TEST_CASE("predicate examples") {
  const auto f = logistic(1.0);
  const Tensor x = Tensor::row({1.0});
  CHECK(transfer_predicate(f, f, x, 1, Tensor::row({-0.5}), false));
  CHECK_FALSE(transfer_predicate(f, f, x, 1, Tensor::row({0.5}), false));
  // Clean input misclassified: never transferable.
  CHECK_FALSE(transfer_predicate(f, f, Tensor::row({-1.0}), 1, Tensor::row({-2.0}), false));
  // Targeted toward class 0.
  CHECK(transfer_predicate(f, f, x, 1, Tensor::row({-0.5}), true, 0));
  CHECK_FALSE(transfer_predicate(f, logistic(-1.0), x, 1, Tensor::row({-0.5}), true, 0));
  CHECK_THROWS(transfer_predicate(f, f, x, 1, Tensor::row({-0.5}), true));
}

TEST_CASE("zero budget gives zero transferability") {
  const auto f = logistic(1.0), g = logistic(2.0);
  const TransferReport r = estimate_transferability(f, g, line_data(), AttackSpec::defaults(Method::pgd, 0.0));
  CHECK(r.probability == 0.0);
  CHECK(r.clean_both_correct == 4);
  CHECK(r.predicate_satisfied <= r.clean_both_correct);
}

TEST_CASE("identical models collapse to clean-correct and fooled") {
  const auto& f = testing::trained_moons_model(1);
  const auto& ds = testing::moons_test();
  AttackSpec spec = AttackSpec::defaults(Method::pgd, 0.1);
  spec.steps = 20;
  const attacks::AdvBatch batch = attacks::run_attack(f, ds.inputs, ds.labels, spec);
  const TransferReport r = transferability_of(f, f, batch);
  const auto clean = models::predict_labels(f, ds.inputs);
  std::size_t expected = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) expected += clean[i] == ds.labels[i] && batch.success[i];
  CHECK(r.predicate_satisfied == expected);
  CHECK(r.probability == static_cast<double>(expected) / static_cast<double>(ds.size()));
}

TEST_CASE("predicate implies both models are fooled") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = MlpClassifier::initialize({2, 6, 3}, models::Activation::tanh, rng());
    const auto g = MlpClassifier::initialize({2, 6, 3}, models::Activation::tanh, rng());
    const Tensor x = testing::random_tensor(rng, {30, 2});
    const auto y = models::predict_labels(f, x);
    AttackSpec spec = AttackSpec::defaults(Method::bim, 0.8);
    spec.steps = 5;
    const auto batch = attacks::run_attack(f, x, y, spec);
    const TransferReport r = transferability_of(f, g, batch);
    const auto on_f = attacks::success_against(f, batch), on_g = attacks::success_against(g, batch);
    for (std::size_t i = 0; i < 30; ++i)
      if (r.bits[i]) CHECK((on_f[i] && on_g[i]));
    CHECK(r.predicate_satisfied <= r.clean_both_correct);
    CHECK(r.probability >= 0.0);
    CHECK(r.probability <= 1.0);
  }
}

TEST_CASE("transferability estimate is permutation invariant") {
  const auto& f = testing::trained_moons_model(1);
  const auto& g = testing::trained_moons_model(2);
  const auto& ds = testing::moons_test();
  AttackSpec spec = AttackSpec::defaults(Method::bim, 0.1);
  spec.steps = 10;
  std::vector<std::size_t> perm(ds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = perm.size() - 1 - i;
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
  const auto a = estimate_transferability(f, g, ds, spec);
  const auto b = estimate_transferability(f, g, data::subset(ds, perm), spec);
  CHECK(a.predicate_satisfied == b.predicate_satisfied);
  CHECK(a.probability == b.probability);
}

TEST_CASE("transfer matrix shapes and diagonal") {
  const auto& f = testing::trained_moons_model(1);
  const auto& g = testing::trained_moons_model(2);
  const auto& ds = testing::moons_test();
  AttackSpec spec = AttackSpec::defaults(Method::pgd, 0.1);
  spec.steps = 20;
  spec.restarts = 2;

  const models::Classifier* single[] = {&f};
  const TransferMatrix one = transfer_matrix(single, {"F"}, ds, spec);
  const auto whitebox = attacks::run_attack(f, ds.inputs, ds.labels, spec);
  CHECK(one.rates[0][0] == attacks::effectiveness(f, whitebox).success_rate);

  const models::Classifier* twice[] = {&f, &f};
  const TransferMatrix dup = transfer_matrix(twice, {"F", "F2"}, ds, spec);
  for (const auto& row : dup.rates)
    for (double v : row) CHECK(v == dup.rates[0][0]);

  const models::Classifier* pair[] = {&f, &g};
  const TransferMatrix m = transfer_matrix(pair, {"F", "G"}, ds, spec);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto batch = attacks::run_attack(*pair[i], ds.inputs, ds.labels, spec);
    CHECK(m.rates[i][i] == 1.0 - attacks::effectiveness(*pair[i], batch).alpha);
    for (double v : m.rates[i]) CHECK((v >= 0.0 && v <= 1.0));
  }

  // The predicate rate and the matrix cell agree on accurate models.
  const TransferReport r = estimate_transferability(f, g, ds, spec);
  CHECK(std::abs(r.probability - m.rates[0][1]) <= 0.05);
  CHECK(r.target_success_rate == m.rates[0][1]);

  std::ostringstream csv;
  write_matrix_csv(csv, m);
  CHECK(csv.str().rfind("source,F,G\n", 0) == 0);
  CHECK_THROWS(transfer_matrix(single, {}, ds, spec));
}

TEST_CASE("blackbox robust accuracy") {
  const auto f = logistic(1.0);
  const auto ds = line_data();
  const models::Classifier* surrogates[] = {&f};
  const AttackSpec zero[] = {AttackSpec::defaults(Method::pgd, 0.0)};
  CHECK(blackbox_robust_accuracy(f, surrogates, ds, zero) == 1.0);

  const auto& model = testing::trained_moons_model(1);
  const auto& test = testing::moons_test();
  AttackSpec spec = AttackSpec::defaults(Method::pgd, 0.15);
  spec.steps = 20;
  spec.restarts = 1;
  const models::Classifier* self[] = {&model};
  const double rate = blackbox_robust_accuracy(model, self, test, std::span(&spec, 1));
  const auto adv = attacks::run_attack(model, test.inputs, test.labels, spec);
  CHECK(rate <= models::accuracy(model, adv.adversarials, test.labels));

  CHECK_THROWS(blackbox_robust_accuracy(f, std::span<const models::Classifier* const>(), ds, zero));
}
