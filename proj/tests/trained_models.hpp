#pragma once

// Small two-moons models trained once per test binary.

#include <map>

#include "trs/data.hpp"
#include "trs/training.hpp"

namespace trs::testing {

inline const data::Dataset& moons_train() {
  static const data::Dataset ds = data::generate_synthetic(data::SyntheticKind::two_moons, 600, 0.1, 100);
  return ds;
}

inline const data::Dataset& moons_test() {
  static const data::Dataset ds = data::generate_synthetic(data::SyntheticKind::two_moons, 200, 0.1, 101);
  return ds;
}

/// Vanilla single network, trained with Adam at lr 0.1 for 60 epochs.
inline const models::MlpClassifier& trained_moons_model(std::uint64_t seed) {
  static std::map<std::uint64_t, models::MlpClassifier> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  training::TrainConfig cfg;
  cfg.mode = training::Mode::vanilla;
  cfg.epochs = 60;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 32;
  cfg.seed = seed;
  training::Trainer trainer(
      models::Ensemble({models::MlpClassifier::initialize({2, 16, 16, 2}, models::Activation::tanh, seed)}), cfg);
  trainer.fit(moons_train());
  return cache.emplace(seed, trainer.ensemble().member(0)).first->second;
}

}  // namespace trs::testing
