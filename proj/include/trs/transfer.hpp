#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trs/attacks.hpp"
#include "trs/data.hpp"
#include "trs/models.hpp"

namespace trs::transfer {

/// Instance-level transferability. Untargeted: F(x) = G(x) = y and both
/// models misclassify adv. Targeted: F(x) = G(x) = y and both predict y_t
/// on adv. The clean gate uses the dataset label.
bool transfer_predicate(const models::Classifier& f, const models::Classifier& g, const Tensor& x_row, std::size_t y,
                        const Tensor& adv_row, bool targeted, std::optional<std::size_t> target = std::nullopt);

struct TransferReport {
  std::string surrogate_id;
  std::string target_id;
  attacks::AttackSpec spec;
  std::size_t total = 0;
  std::size_t clean_both_correct = 0;
  std::size_t surrogate_fooled = 0;
  std::size_t target_fooled = 0;
  std::size_t predicate_satisfied = 0;
  /// predicate_satisfied / total.
  double probability = 0.0;
  /// target_fooled / total: the attack success rate shown in transfer
  /// matrices, which does not gate on clean correctness.
  double target_success_rate = 0.0;
  std::vector<bool> bits;
};

/// Evaluates the predicate for an existing adversarial batch.
TransferReport transferability_of(const models::Classifier& f, const models::Classifier& g,
                                  const attacks::AdvBatch& batch);

/// Crafts adversarials against the surrogate `f` with `spec` and evaluates
/// the predicate over the dataset.
TransferReport estimate_transferability(const models::Classifier& f, const models::Classifier& g,
                                        const data::Dataset& ds, const attacks::AttackSpec& spec,
                                        std::string surrogate_id = "F", std::string target_id = "G");

struct TransferMatrix {
  std::vector<std::string> ids;
  /// rates[i][j]: success rate on model j of adversarials crafted on model i.
  std::vector<std::vector<double>> rates;

  double off_diagonal_mean() const;
};

TransferMatrix transfer_matrix(std::span<const models::Classifier* const> models, std::vector<std::string> ids,
                               const data::Dataset& ds, const attacks::AttackSpec& spec);

/// Fraction of unsuccessful attempts over all (surrogate, spec, restart)
/// attempts; every PGD restart is a separate attempt. An attempt succeeds
/// when the target misclassifies its adversarial.
double blackbox_robust_accuracy(const models::Classifier& target,
                                std::span<const models::Classifier* const> surrogates, const data::Dataset& ds,
                                std::span<const attacks::AttackSpec> specs);

void write_matrix_csv(std::ostream& out, const TransferMatrix& m);

}  // namespace trs::transfer
