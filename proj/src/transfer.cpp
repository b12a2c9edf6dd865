#include "trs/transfer.hpp"

#include <ostream>
#include <stdexcept>

#include "trs/format.hpp"

namespace trs::transfer {

namespace {

bool fooled(std::size_t pred, std::size_t y, bool targeted, std::optional<std::size_t> target) {
  return targeted ? pred == *target : pred != y;
}

void require_target(bool targeted, std::optional<std::size_t> target) {
  if (targeted && !target) throw std::invalid_argument("transfer: targeted mode needs a target class");
}

}  // namespace

bool transfer_predicate(const models::Classifier& f, const models::Classifier& g, const Tensor& x_row, std::size_t y,
                        const Tensor& adv_row, bool targeted, std::optional<std::size_t> target) {
  require_target(targeted, target);
  const auto fx = models::predict_labels(f, x_row), gx = models::predict_labels(g, x_row);
  if (fx.size() != 1) throw std::invalid_argument("transfer_predicate: expects a single row");
  if (fx[0] != y || gx[0] != y) return false;
  const auto fa = models::predict_labels(f, adv_row), ga = models::predict_labels(g, adv_row);
  return fooled(fa[0], y, targeted, target) && fooled(ga[0], y, targeted, target);
}

TransferReport transferability_of(const models::Classifier& f, const models::Classifier& g,
                                  const attacks::AdvBatch& batch) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("transferability: empty dataset");
  const bool targeted = batch.spec.targeted;
  const std::optional<std::size_t> target =
      targeted ? std::optional<std::size_t>(batch.spec.target) : std::nullopt;
  const auto fx = models::predict_labels(f, batch.originals), gx = models::predict_labels(g, batch.originals);
  const auto fa = models::predict_labels(f, batch.adversarials), ga = models::predict_labels(g, batch.adversarials);
  TransferReport r;
  r.spec = batch.spec;
  r.total = n;
  r.bits.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = batch.labels[i];
    const bool clean = fx[i] == y && gx[i] == y;
    const bool f_fooled = fooled(fa[i], y, targeted, target), g_fooled = fooled(ga[i], y, targeted, target);
    r.clean_both_correct += clean;
    r.surrogate_fooled += f_fooled;
    r.target_fooled += g_fooled;
    r.bits[i] = clean && f_fooled && g_fooled;
    r.predicate_satisfied += r.bits[i];
  }
  r.probability = static_cast<double>(r.predicate_satisfied) / static_cast<double>(n);
  r.target_success_rate = static_cast<double>(r.target_fooled) / static_cast<double>(n);
  return r;
}

TransferReport estimate_transferability(const models::Classifier& f, const models::Classifier& g,
                                        const data::Dataset& ds, const attacks::AttackSpec& spec,
                                        std::string surrogate_id, std::string target_id) {
  if (ds.empty()) throw std::invalid_argument("estimate_transferability: empty dataset");
  TransferReport r = transferability_of(f, g, attacks::run_attack(f, ds.inputs, ds.labels, spec));
  r.surrogate_id = std::move(surrogate_id);
  r.target_id = std::move(target_id);
  return r;
}

double TransferMatrix::off_diagonal_mean() const {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < rates.size(); ++i)
    for (std::size_t j = 0; j < rates.size(); ++j)
      if (i != j) total += rates[i][j], ++count;
  return count ? total / static_cast<double>(count) : 0.0;
}

TransferMatrix transfer_matrix(std::span<const models::Classifier* const> models, std::vector<std::string> ids,
                               const data::Dataset& ds, const attacks::AttackSpec& spec) {
  if (models.empty()) throw std::invalid_argument("transfer_matrix: no models");
  if (ds.empty()) throw std::invalid_argument("transfer_matrix: empty dataset");
  if (ids.size() != models.size()) throw std::invalid_argument("transfer_matrix: one id per model required");
  TransferMatrix m;
  m.ids = std::move(ids);
  for (const auto* source : models) {
    const attacks::AdvBatch batch = attacks::run_attack(*source, ds.inputs, ds.labels, spec);
    std::vector<double> row;
    for (const auto* target : models) row.push_back(attacks::effectiveness(*target, batch).success_rate);
    m.rates.push_back(std::move(row));
  }
  return m;
}

double blackbox_robust_accuracy(const models::Classifier& target,
                                std::span<const models::Classifier* const> surrogates, const data::Dataset& ds,
                                std::span<const attacks::AttackSpec> specs) {
  if (surrogates.empty() || specs.empty()) throw std::invalid_argument("blackbox_robust_accuracy: empty inputs");
  if (ds.empty()) throw std::invalid_argument("blackbox_robust_accuracy: empty dataset");
  std::size_t attempts = 0, failures = 0;
  for (const auto* surrogate : surrogates) {
    for (const auto& spec : specs) {
      const std::size_t rounds = spec.method == attacks::Method::pgd ? spec.restarts : 1;
      for (std::size_t k = 0; k < rounds; ++k) {
        attacks::AttackSpec single = spec;
        single.restarts = 1;
        single.seed = spec.seed + k;
        const attacks::AdvBatch batch = attacks::run_attack(*surrogate, ds.inputs, ds.labels, single);
        const auto pred = models::predict_labels(target, batch.adversarials);
        for (std::size_t i = 0; i < pred.size(); ++i) failures += pred[i] == ds.labels[i];
        attempts += pred.size();
      }
    }
  }
  return static_cast<double>(failures) / static_cast<double>(attempts);
}

void write_matrix_csv(std::ostream& out, const TransferMatrix& m) {
  out << "source";
  for (const auto& id : m.ids) out << ',' << id;
  out << '\n';
  for (std::size_t i = 0; i < m.ids.size(); ++i) {
    out << m.ids[i];
    for (double v : m.rates[i]) out << ',' << format_double(v);
    out << '\n';
  }
}

}  // namespace trs::transfer
