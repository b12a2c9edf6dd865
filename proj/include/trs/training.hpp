#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trs/autodiff.hpp"
#include "trs/data.hpp"
#include "trs/models.hpp"
#include "trs/tensor.hpp"

namespace trs::training {

enum class Mode { vanilla, trs, cos_only, cos_l2, gal, adv_t, trs_adv_t };
enum class OptimizerKind { adam, sgd };

std::string to_string(Mode m);
std::string to_string(OptimizerKind k);
Mode parse_mode(const std::string& name);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  Mode mode = Mode::trs;
  double lambda_a = 100.0;
  double lambda_b = 2.5;
  double delta_0 = 0.1;
  double delta_M = 0.3;
  std::size_t epochs = 120;  // M
  std::size_t inner_steps = 5;
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Fractions of M after which the learning rate is multiplied by lr_decay.
  std::vector<double> lr_milestones{1.0 / 3.0, 2.0 / 3.0};
  double lr_decay = 0.1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double adv_epsilon = 0.2;
  std::size_t adv_steps = 10;
  double gal_weight = 0.5;
  /// Clip inner searches to this box (taken from the dataset when present).
  std::optional<data::Box> box;

  void validate() const;
  double learning_rate_at(std::size_t epoch) const;
};

/// delta_m = delta_0 + (delta_M - delta_0) * m / M.
double warmup_delta(std::size_t m, const TrainConfig& cfg);

/// Per-item loss of one model, [B, 1], as a differentiable function of x.
/// Model parameters may be captured as variables so results differentiate
/// through them.
using LossFn = std::function<ad::Var(const ad::Var& x, std::span<const std::size_t> labels)>;

LossFn model_loss(const models::MlpClassifier& model, std::vector<ad::Var> params);
/// Loss with the model's stored parameters (constants).
LossFn model_loss(const models::MlpClassifier& model);

/// Input gradients of a per-item loss, [B, dim]; differentiable when
/// `create_graph` is set.
ad::Var loss_input_gradient(const LossFn& f, const Tensor& x, std::span<const std::size_t> labels,
                            bool create_graph = true);

struct RegValue {
  ad::Var value;               // [1, 1]
  std::size_t degenerate = 0;  // items whose gradient norm fell below kDegenerateNorm
};

/// Batch mean of |cos(grad_x l_F, grad_x l_G)|; degenerate items count as 0.
RegValue similarity_loss(const LossFn& f, const LossFn& g, const Tensor& x, std::span<const std::size_t> labels);

struct SmoothValue {
  ad::Var value;  // batch mean of the per-item maximum
  Tensor x_hat;   // per-item maximizer, held constant in `value`
  std::vector<double> at_x;  // per-item objective at x
  std::vector<double> at_x_hat;
};

/// Per item, max over the l-inf ball of radius delta around x of
/// ||grad l_F|| + ||grad l_G||, searched by `inner_steps` sign steps of size
/// delta / 4 starting at x; the larger of the start and the endpoint wins.
SmoothValue smoothness_loss(const LossFn& f, const LossFn& g, const Tensor& x, std::span<const std::size_t> labels,
                            double delta, std::size_t inner_steps, const std::optional<data::Box>& box = std::nullopt);

/// lambda_a * L_sim + lambda_b * L_smooth at radius delta.
RegValue trs_regularizer(const LossFn& f, const LossFn& g, const Tensor& x, std::span<const std::size_t> labels,
                         double delta, const TrainConfig& cfg);

/// Batch mean of log sum_{i<j} exp(cos(grad l_i, grad l_j)) with signed
/// cosines.
RegValue gal_loss(std::span<const LossFn> losses, const Tensor& x, std::span<const std::size_t> labels);

/// Mean loss at the per-item better of x and an l-inf PGD endpoint
/// (`steps` sign steps of size adv_epsilon / 4 from x).
ad::Var adv_training_loss(const LossFn& f, const Tensor& x, std::span<const std::size_t> labels, double adv_epsilon,
                          std::size_t steps, const std::optional<data::Box>& box = std::nullopt);

struct EpochMetrics {
  std::size_t epoch = 0;
  double delta = 0.0;
  double mean_ce = 0.0;
  double mean_reg = 0.0;
  double mean_abs_cos = 0.0;
  double mean_grad_norm = 0.0;
  double clean_acc = 0.0;
  std::size_t degenerate = 0;
};

/// Holds an ensemble and its optimizer state across epochs.
class Trainer {
 public:
  Trainer(models::Ensemble ensemble, TrainConfig cfg);

  /// One pass over `train` at epoch m (1..M).
  EpochMetrics train_epoch(const data::Dataset& train, std::size_t m);
  /// Runs epochs 1..M.
  std::vector<EpochMetrics> fit(const data::Dataset& train);

  const models::Ensemble& ensemble() const { return ensemble_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t optimizer_steps() const { return steps_; }

  struct BatchLoss {
    ad::Var total;  // L_ECE + L_Reg
    double ce = 0.0;
    double reg = 0.0;
    std::size_t degenerate = 0;
    /// Inner-search points: one per model pair (smoothness) or one per
    /// batch (adversarial training), in evaluation order.
    std::vector<Tensor> search_points;
  };

  /// Full batch loss as a function of parameter variables. With `frozen`,
  /// inner-search points are taken from it instead of searched, which makes
  /// the loss an ordinary function of the parameters (used by gradient
  /// checks).
  BatchLoss batch_loss(std::span<const std::vector<ad::Var>> params, const Tensor& x,
                       std::span<const std::size_t> labels, double delta,
                       const std::vector<Tensor>* frozen = nullptr) const;

 private:
  models::Ensemble ensemble_;
  TrainConfig cfg_;
  std::vector<std::vector<Tensor>> m1_, m2_;
  std::size_t steps_ = 0;
};

/// Mean pairwise |cos| of input gradients and mean gradient norm over a
/// dataset (no graph).
struct DiversityStats {
  double mean_abs_cos = 0.0;
  double mean_grad_norm = 0.0;
  std::size_t degenerate = 0;
};
DiversityStats diversity(const models::Ensemble& ensemble, const Tensor& x, std::span<const std::size_t> labels);

void write_metrics_csv(std::ostream& out, std::span<const EpochMetrics> rows);

}  // namespace trs::training
