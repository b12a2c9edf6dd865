#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trs/data.hpp"
#include "trs/models.hpp"
#include "trs/tensor.hpp"

namespace trs::attacks {

enum class Method { fgsm, bim, pgd, mim, cw, ead };
enum class Norm { l2, linf };
/// Objective ascended by the gradient-sign family: cross-entropy, or the
/// logit margin used by CW.
enum class AttackLoss { cross_entropy, margin };

std::string to_string(Method m);
std::string to_string(Norm n);
std::string to_string(AttackLoss l);
Method parse_method(const std::string& name);
Norm parse_norm(const std::string& name);
AttackLoss parse_attack_loss(const std::string& name);

struct AttackSpec {
  Method method = Method::pgd;
  bool targeted = false;
  std::size_t target = 0;  // y_t when targeted
  Norm norm = Norm::linf;
  /// Perturbation radius. CW and EAD default to unconstrained (infinity).
  double epsilon = 0.3;
  std::size_t steps = 50;
  /// Per-step size for BIM/MIM/PGD; epsilon / 5 when unset.
  std::optional<double> step_size;
  std::size_t restarts = 5;
  double momentum = 1.0;
  AttackLoss loss = AttackLoss::cross_entropy;
  // CW / EAD
  double c = 1.0;
  double kappa = 0.1;
  double l1_weight = 0.01;
  double learning_rate = 0.01;
  std::optional<data::Box> box;
  std::uint64_t seed = 0;

  /// Defaults for a method: 50 steps of size epsilon/5 and 5 PGD restarts;
  /// 1000 iterations, kappa 0.1 and l1 weight 0.01 for CW/EAD.
  static AttackSpec defaults(Method method, double epsilon);
  static AttackSpec carlini_wagner(double c, bool elastic_net = false);

  double effective_step() const;
  bool constrained() const { return std::isfinite(epsilon); }
  void validate() const;
  std::string label() const;
};

struct AdvBatch {
  Tensor originals;
  Tensor adversarials;
  std::vector<std::size_t> labels;
  AttackSpec spec;
  /// Against the crafting model: prediction != label (untargeted) or
  /// prediction == target (targeted).
  std::vector<bool> success;
  /// Steps skipped because an item's gradient was degenerate.
  std::size_t degenerate_steps = 0;

  std::size_t size() const { return labels.size(); }
};

/// Runs `spec` against `model`. Iterative methods start from `start` when
/// given (projected into the ball); PGD then also keeps `start` itself as a
/// candidate, so a larger budget warm-started from a smaller one never
/// loses a success.
AdvBatch run_attack(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackSpec& spec, const std::optional<Tensor>& start = std::nullopt);

/// Per-item objective the attack ascends (cross-entropy or clamped margin,
/// negated for targeted mode) and its input gradient.
struct Objective {
  std::vector<double> values;
  Tensor grads;
};
Objective attack_objective(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                           const AttackSpec& spec);

struct Effectiveness {
  double alpha = 0.0;         // failure probability estimate
  double success_rate = 0.0;  // 1 - alpha
  std::size_t count = 0;
};

/// Untargeted: alpha = fraction with F(adv) = y. Targeted: fraction with
/// F(adv) != y_t.
Effectiveness effectiveness(const models::Classifier& model, const AdvBatch& batch);

/// Item-wise success of `batch` against an arbitrary model.
std::vector<bool> success_against(const models::Classifier& model, const AdvBatch& batch);

// Projection helpers shared with training.
Tensor project_linf(const Tensor& candidate, const Tensor& center, double radius);
Tensor project_l2(const Tensor& candidate, const Tensor& center, double radius);
Tensor clip_to_box(const Tensor& x, const data::Box& box);
/// Per-row sign of the gradient (linf) or unit-l2 direction (l2).
Tensor step_direction(const Tensor& grad, Norm norm);

}  // namespace trs::attacks
