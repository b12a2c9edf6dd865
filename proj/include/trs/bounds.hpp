#pragma once

// Transferability bounds: estimated model constants, the lower/upper bound
// formulas, the two cosine lemmas and an exact checker for the
// total-variation results on finite domains.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "trs/attacks.hpp"
#include "trs/calculus.hpp"
#include "trs/data.hpp"
#include "trs/models.hpp"

namespace trs::bounds {

enum class Mode { targeted, untargeted };

std::string to_string(Mode m);
Mode parse_mode(const std::string& name);

struct ModelConstants {
  double eta_f = 0.0, eta_g = 0.0;  // risks
  double xi_f = 0.0, xi_g = 0.0;    // empirical (mean) losses
  double s_lower = -1.0, s_upper = 1.0;
  double beta = 0.0;
  double grad_bound = 0.0;  // B
  double c_f = 0.0, c_g = 0.0;  // NaN when no reference gradient was usable
  double loss_min = 0.0;
  double epsilon = 0.0;  // l2 radius of the attack
  double alpha = 0.0;

  std::size_t risk_samples = 0;
  std::size_t similarity_pairs = 0;
  std::size_t similarity_degenerate = 0;
  std::size_t beta_pairs = 0;
  std::size_t gradient_samples = 0;
  std::size_t c_samples = 0;
  std::size_t c_degenerate = 0;
  std::size_t loss_min_samples = 0;

  void validate() const;
};

/// eps * sqrt(2 - 2m): if delta.y > c + margin for unit x, y with cosine m
/// and ||delta|| <= eps, then delta.x > c.
double lemma_shift_margin(double m, double epsilon);
/// ||delta|| * sqrt((1 + S) / 2): bounds min(delta.x, delta.y) for unit x, y
/// with x.y < S.
double lemma_dissimilar_projection(double s, const Tensor& delta);

struct BoundValue {
  /// Empty when the denominator is zero or a constant is undefined.
  std::optional<double> raw;
  /// Denominator non-positive or raw value outside [0, 1].
  bool vacuous = false;
  /// raw clamped to [0, 1]; the trivial bound (0 or 1) when vacuous.
  double clamped = 0.0;
};

BoundValue lower_bound(Mode mode, const ModelConstants& k);
BoundValue upper_bound(Mode mode, const ModelConstants& k);

/// Batched input gradients of a loss: rows of x with their labels -> [B, dim].
using GradientFn = std::function<Tensor(const Tensor& x, std::span<const std::size_t> labels)>;

/// Cross-entropy input gradient of a classifier.
GradientFn loss_gradient_fn(const models::Classifier& model);
/// Input gradient of f(params, row), evaluated row by row; labels are ignored.
GradientFn loss_gradient_fn(ad::ScalarFunction f, std::vector<Tensor> params);

struct BetaEstimate {
  double value = 0.0;
  std::size_t pairs = 0;
};

/// max ||g(x1) - g(x2)|| / ||x1 - x2|| over `samples` pairs and every
/// function in `fns`. x1 cycles through the rows of `base`; x2 lies at a
/// uniform distance in (0, radius] in a uniform random direction. Samples
/// are drawn from one stream, so a larger sample count extends a smaller one.
BetaEstimate estimate_beta(std::span<const GradientFn> fns, const Tensor& base, std::span<const std::size_t> labels,
                           double radius, std::size_t samples, std::uint64_t seed);

struct SimilarityExtremes {
  double lower = -1.0;
  double upper = 1.0;
  std::size_t pairs = 0;
  std::size_t degenerate = 0;
};

/// Min/max cosine between the two models' loss gradients over the rows.
/// Rows where either gradient is degenerate are skipped and counted. With no
/// usable rows the trivial extremes [-1, 1] are returned.
SimilarityExtremes similarity_extremes(const models::Classifier& f, const models::Classifier& g, const Tensor& x,
                                       std::span<const std::size_t> labels);

struct EstimationConfig {
  double beta_radius = 0.1;
  std::size_t beta_samples = 2000;
  std::uint64_t seed = 0;
};

/// Estimates every constant from benign rows of `batch` and the adversarials
/// crafted against `f`.
ModelConstants estimate_constants(const models::Classifier& f, const models::Classifier& g,
                                  const attacks::AdvBatch& batch, const EstimationConfig& cfg);
/// Runs `spec` against `f` on `ds` first.
ModelConstants estimate_constants(const models::Classifier& f, const models::Classifier& g, const data::Dataset& ds,
                                  const attacks::AttackSpec& spec, const EstimationConfig& cfg);

struct BoundReport {
  Mode mode = Mode::untargeted;
  ModelConstants constants;
  BoundValue lower;
  BoundValue upper;
  double empirical = 0.0;  // Pr[T_r = 1]
  std::size_t empirical_samples = 0;
  /// Empirical probability outside a non-vacuous bound.
  bool lower_violated = false;
  bool upper_violated = false;
  std::string attack;
};

BoundReport make_report(Mode mode, const ModelConstants& k, double empirical, std::size_t samples,
                        std::string attack = {});
/// Crafts with `spec`, estimates constants and measures the predicate rate.
BoundReport evaluate_bounds(const models::Classifier& f, const models::Classifier& g, const data::Dataset& ds,
                            const attacks::AttackSpec& spec, const EstimationConfig& cfg);

std::string to_json(const BoundReport& report, int indent = 2);

// Finite-domain scenario for the total-variation results. Points are
// indices 0..n-1.
struct DiscreteScenario {
  std::vector<double> mass;
  std::vector<std::size_t> truth;
  std::vector<std::size_t> f;
  std::vector<std::size_t> g;
  std::vector<std::size_t> attack;  // A(i)
  double eps_risk = 0.0;
  /// Declared conservativeness and effectiveness; default to the exact values.
  std::optional<double> rho;
  std::optional<double> delta_eff;

  std::size_t size() const { return mass.size(); }
  void validate() const;
};

struct TvReport {
  double risk_f = 0.0, risk_g = 0.0;
  double rho = 0.0;            // TV distance between P and A#P
  double disagreement = 0.0;   // Pr[F(A(x)) != G(A(x))]
  double lemma_bound = 0.0;    // 2 eps + rho
  double f_unchanged = 0.0;    // Pr[F(x) = F(A(x))]
  double g_unchanged = 0.0;    // Pr[G(x) = G(A(x))]
  double theorem_bound = 0.0;  // delta + 4 eps + rho
  bool lemma_holds = false;
  bool theorem_holds = false;
};

/// Exact enumeration. Throws when a classifier's risk exceeds eps_risk or a
/// declared rho / delta is below the exact value.
TvReport tv_bound_check(const DiscreteScenario& s, double slack = 0.0);

/// Random scenario with dyadic masses (multiples of 1/1024), so every
/// probability above is computed exactly. Each classifier disagrees with the
/// truth on a random subset; eps_risk is the larger realised risk.
DiscreteScenario random_scenario(std::mt19937_64& rng, std::size_t points, std::size_t classes);

}  // namespace trs::bounds
