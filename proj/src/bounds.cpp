#include "trs/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "trs/transfer.hpp"

namespace trs::bounds {

std::string to_string(Mode m) { return m == Mode::targeted ? "targeted" : "untargeted"; }

Mode parse_mode(const std::string& name) {
  if (name == "targeted") return Mode::targeted;
  if (name == "untargeted") return Mode::untargeted;
  throw std::invalid_argument("unknown bound mode '" + name + "'");
}

void ModelConstants::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(eta_f) || !unit(eta_g)) throw std::invalid_argument("constants: risks must lie in [0,1]");
  if (!unit(alpha)) throw std::invalid_argument("constants: alpha must lie in [0,1]");
  if (!(s_lower >= -1.0 && s_upper <= 1.0 && s_lower <= s_upper)) {
    throw std::invalid_argument("constants: need -1 <= S_lower <= S_upper <= 1");
  }
  if (!(xi_f >= 0.0 && xi_g >= 0.0)) throw std::invalid_argument("constants: empirical risks must be >= 0");
  if (!(beta >= 0.0 && grad_bound >= 0.0 && epsilon >= 0.0)) {
    throw std::invalid_argument("constants: beta, B and epsilon must be >= 0");
  }
}

namespace {

void check_cosine(double v, const char* what) {
  if (!(v >= -1.0 && v <= 1.0)) throw std::invalid_argument(std::string(what) + ": cosine outside [-1,1]");
}

BoundValue finish(double raw, bool bad_denominator, double trivial) {
  BoundValue out;
  out.raw = raw;
  out.vacuous = bad_denominator || raw < 0.0 || raw > 1.0;
  out.clamped = out.vacuous && bad_denominator ? trivial : std::clamp(raw, 0.0, 1.0);
  return out;
}

}  // namespace

double lemma_shift_margin(double m, double epsilon) {
  check_cosine(m, "lemma_shift_margin");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("lemma_shift_margin: epsilon must be >= 0");
  return epsilon * std::sqrt(std::max(0.0, 2.0 - 2.0 * m));
}

double lemma_dissimilar_projection(double s, const Tensor& delta) {
  check_cosine(s, "lemma_dissimilar_projection");
  return l2_norm(delta) * std::sqrt((1.0 + s) / 2.0);
}

BoundValue lower_bound(Mode mode, const ModelConstants& k) {
  k.validate();
  const double eps = k.epsilon, a = k.alpha;
  const double den = mode == Mode::targeted ? k.c_g + eps : eps - k.c_g;
  if (den == 0.0 || !std::isfinite(den) || !std::isfinite(k.c_f)) return BoundValue{std::nullopt, true, 0.0};
  const double shift = mode == Mode::targeted ? eps * (1 + a) + k.c_f * (1 - a) : eps * (1 + a) - k.c_f * (1 - a);
  const double raw = (1 - a) - (k.eta_f + k.eta_g) - shift / den -
                     eps * (1 - a) / den * std::sqrt(std::max(0.0, 2.0 - 2.0 * k.s_lower));
  return finish(raw, den < 0.0, 0.0);
}

BoundValue upper_bound(Mode, const ModelConstants& k) {
  k.validate();
  const double eps = k.epsilon;
  const double den =
      k.loss_min - eps * k.grad_bound * (1.0 + std::sqrt((1.0 + k.s_upper) / 2.0)) - k.beta * eps * eps;
  if (den == 0.0 || !std::isfinite(den)) return BoundValue{std::nullopt, true, 1.0};
  return finish((k.xi_f + k.xi_g) / den, den < 0.0, 1.0);
}

GradientFn loss_gradient_fn(const models::Classifier& model) {
  return [&model](const Tensor& x, std::span<const std::size_t> labels) {
    return models::input_gradient(model, x, labels).grads;
  };
}

GradientFn loss_gradient_fn(ad::ScalarFunction f, std::vector<Tensor> params) {
  return [f = std::move(f), params = std::move(params)](const Tensor& x, std::span<const std::size_t>) {
    std::vector<Tensor> rows;
    rows.reserve(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      rows.push_back(ad::gradient(f, params, x.row_at(r), ad::Argument::input()));
    }
    return stack_rows(rows);
  };
}

BetaEstimate estimate_beta(std::span<const GradientFn> fns, const Tensor& base, std::span<const std::size_t> labels,
                           double radius, std::size_t samples, std::uint64_t seed) {
  if (base.rows() == 0) throw std::invalid_argument("estimate_beta: no base points");
  if (labels.size() != base.rows()) throw std::invalid_argument("estimate_beta: label count mismatch");
  if (!(radius > 0.0)) throw std::invalid_argument("estimate_beta: radius must be positive");
  const std::size_t n = base.rows(), d = base.cols();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> x1(samples * d), x2(samples * d);
  std::vector<std::size_t> y(samples);
  std::vector<double> dir(d);
  for (std::size_t k = 0; k < samples; ++k) {
    const std::size_t i = k % n;
    double norm = 0.0;
    while (norm < 1e-12) {
      for (auto& v : dir) v = gauss(rng);
      norm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
    }
    const double t = radius * (1.0 - unif(rng));
    for (std::size_t j = 0; j < d; ++j) {
      x1[k * d + j] = base.at(i, j);
      x2[k * d + j] = base.at(i, j) + t * dir[j] / norm;
    }
    y[k] = labels[i];
  }
  BetaEstimate out;
  out.pairs = samples;
  if (samples == 0) return out;
  const Tensor a({samples, d}, std::move(x1)), b({samples, d}, std::move(x2));
  for (const auto& fn : fns) {
    const Tensor ga = fn(a, y), gb = fn(b, y);
    for (std::size_t k = 0; k < samples; ++k) {
      double num = 0.0, den = 0.0;
      for (std::size_t j = 0; j < ga.cols(); ++j) num += std::pow(ga.at(k, j) - gb.at(k, j), 2);
      for (std::size_t j = 0; j < d; ++j) den += std::pow(a.at(k, j) - b.at(k, j), 2);
      if (den > 0.0) out.value = std::max(out.value, std::sqrt(num / den));
    }
  }
  return out;
}

SimilarityExtremes similarity_extremes(const models::Classifier& f, const models::Classifier& g, const Tensor& x,
                                       std::span<const std::size_t> labels) {
  SimilarityExtremes out;
  if (x.rows() == 0) return out;
  const auto gf = models::input_gradient(f, x, labels);
  const auto gg = models::input_gradient(g, x, labels);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (gf.degenerate[r] || gg.degenerate[r]) {
      ++out.degenerate;
      continue;
    }
    const Tensor a = gf.grads.row_at(r), b = gg.grads.row_at(r);
    const double c = std::clamp(dot(a, b) / (l2_norm(a) * l2_norm(b)), -1.0, 1.0);
    lo = std::min(lo, c);
    hi = std::max(hi, c);
    ++out.pairs;
  }
  if (out.pairs > 0) {
    out.lower = lo;
    out.upper = hi;
  }
  return out;
}

namespace {

// -log confidence for every class, [B][C].
std::vector<std::vector<double>> class_losses(const models::Classifier& model, const Tensor& x) {
  const Tensor p = models::predict_confidences(model, x);
  std::vector<std::vector<double>> out(p.rows(), std::vector<double>(p.cols()));
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t c = 0; c < p.cols(); ++c) out[r][c] = -std::log(std::max(p.at(r, c), models::kMinConfidence));
  }
  return out;
}

double row_norm(const Tensor& m, std::size_t r) {
  double s = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) s += m.at(r, j) * m.at(r, j);
  return std::sqrt(s);
}

double error_rate(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels) {
  return 1.0 - models::accuracy(model, x, labels);
}

}  // namespace

ModelConstants estimate_constants(const models::Classifier& f, const models::Classifier& g,
                                  const attacks::AdvBatch& batch, const EstimationConfig& cfg) {
  const Tensor& x = batch.originals;
  const Tensor& adv = batch.adversarials;
  const auto& y = batch.labels;
  const std::size_t n = y.size();
  if (n == 0) throw std::invalid_argument("estimate_constants: empty batch");
  const bool targeted = batch.spec.targeted;
  const std::size_t yt = batch.spec.target;

  ModelConstants k;
  k.risk_samples = n;
  k.eta_f = error_rate(f, x, y);
  k.eta_g = error_rate(g, x, y);
  k.xi_f = models::mean_loss(f, x, y);
  k.xi_g = models::mean_loss(g, x, y);
  k.alpha = attacks::effectiveness(f, batch).alpha;

  // l2 radius: the nominal ball when constrained, else the largest observed
  // perturbation.
  double observed = 0.0;
  for (std::size_t r = 0; r < n; ++r) observed = std::max(observed, l2_norm(adv.row_at(r) - x.row_at(r)));
  if (batch.spec.constrained()) {
    k.epsilon = batch.spec.norm == attacks::Norm::l2 ? batch.spec.epsilon
                                                     : batch.spec.epsilon * std::sqrt(static_cast<double>(x.cols()));
  } else {
    k.epsilon = observed;
  }

  // Sampled points: benign rows and attack endpoints, with true labels, plus
  // the target label when targeted.
  std::vector<Tensor> rows;
  std::vector<std::size_t> labels;
  for (std::size_t r = 0; r < n; ++r) {
    rows.push_back(x.row_at(r));
    labels.push_back(y[r]);
  }
  for (std::size_t r = 0; r < n; ++r) {
    rows.push_back(adv.row_at(r));
    labels.push_back(y[r]);
  }
  if (targeted) {
    for (std::size_t r = 0; r < 2 * n; ++r) {
      rows.push_back(rows[r]);
      labels.push_back(yt);
    }
  }
  const Tensor pts = stack_rows(rows);
  const auto sim = similarity_extremes(f, g, pts, labels);
  k.s_lower = sim.lower;
  k.s_upper = sim.upper;
  k.similarity_pairs = sim.pairs;
  k.similarity_degenerate = sim.degenerate;

  const auto gf = models::input_gradient(f, pts, labels);
  const auto gg = models::input_gradient(g, pts, labels);
  for (std::size_t r = 0; r < pts.rows(); ++r) {
    k.grad_bound = std::max({k.grad_bound, row_norm(gf.grads, r), row_norm(gg.grads, r)});
  }
  k.gradient_samples = 2 * pts.rows();

  const GradientFn fns[] = {loss_gradient_fn(f), loss_gradient_fn(g)};
  const auto beta = estimate_beta(fns, pts, labels, cfg.beta_radius, cfg.beta_samples, cfg.seed);
  k.beta = beta.value;
  k.beta_pairs = beta.pairs;

  // c_F, c_G exactly as the theorems print them (note the min/max roles swap
  // between the targeted and untargeted statements).
  const double half = k.beta * k.epsilon * k.epsilon / 2.0;
  const auto adv_f = class_losses(f, adv), adv_g = class_losses(g, adv);
  const auto cl_f = class_losses(f, x), cl_g = class_losses(g, x);
  std::vector<std::size_t> ref(n);
  for (std::size_t r = 0; r < n; ++r) ref[r] = targeted ? yt : y[r];
  const auto rf = models::input_gradient(f, x, ref), rg = models::input_gradient(g, x, ref);
  const double inf = std::numeric_limits<double>::infinity();
  double cf = targeted ? -inf : inf, cg = targeted ? inf : -inf;
  for (std::size_t r = 0; r < n; ++r) {
    if (rf.degenerate[r] || rg.degenerate[r]) {
      ++k.c_degenerate;
      continue;
    }
    double min_f = inf, min_g = inf;
    for (std::size_t c = 0; c < adv_f[r].size(); ++c) {
      if (!targeted && c == y[r]) continue;
      min_f = std::min(min_f, adv_f[r][c]);
      min_g = std::min(min_g, adv_g[r][c]);
    }
    const double tf = (min_f - cl_f[r][ref[r]] + (targeted ? half : -half)) / row_norm(rf.grads, r);
    const double tg = (min_g - cl_g[r][ref[r]] + (targeted ? -half : half)) / row_norm(rg.grads, r);
    cf = targeted ? std::max(cf, tf) : std::min(cf, tf);
    cg = targeted ? std::min(cg, tg) : std::max(cg, tg);
    ++k.c_samples;
  }
  // Undefined when every reference gradient is degenerate.
  k.c_f = k.c_samples > 0 ? cf : std::numeric_limits<double>::quiet_NaN();
  k.c_g = k.c_samples > 0 ? cg : std::numeric_limits<double>::quiet_NaN();

  double lmin = inf;
  if (targeted) {
    const auto pf = class_losses(f, pts), pg = class_losses(g, pts);
    for (std::size_t r = 0; r < 2 * n; ++r) lmin = std::min({lmin, pf[r][yt], pg[r][yt]});
    k.loss_min_samples = 2 * n;
  } else {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < cl_f[r].size(); ++c) {
        if (c != y[r]) lmin = std::min({lmin, cl_f[r][c], cl_g[r][c]});
      }
    }
    k.loss_min_samples = n;
  }
  k.loss_min = lmin;
  k.validate();
  return k;
}

ModelConstants estimate_constants(const models::Classifier& f, const models::Classifier& g, const data::Dataset& ds,
                                  const attacks::AttackSpec& spec, const EstimationConfig& cfg) {
  if (ds.size() == 0) throw std::invalid_argument("estimate_constants: empty dataset");
  return estimate_constants(f, g, attacks::run_attack(f, ds.inputs, ds.labels, spec), cfg);
}

BoundReport make_report(Mode mode, const ModelConstants& k, double empirical, std::size_t samples,
                        std::string attack) {
  BoundReport rep;
  rep.mode = mode;
  rep.constants = k;
  rep.lower = lower_bound(mode, k);
  rep.upper = upper_bound(mode, k);
  rep.empirical = empirical;
  rep.empirical_samples = samples;
  rep.lower_violated = !rep.lower.vacuous && empirical < *rep.lower.raw;
  rep.upper_violated = !rep.upper.vacuous && empirical > *rep.upper.raw;
  rep.attack = std::move(attack);
  return rep;
}

BoundReport evaluate_bounds(const models::Classifier& f, const models::Classifier& g, const data::Dataset& ds,
                            const attacks::AttackSpec& spec, const EstimationConfig& cfg) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate_bounds: empty dataset");
  const auto batch = attacks::run_attack(f, ds.inputs, ds.labels, spec);
  const auto k = estimate_constants(f, g, batch, cfg);
  const auto tr = transfer::transferability_of(f, g, batch);
  return make_report(spec.targeted ? Mode::targeted : Mode::untargeted, k, tr.probability, tr.total, spec.label());
}

namespace {

nlohmann::json bound_json(const BoundValue& b) {
  nlohmann::json j;
  j["raw"] = b.raw ? nlohmann::json(*b.raw) : nlohmann::json(nullptr);
  j["clamped"] = b.clamped;
  j["vacuous"] = b.vacuous;
  return j;
}

}  // namespace

std::string to_json(const BoundReport& r, int indent) {
  const auto& k = r.constants;
  nlohmann::json j;
  j["mode"] = to_string(r.mode);
  j["attack"] = r.attack;
  j["lower_bound"] = bound_json(r.lower);
  j["upper_bound"] = bound_json(r.upper);
  j["empirical_probability"] = r.empirical;
  j["empirical_samples"] = r.empirical_samples;
  j["lower_violated"] = r.lower_violated;
  j["upper_violated"] = r.upper_violated;
  j["constants"] = {
      {"eta_f", k.eta_f},       {"eta_g", k.eta_g},       {"xi_f", k.xi_f},
      {"xi_g", k.xi_g},         {"s_lower", k.s_lower},   {"s_upper", k.s_upper},
      {"beta", k.beta},         {"B", k.grad_bound},      {"c_f", k.c_f},
      {"c_g", k.c_g},           {"loss_min", k.loss_min}, {"epsilon", k.epsilon},
      {"alpha", k.alpha},
  };
  j["samples"] = {
      {"risk", k.risk_samples},
      {"similarity_pairs", k.similarity_pairs},
      {"similarity_degenerate", k.similarity_degenerate},
      {"beta_pairs", k.beta_pairs},
      {"gradients", k.gradient_samples},
      {"c", k.c_samples},
      {"c_degenerate", k.c_degenerate},
      {"loss_min", k.loss_min_samples},
  };
  j["notes"] = r.mode == Mode::untargeted
                   ? "c_f takes the min and c_g the max over the data, as printed for the untargeted bound; "
                     "the targeted bound uses the opposite roles"
                   : "c_f takes the max and c_g the min over the data, as printed for the targeted bound";
  return j.dump(indent);
}

void DiscreteScenario::validate() const {
  const std::size_t n = mass.size();
  if (n == 0) throw std::invalid_argument("scenario: empty domain");
  if (truth.size() != n || f.size() != n || g.size() != n || attack.size() != n) {
    throw std::invalid_argument("scenario: every map must cover the domain");
  }
  double total = 0.0;
  for (double m : mass) {
    if (!(m >= 0.0)) throw std::invalid_argument("scenario: negative mass");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("scenario: masses do not sum to 1");
  for (auto a : attack) {
    if (a >= n) throw std::invalid_argument("scenario: attack maps outside the domain");
  }
  if (!(eps_risk >= 0.0)) throw std::invalid_argument("scenario: eps_risk must be >= 0");
}

TvReport tv_bound_check(const DiscreteScenario& s, double slack) {
  s.validate();
  const std::size_t n = s.size();
  TvReport rep;
  std::vector<double> pushed(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    pushed[s.attack[i]] += s.mass[i];
    if (s.f[i] != s.truth[i]) rep.risk_f += s.mass[i];
    if (s.g[i] != s.truth[i]) rep.risk_g += s.mass[i];
    const std::size_t a = s.attack[i];
    if (s.f[a] != s.g[a]) rep.disagreement += s.mass[i];
    if (s.f[i] == s.f[a]) rep.f_unchanged += s.mass[i];
    if (s.g[i] == s.g[a]) rep.g_unchanged += s.mass[i];
  }
  double l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) l1 += std::abs(s.mass[i] - pushed[i]);
  rep.rho = l1 / 2.0;

  if (rep.risk_f > s.eps_risk || rep.risk_g > s.eps_risk) {
    throw std::invalid_argument("scenario: classifier risk exceeds eps_risk");
  }
  const double rho = s.rho.value_or(rep.rho);
  const double delta = s.delta_eff.value_or(rep.f_unchanged);
  if (rho < rep.rho) throw std::invalid_argument("scenario: attack is not rho-conservative for the declared rho");
  if (delta < rep.f_unchanged) throw std::invalid_argument("scenario: attack is not delta-effective against F");

  rep.lemma_bound = 2.0 * s.eps_risk + rho;
  rep.theorem_bound = delta + 4.0 * s.eps_risk + rho;
  rep.lemma_holds = rep.disagreement <= rep.lemma_bound + slack;
  rep.theorem_holds = rep.g_unchanged <= rep.theorem_bound + slack;
  return rep;
}

DiscreteScenario random_scenario(std::mt19937_64& rng, std::size_t points, std::size_t classes) {
  if (points == 0 || points > 1024) throw std::invalid_argument("random_scenario: need 1..1024 points");
  if (classes < 2) throw std::invalid_argument("random_scenario: need at least 2 classes");
  constexpr int kUnits = 1024;
  // Random composition of kUnits into `points` positive parts.
  std::vector<int> cuts(kUnits - 1);
  std::iota(cuts.begin(), cuts.end(), 1);
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(points - 1);
  cuts.push_back(0);
  cuts.push_back(kUnits);
  std::sort(cuts.begin(), cuts.end());

  DiscreteScenario s;
  std::uniform_int_distribution<std::size_t> label(0, classes - 1), point(0, points - 1);
  std::bernoulli_distribution flip(0.2), fixed(0.3);
  for (std::size_t i = 0; i < points; ++i) {
    s.mass.push_back(static_cast<double>(cuts[i + 1] - cuts[i]) / kUnits);
    s.truth.push_back(label(rng));
  }
  auto noisy = [&] {
    std::vector<std::size_t> out = s.truth;
    for (auto& v : out) {
      if (flip(rng)) v = (v + 1 + label(rng) % (classes - 1)) % classes;
    }
    return out;
  };
  s.f = noisy();
  s.g = noisy();
  for (std::size_t i = 0; i < points; ++i) s.attack.push_back(fixed(rng) ? i : point(rng));
  double rf = 0.0, rg = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    if (s.f[i] != s.truth[i]) rf += s.mass[i];
    if (s.g[i] != s.truth[i]) rg += s.mass[i];
  }
  s.eps_risk = std::max(rf, rg);
  return s;
}

}  // namespace trs::bounds
