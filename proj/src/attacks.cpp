#include "trs/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace trs::attacks {

using ad::Var;

std::string to_string(Method m) {
  switch (m) {
    case Method::fgsm: return "fgsm";
    case Method::bim: return "bim";
    case Method::pgd: return "pgd";
    case Method::mim: return "mim";
    case Method::cw: return "cw";
    case Method::ead: return "ead";
  }
  return "?";
}

std::string to_string(Norm n) { return n == Norm::l2 ? "l2" : "linf"; }
std::string to_string(AttackLoss l) { return l == AttackLoss::cross_entropy ? "ce" : "margin"; }

Method parse_method(const std::string& name) {
  for (Method m : {Method::fgsm, Method::bim, Method::pgd, Method::mim, Method::cw, Method::ead})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown attack method '" + name + "'");
}

Norm parse_norm(const std::string& name) {
  if (name == "l2") return Norm::l2;
  if (name == "linf") return Norm::linf;
  throw std::invalid_argument("unknown norm '" + name + "'");
}

AttackLoss parse_attack_loss(const std::string& name) {
  if (name == "ce") return AttackLoss::cross_entropy;
  if (name == "margin" || name == "cw") return AttackLoss::margin;
  throw std::invalid_argument("unknown attack loss '" + name + "'");
}

AttackSpec AttackSpec::defaults(Method method, double epsilon) {
  AttackSpec s;
  s.method = method;
  s.epsilon = epsilon;
  if (method == Method::fgsm) s.steps = 1;
  if (method == Method::cw || method == Method::ead) s.steps = 1000;
  return s;
}

AttackSpec AttackSpec::carlini_wagner(double c, bool elastic_net) {
  AttackSpec s = defaults(elastic_net ? Method::ead : Method::cw, std::numeric_limits<double>::infinity());
  s.norm = Norm::l2;
  s.c = c;
  return s;
}

double AttackSpec::effective_step() const { return step_size.value_or(epsilon / 5.0); }

void AttackSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("AttackSpec: " + what); };
  if (!(epsilon >= 0.0)) fail("epsilon must be >= 0");
  if (steps < 1) fail("steps must be >= 1");
  if (restarts < 1) fail("restarts must be >= 1");
  if (!(momentum >= 0.0 && momentum <= 1.0)) fail("momentum must lie in [0, 1]");
  if (!(l1_weight >= 0.0)) fail("l1_weight must be >= 0");
  if (!(c >= 0.0) || !std::isfinite(c)) fail("c must be finite and >= 0");
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) fail("kappa must be finite and >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  const bool sign_family = method != Method::cw && method != Method::ead;
  if (sign_family && !constrained()) fail(to_string(method) + " needs a finite epsilon");
  if (sign_family && !(effective_step() >= 0.0 && std::isfinite(effective_step()))) fail("step_size must be >= 0");
  if (box && box->lo.size() != box->hi.size()) fail("box bounds differ in length");
}

std::string AttackSpec::label() const {
  std::ostringstream out;
  out << to_string(method) << '-' << to_string(norm);
  if (method == Method::cw || method == Method::ead)
    out << "-c" << c;
  else
    out << "-eps" << epsilon;
  if (method == Method::bim || method == Method::pgd || method == Method::mim) out << "-steps" << steps;
  if (loss == AttackLoss::margin && method != Method::cw && method != Method::ead) out << "-margin";
  if (targeted) out << "-target" << target;
  return out.str();
}

// ---------------------------------------------------------------------------
// Geometry

Tensor project_linf(const Tensor& candidate, const Tensor& center, double radius) {
  std::vector<double> out(candidate.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp(candidate[i], center[i] - radius, center[i] + radius);
  return Tensor(candidate.shape(), std::move(out));
}

Tensor project_l2(const Tensor& candidate, const Tensor& center, double radius) {
  const std::size_t rows = candidate.rows(), cols = candidate.cols();
  std::vector<double> out(candidate.data().begin(), candidate.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = candidate.at(r, c) - center.at(r, c);
      sq += d * d;
    }
    const double norm = std::sqrt(sq);
    if (norm <= radius) continue;
    const double k = radius / norm;
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = center.at(r, c) + k * (candidate.at(r, c) - center.at(r, c));
  }
  return Tensor(candidate.shape(), std::move(out));
}

Tensor clip_to_box(const Tensor& x, const data::Box& box) {
  const std::size_t cols = x.cols();
  if (box.lo.size() != cols) throw std::invalid_argument("clip_to_box: box dimension mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], box.lo[i % cols], box.hi[i % cols]);
  return Tensor(x.shape(), std::move(out));
}

Tensor step_direction(const Tensor& grad, Norm norm) {
  const std::size_t rows = grad.rows(), cols = grad.cols();
  std::vector<double> out(grad.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += grad.at(r, c) * grad.at(r, c);
    const double n = std::sqrt(sq);
    if (n < ad::kDegenerateNorm) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const double g = grad.at(r, c);
      out[r * cols + c] = norm == Norm::linf ? (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0)) : g / n;
    }
  }
  return Tensor(grad.shape(), std::move(out));
}

namespace {

Tensor project(const Tensor& candidate, const Tensor& center, const AttackSpec& spec) {
  Tensor p = candidate;
  if (spec.constrained())
    p = spec.norm == Norm::linf ? project_linf(candidate, center, spec.epsilon)
                                : project_l2(candidate, center, spec.epsilon);
  if (spec.box) p = clip_to_box(p, *spec.box);
  return p;
}

std::vector<std::size_t> goal_labels(std::span<const std::size_t> labels, const AttackSpec& spec) {
  if (!spec.targeted) return {labels.begin(), labels.end()};
  return std::vector<std::size_t>(labels.size(), spec.target);
}

// Largest score among classes other than `skip`, per row.
std::vector<std::size_t> runner_up(const Tensor& scores, std::span<const std::size_t> skip) {
  std::vector<std::size_t> out(scores.rows());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    std::size_t best = skip[r] == 0 ? 1 : 0;
    for (std::size_t c = 0; c < scores.cols(); ++c)
      if (c != skip[r] && scores.at(r, c) > scores.at(r, best)) best = c;
    out[r] = best;
  }
  return out;
}

// Margin f of the CW objective, [B, 1]: max(Z_y - max_{i!=y} Z_i, -kappa)
// untargeted, max(max_{i!=t} Z_i - Z_t, -kappa) targeted.
Var margin_term(const Var& scores, std::span<const std::size_t> goal, const AttackSpec& spec) {
  const auto other = runner_up(scores.value(), goal);
  Var m = ad::pick(scores, goal) - ad::pick(scores, other);
  if (spec.targeted) m = -m;
  return ad::clamp_min(m, -spec.kappa);
}

std::vector<bool> successes(const models::Classifier& model, const Tensor& adv, std::span<const std::size_t> labels,
                            const AttackSpec& spec) {
  const auto pred = models::predict_labels(model, adv);
  std::vector<bool> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = spec.targeted ? pred[i] == spec.target : pred[i] != labels[i];
  return out;
}

Tensor uniform_start(const Tensor& x, const AttackSpec& spec, std::mt19937_64& rng) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (spec.norm == Norm::linf) {
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += spec.epsilon * (2.0 * unit(rng) - 1.0);
    } else {
      std::vector<double> dir(cols);
      double sq = 0.0;
      for (auto& v : dir) {
        v = gauss(rng);
        sq += v * v;
      }
      const double radius = spec.epsilon * std::pow(unit(rng), 1.0 / static_cast<double>(cols));
      const double k = sq > 0.0 ? radius / std::sqrt(sq) : 0.0;
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += k * dir[c];
    }
  }
  return Tensor(x.shape(), std::move(out));
}

struct SignRun {
  Tensor adv;
  std::size_t degenerate = 0;
};

// BIM / PGD / MIM iterations (FGSM is one BIM step of size epsilon).
SignRun iterate(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                const AttackSpec& spec, Tensor current, std::size_t steps, double step) {
  const std::size_t rows = x.rows(), cols = x.cols();
  SignRun run{std::move(current), 0};
  std::vector<double> velocity(x.size(), 0.0);
  for (std::size_t s = 0; s < steps; ++s) {
    const Objective obj = attack_objective(model, run.adv, labels, spec);
    const auto degenerate = ad::degenerate_rows(obj.grads);
    for (bool d : degenerate) run.degenerate += d;
    Tensor direction;
    if (spec.method == Method::mim) {
      for (std::size_t r = 0; r < rows; ++r) {
        double l1 = 0.0;
        for (std::size_t c = 0; c < cols; ++c) l1 += std::abs(obj.grads.at(r, c));
        for (std::size_t c = 0; c < cols; ++c) {
          double& v = velocity[r * cols + c];
          v = spec.momentum * v + (degenerate[r] ? 0.0 : obj.grads.at(r, c) / l1);
        }
      }
      direction = step_direction(Tensor(x.shape(), velocity), spec.norm);
    } else {
      direction = step_direction(obj.grads, spec.norm);
    }
    run.adv = project(run.adv + step * direction, x, spec);
  }
  return run;
}

AdvBatch sign_family(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                     const AttackSpec& spec, const std::optional<Tensor>& start) {
  AdvBatch out{x, x, {labels.begin(), labels.end()}, spec, {}, 0};
  const Tensor origin = start ? project(*start, x, spec) : x;
  if (spec.method == Method::fgsm || spec.method == Method::bim || spec.method == Method::mim) {
    const std::size_t steps = spec.method == Method::fgsm ? 1 : spec.steps;
    const double step = spec.method == Method::fgsm ? spec.epsilon : spec.effective_step();
    SignRun run = iterate(model, x, labels, spec, origin, steps, step);
    out.adversarials = std::move(run.adv);
    out.degenerate_steps = run.degenerate;
    out.success = successes(model, out.adversarials, labels, spec);
    return out;
  }

  // PGD: keep, per item, the best (success first, then objective) result.
  std::mt19937_64 rng(spec.seed);
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> best(x.data().begin(), x.data().end());
  std::vector<double> best_value(rows, -std::numeric_limits<double>::infinity());
  std::vector<bool> best_success(rows, false);
  auto consider = [&](const Tensor& cand) {
    const auto value = attack_objective(model, cand, labels, spec).values;
    const auto ok = successes(model, cand, labels, spec);
    for (std::size_t r = 0; r < rows; ++r) {
      const bool better = ok[r] != best_success[r] ? ok[r] : value[r] > best_value[r];
      if (!better) continue;
      best_success[r] = ok[r];
      best_value[r] = value[r];
      std::copy_n(cand.data().begin() + static_cast<std::ptrdiff_t>(r * cols), cols, best.begin() + r * cols);
    }
  };
  if (start) consider(origin);
  for (std::size_t k = 0; k < spec.restarts; ++k) {
    const Tensor init = (k == 0 && start) ? origin : project(uniform_start(x, spec, rng), x, spec);
    SignRun run = iterate(model, x, labels, spec, init, spec.steps, spec.effective_step());
    out.degenerate_steps += run.degenerate;
    consider(run.adv);
  }
  out.adversarials = Tensor(x.shape(), std::move(best));
  out.success = std::move(best_success);
  return out;
}

// CW / EAD by plain gradient descent (EAD: proximal l1 step), keeping the
// least-distorted successful iterate per item.
AdvBatch carlini_wagner(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                        const AttackSpec& spec, const std::optional<Tensor>& start) {
  const bool elastic = spec.method == Method::ead;
  const std::size_t rows = x.rows(), cols = x.cols();
  const auto goal = goal_labels(labels, spec);
  const Var center(x);
  Tensor current = start ? project(*start, x, spec) : x;
  std::vector<double> best(x.data().begin(), x.data().end());
  std::vector<double> best_cost(rows, std::numeric_limits<double>::infinity());
  std::vector<bool> found(rows, false);

  auto distortion = [&](const Tensor& cand, std::size_t r) {
    double l2 = 0.0, l1 = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = cand.at(r, c) - x.at(r, c);
      l2 += d * d;
      l1 += std::abs(d);
    }
    return elastic ? l2 + spec.l1_weight * l1 : l2;
  };
  auto record = [&](const Tensor& cand) {
    const auto ok = successes(model, cand, labels, spec);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!ok[r]) continue;
      const double cost = distortion(cand, r);
      if (cost >= best_cost[r]) continue;
      found[r] = true;
      best_cost[r] = cost;
      std::copy_n(cand.data().begin() + static_cast<std::ptrdiff_t>(r * cols), cols, best.begin() + r * cols);
    }
  };

  record(current);
  for (std::size_t s = 0; s < spec.steps; ++s) {
    const Var xv(current, true);
    const Var f = margin_term(model.scores(xv), goal, spec);
    const Var objective = ad::sum(ad::square(xv - center)) + spec.c * ad::sum(f);
    const Tensor g = ad::grad(objective, xv).value();
    Tensor next = current - spec.learning_rate * g;
    if (elastic) {
      const double t = spec.learning_rate * spec.l1_weight;
      std::vector<double> shrunk(next.size());
      for (std::size_t i = 0; i < shrunk.size(); ++i) {
        const double d = next[i] - x[i];
        shrunk[i] = x[i] + std::copysign(std::max(std::abs(d) - t, 0.0), d);
      }
      next = Tensor(x.shape(), std::move(shrunk));
    }
    current = project(next, x, spec);
    record(current);
  }

  for (std::size_t r = 0; r < rows; ++r)
    if (!found[r]) std::copy_n(current.data().begin() + static_cast<std::ptrdiff_t>(r * cols), cols, best.begin() + r * cols);
  AdvBatch out{x, Tensor(x.shape(), std::move(best)), {labels.begin(), labels.end()}, spec, {}, 0};
  out.success = successes(model, out.adversarials, labels, spec);
  return out;
}

}  // namespace

Objective attack_objective(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                           const AttackSpec& spec) {
  const auto goal = goal_labels(labels, spec);
  const Var xv(x, true);
  Var per_item;
  if (spec.loss == AttackLoss::cross_entropy) {
    per_item = models::cross_entropy(model.log_confidences(xv), goal);
    if (spec.targeted) per_item = -per_item;
  } else {
    per_item = -margin_term(model.scores(xv), goal, spec);
  }
  Objective out;
  out.values.assign(per_item.value().data().begin(), per_item.value().data().end());
  out.grads = ad::grad(ad::sum(per_item), xv).value();
  return out;
}

AdvBatch run_attack(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackSpec& spec, const std::optional<Tensor>& start) {
  spec.validate();
  if (x.rank() != 2 || x.cols() != model.input_dim())
    throw std::invalid_argument("run_attack: input shape " + shape_string(x.shape()) + " does not match model");
  models::check_labels(labels, model.num_classes(), x.rows());
  if (spec.targeted && spec.target >= model.num_classes())
    throw std::invalid_argument("run_attack: target class out of range");
  if (start && start->shape() != x.shape()) throw std::invalid_argument("run_attack: start shape mismatch");
  if (spec.box && spec.box->lo.size() != x.cols()) throw std::invalid_argument("run_attack: box dimension mismatch");
  if (x.rows() == 0) return AdvBatch{x, x, {}, spec, {}, 0};
  if (spec.method == Method::cw || spec.method == Method::ead) return carlini_wagner(model, x, labels, spec, start);
  return sign_family(model, x, labels, spec, start);
}

std::vector<bool> success_against(const models::Classifier& model, const AdvBatch& batch) {
  return successes(model, batch.adversarials, batch.labels, batch.spec);
}

Effectiveness effectiveness(const models::Classifier& model, const AdvBatch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("effectiveness: empty batch");
  const auto ok = success_against(model, batch);
  const auto hits = static_cast<double>(std::count(ok.begin(), ok.end(), true));
  Effectiveness e;
  e.count = batch.size();
  e.alpha = (static_cast<double>(e.count) - hits) / static_cast<double>(e.count);
  e.success_rate = 1.0 - e.alpha;
  return e;
}

}  // namespace trs::attacks
