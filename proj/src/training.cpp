#include "trs/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "trs/attacks.hpp"
#include "trs/format.hpp"

namespace trs::training {

using ad::Var;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::vanilla: return "vanilla";
    case Mode::trs: return "trs";
    case Mode::cos_only: return "cos-only";
    case Mode::cos_l2: return "cos-l2";
    case Mode::gal: return "gal";
    case Mode::adv_t: return "advt";
    case Mode::trs_adv_t: return "trs+advt";
  }
  return "?";
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::vanilla, Mode::trs, Mode::cos_only, Mode::cos_l2, Mode::gal, Mode::adv_t, Mode::trs_adv_t})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown training mode '" + name + "'");
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("TrainConfig: " + what); };
  if (!(lambda_a >= 0.0) || !(lambda_b >= 0.0)) fail("lambda_a and lambda_b must be >= 0");
  if (!(delta_0 >= 0.0) || !(delta_0 <= delta_M)) fail("need 0 <= delta_0 <= delta_M");
  if (epochs < 1) fail("epochs must be >= 1");
  if (inner_steps < 1) fail("inner_steps must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    fail("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  for (double f : lr_milestones)
    if (!(f > 0.0 && f < 1.0)) fail("lr milestones are fractions in (0, 1)");
  if (!(lr_decay > 0.0)) fail("lr_decay must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(adv_epsilon >= 0.0)) fail("adv_epsilon must be >= 0");
  if (adv_steps < 1) fail("adv_steps must be >= 1");
  if (!(gal_weight >= 0.0)) fail("gal_weight must be >= 0");
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  double lr = learning_rate;
  for (double f : lr_milestones)
    if (static_cast<double>(epoch) > std::floor(f * static_cast<double>(epochs))) lr *= lr_decay;
  return lr;
}

double warmup_delta(std::size_t m, const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("warmup_delta: M must be >= 1");
  if (m > cfg.epochs) throw std::invalid_argument("warmup_delta: epoch beyond M");
  // lerp keeps both endpoints exact, which a + (b - a) * t does not for every M.
  return std::lerp(cfg.delta_0, cfg.delta_M, static_cast<double>(m) / static_cast<double>(cfg.epochs));
}

LossFn model_loss(const models::MlpClassifier& model, std::vector<Var> params) {
  return [&model, params = std::move(params)](const Var& x, std::span<const std::size_t> labels) {
    return models::cross_entropy(model.log_confidences(params, x), labels);
  };
}

LossFn model_loss(const models::MlpClassifier& model) {
  std::vector<Var> params;
  for (const auto& p : model.parameters()) params.emplace_back(p);
  return model_loss(model, std::move(params));
}

Var loss_input_gradient(const LossFn& f, const Tensor& x, std::span<const std::size_t> labels, bool create_graph) {
  const Var xv(x, true);
  return ad::grad(ad::sum(f(xv, labels)), xv, create_graph);
}

namespace {

std::size_t count_either(const Tensor& a, const Tensor& b) {
  const auto da = ad::degenerate_rows(a), db = ad::degenerate_rows(b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < da.size(); ++i) n += da[i] || db[i];
  return n;
}

// Per-item ||grad l_F(p)|| + ||grad l_G(p)||, [B, 1].
Var grad_norm_sum(const LossFn& f, const LossFn& g, const Var& p, std::span<const std::size_t> labels) {
  const Var gf = ad::grad(ad::sum(f(p, labels)), p, true);
  const Var gg = ad::grad(ad::sum(g(p, labels)), p, true);
  return ad::row_norm(gf) + ad::row_norm(gg);
}

Tensor clip_ball(const Tensor& cand, const Tensor& x, double radius, const std::optional<data::Box>& box) {
  Tensor p = attacks::project_linf(cand, x, radius);
  return box ? attacks::clip_to_box(p, *box) : p;
}

// Keeps, per row, the candidate with the larger value (ties keep `a`).
Tensor pick_rows(const Tensor& a, std::span<const double> va, const Tensor& b, std::span<const double> vb) {
  const std::size_t cols = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t r = 0; r < a.rows(); ++r)
    if (vb[r] > va[r]) std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(r * cols), cols, out.begin() + r * cols);
  return Tensor(a.shape(), std::move(out));
}

std::vector<double> column(const Var& v) { return {v.value().data().begin(), v.value().data().end()}; }

struct SmoothSearch {
  Tensor x_hat;
  std::vector<double> at_x, at_end;
};

SmoothSearch search_smooth(const LossFn& f, const LossFn& g, const Tensor& x, std::span<const std::size_t> labels,
                           double delta, std::size_t steps, const std::optional<data::Box>& box) {
  SmoothSearch s;
  s.at_x = column(grad_norm_sum(f, g, Var(x, true), labels));
  if (delta == 0.0) {
    s.x_hat = x;
    s.at_end = s.at_x;
    return s;
  }
  Tensor p = x;
  for (std::size_t k = 0; k < steps; ++k) {
    const Var pv(p, true);
    const Var obj = grad_norm_sum(f, g, pv, labels);
    const Tensor dir = attacks::step_direction(ad::grad(ad::sum(obj), pv).value(), attacks::Norm::linf);
    p = clip_ball(p + (delta / 4.0) * dir, x, delta, box);
  }
  s.at_end = column(grad_norm_sum(f, g, Var(p, true), labels));
  s.x_hat = pick_rows(x, s.at_x, p, s.at_end);
  return s;
}

Tensor search_adversarial(const LossFn& f, const Tensor& x, std::span<const std::size_t> labels, double eps,
                          std::size_t steps, const std::optional<data::Box>& box) {
  if (eps == 0.0) return x;
  Tensor p = x;
  for (std::size_t k = 0; k < steps; ++k) {
    const Var pv(p, true);
    const Tensor dir = attacks::step_direction(ad::grad(ad::sum(f(pv, labels)), pv).value(), attacks::Norm::linf);
    p = clip_ball(p + (eps / 4.0) * dir, x, eps, box);
  }
  const auto at_x = column(f(Var(x), labels));
  const auto at_p = column(f(Var(p), labels));
  return pick_rows(x, at_x, p, at_p);
}

Var smooth_value(const LossFn& f, const LossFn& g, const Tensor& x_hat, std::span<const std::size_t> labels) {
  return ad::mean(grad_norm_sum(f, g, Var(x_hat, true), labels));
}

Var pair_similarity(const Var& gf, const Var& gg) { return ad::mean(ad::abs(ad::row_cosine(gf, gg))); }

}  // namespace

RegValue similarity_loss(const LossFn& f, const LossFn& g, const Tensor& x, std::span<const std::size_t> labels) {
  const Var gf = loss_input_gradient(f, x, labels);
  const Var gg = loss_input_gradient(g, x, labels);
  return {pair_similarity(gf, gg), count_either(gf.value(), gg.value())};
}

SmoothValue smoothness_loss(const LossFn& f, const LossFn& g, const Tensor& x, std::span<const std::size_t> labels,
                            double delta, std::size_t inner_steps, const std::optional<data::Box>& box) {
  if (!(delta >= 0.0)) throw std::invalid_argument("smoothness_loss: delta must be >= 0");
  SmoothSearch s = search_smooth(f, g, x, labels, delta, inner_steps, box);
  return {smooth_value(f, g, s.x_hat, labels), std::move(s.x_hat), std::move(s.at_x), std::move(s.at_end)};
}

RegValue trs_regularizer(const LossFn& f, const LossFn& g, const Tensor& x, std::span<const std::size_t> labels,
                         double delta, const TrainConfig& cfg) {
  RegValue sim = similarity_loss(f, g, x, labels);
  const SmoothValue smooth = smoothness_loss(f, g, x, labels, delta, cfg.inner_steps, cfg.box);
  return {cfg.lambda_a * sim.value + cfg.lambda_b * smooth.value, sim.degenerate};
}

RegValue gal_loss(std::span<const LossFn> losses, const Tensor& x, std::span<const std::size_t> labels) {
  if (losses.size() < 2) throw std::invalid_argument("gal_loss: needs at least two models");
  std::vector<Var> grads;
  for (const auto& f : losses) grads.push_back(loss_input_gradient(f, x, labels));
  RegValue out;
  std::vector<bool> bad(x.rows(), false);
  Var total;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto d = ad::degenerate_rows(grads[i].value());
    for (std::size_t r = 0; r < bad.size(); ++r) bad[r] = bad[r] || d[r];
    for (std::size_t j = i + 1; j < grads.size(); ++j) {
      const Var term = ad::exp(ad::row_cosine(grads[i], grads[j]));
      total = total.defined() ? total + term : term;
    }
  }
  out.degenerate = static_cast<std::size_t>(std::count(bad.begin(), bad.end(), true));
  out.value = ad::mean(ad::log(total));
  return out;
}

Var adv_training_loss(const LossFn& f, const Tensor& x, std::span<const std::size_t> labels, double adv_epsilon,
                      std::size_t steps, const std::optional<data::Box>& box) {
  if (!(adv_epsilon >= 0.0)) throw std::invalid_argument("adv_training_loss: adv_epsilon must be >= 0");
  return ad::mean(f(Var(search_adversarial(f, x, labels, adv_epsilon, steps, box)), labels));
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(models::Ensemble ensemble, TrainConfig cfg) : ensemble_(std::move(ensemble)), cfg_(std::move(cfg)) {
  cfg_.validate();
  for (const auto& m : ensemble_.members()) {
    std::vector<Tensor> zeros;
    for (const auto& p : m.parameters()) zeros.push_back(Tensor::zeros(p.shape()));
    m1_.push_back(zeros);
    m2_.push_back(zeros);
  }
}

Trainer::BatchLoss Trainer::batch_loss(std::span<const std::vector<Var>> params, const Tensor& x,
                                       std::span<const std::size_t> labels, double delta,
                                       const std::vector<Tensor>* frozen) const {
  const std::size_t n = ensemble_.size();
  if (params.size() != n) throw std::invalid_argument("batch_loss: one parameter set per member required");
  std::vector<LossFn> live, fixed;
  for (std::size_t i = 0; i < n; ++i) {
    live.push_back(model_loss(ensemble_.member(i), params[i]));
    fixed.push_back(model_loss(ensemble_.member(i)));
  }
  BatchLoss out;
  std::size_t next_frozen = 0;
  auto next_point = [&](auto&& search) -> Tensor {
    Tensor p = frozen ? frozen->at(next_frozen++) : search();
    out.search_points.push_back(p);
    return p;
  };

  // Cross-entropy part.
  Var ce;
  const bool adversarial = cfg_.mode == Mode::adv_t || cfg_.mode == Mode::trs_adv_t;
  if (cfg_.mode != Mode::adv_t) {
    for (const auto& f : live) {
      const Var term = ad::mean(f(Var(x), labels));
      ce = ce.defined() ? ce + term : term;
    }
    ce = (1.0 / static_cast<double>(n)) * ce;
  }
  if (adversarial) {
    const models::Ensemble* ens = &ensemble_;
    const LossFn ens_live = [ens, params](const Var& v, std::span<const std::size_t> y) {
      return models::cross_entropy(ens->log_confidences(params, v), y);
    };
    const LossFn ens_fixed = [ens](const Var& v, std::span<const std::size_t> y) {
      return models::cross_entropy(ens->log_confidences(v), y);
    };
    const Tensor x_adv = next_point(
        [&] { return search_adversarial(ens_fixed, x, labels, cfg_.adv_epsilon, cfg_.adv_steps, cfg_.box); });
    const Var adv = ad::mean(ens_live(Var(x_adv), labels));
    ce = ce.defined() ? ce + adv : adv;
  }
  out.ce = ce.value().item();

  // Regularizer.
  Var reg;
  auto accumulate = [&](const Var& term) { reg = reg.defined() ? reg + term : term; };
  const bool pairwise = cfg_.mode == Mode::trs || cfg_.mode == Mode::trs_adv_t || cfg_.mode == Mode::cos_only ||
                        cfg_.mode == Mode::cos_l2;
  if (pairwise && n >= 2) {
    std::vector<Var> grads;
    for (const auto& f : live) grads.push_back(loss_input_gradient(f, x, labels));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        out.degenerate += count_either(grads[i].value(), grads[j].value());
        Var term = cfg_.lambda_a * pair_similarity(grads[i], grads[j]);
        if (cfg_.mode == Mode::cos_l2) {
          term = term + cfg_.lambda_b * ad::mean(ad::row_norm(grads[i]) + ad::row_norm(grads[j]));
        } else if (cfg_.mode != Mode::cos_only) {
          const Tensor x_hat = next_point([&] {
            return search_smooth(fixed[i], fixed[j], x, labels, delta, cfg_.inner_steps, cfg_.box).x_hat;
          });
          term = term + cfg_.lambda_b * smooth_value(live[i], live[j], x_hat, labels);
        }
        accumulate(term);
      }
    }
    reg = (1.0 / static_cast<double>(n * (n - 1) / 2)) * reg;
  } else if (cfg_.mode == Mode::gal && n >= 2) {
    RegValue gal = gal_loss(live, x, labels);
    out.degenerate += gal.degenerate;
    accumulate(cfg_.gal_weight * gal.value);
  }
  if (reg.defined()) {
    out.reg = reg.value().item();
    out.total = ce + reg;
  } else {
    out.total = ce;
  }
  return out;
}

EpochMetrics Trainer::train_epoch(const data::Dataset& train, std::size_t m) {
  if (train.empty()) throw std::invalid_argument("train_epoch: empty dataset");
  if (m < 1) throw std::invalid_argument("train_epoch: epochs are numbered from 1");
  const double delta = warmup_delta(m, cfg_);
  const double lr = cfg_.learning_rate_at(m);
  const auto batches =
      data::batch_indices(train.size(), cfg_.batch_size, true, cfg_.seed ^ (0x9E3779B97F4A7C15ULL * m));

  EpochMetrics metrics;
  metrics.epoch = m;
  metrics.delta = delta;
  double weight_total = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& idx = batches[b];
    const Tensor x = select_rows(train.inputs, idx);
    std::vector<std::size_t> labels;
    for (auto i : idx) labels.push_back(train.labels[i]);
    try {
      const DiversityStats div = diversity(ensemble_, x, labels);

      std::vector<std::vector<Var>> params;
      std::vector<Var> flat;
      for (const auto& member : ensemble_.members()) {
        params.emplace_back();
        for (const auto& p : member.parameters()) {
          params.back().emplace_back(p, true);
          flat.push_back(params.back().back());
        }
      }
      const BatchLoss loss = batch_loss(params, x, labels, delta);
      const auto grads = ad::grad(loss.total, flat);

      ++steps_;
      const double t = static_cast<double>(steps_);
      std::vector<models::MlpClassifier> updated;
      std::size_t k = 0;
      for (std::size_t i = 0; i < ensemble_.size(); ++i) {
        const auto& member = ensemble_.member(i);
        std::vector<Tensor> next;
        for (std::size_t j = 0; j < member.parameters().size(); ++j, ++k) {
          const Tensor& p = member.parameters()[j];
          const Tensor& g = grads[k].value();
          if (cfg_.optimizer == OptimizerKind::sgd) {
            next.push_back(p - lr * g);
            continue;
          }
          std::vector<double> m1(g.size()), m2(g.size()), out(g.size());
          const double c1 = 1.0 - std::pow(cfg_.adam_beta1, t), c2 = 1.0 - std::pow(cfg_.adam_beta2, t);
          for (std::size_t e = 0; e < g.size(); ++e) {
            m1[e] = cfg_.adam_beta1 * m1_[i][j][e] + (1.0 - cfg_.adam_beta1) * g[e];
            m2[e] = cfg_.adam_beta2 * m2_[i][j][e] + (1.0 - cfg_.adam_beta2) * g[e] * g[e];
            out[e] = p[e] - lr * (m1[e] / c1) / (std::sqrt(m2[e] / c2) + cfg_.adam_eps);
          }
          m1_[i][j] = Tensor(g.shape(), std::move(m1));
          m2_[i][j] = Tensor(g.shape(), std::move(m2));
          next.push_back(Tensor(p.shape(), std::move(out)));
        }
        updated.push_back(member.with_parameters(std::move(next)));
      }
      ensemble_ = models::Ensemble(std::move(updated));

      const double w = static_cast<double>(idx.size());
      weight_total += w;
      metrics.mean_ce += w * loss.ce;
      metrics.mean_reg += w * loss.reg;
      metrics.mean_abs_cos += w * div.mean_abs_cos;
      metrics.mean_grad_norm += w * div.mean_grad_norm;
      metrics.degenerate += loss.degenerate;
    } catch (const NumericError& e) {
      throw NumericError("train_epoch: non-finite value in epoch " + std::to_string(m) + ", batch " +
                         std::to_string(b) + " (mode " + to_string(cfg_.mode) + ", delta " + format_double(delta) +
                         "): " + e.what());
    }
  }
  metrics.mean_ce /= weight_total;
  metrics.mean_reg /= weight_total;
  metrics.mean_abs_cos /= weight_total;
  metrics.mean_grad_norm /= weight_total;
  metrics.clean_acc = models::accuracy(ensemble_, train.inputs, train.labels);
  return metrics;
}

std::vector<EpochMetrics> Trainer::fit(const data::Dataset& train) {
  std::vector<EpochMetrics> out;
  for (std::size_t m = 1; m <= cfg_.epochs; ++m) out.push_back(train_epoch(train, m));
  return out;
}

DiversityStats diversity(const models::Ensemble& ensemble, const Tensor& x, std::span<const std::size_t> labels) {
  DiversityStats s;
  std::vector<models::InputGradients> grads;
  for (const auto& m : ensemble.members()) grads.push_back(models::input_gradient(m, x, labels));
  const std::size_t rows = x.rows(), cols = x.cols();
  double norm_total = 0.0;
  for (const auto& g : grads)
    for (std::size_t r = 0; r < rows; ++r) norm_total += l2_norm(g.grads.row_at(r));
  s.mean_grad_norm = norm_total / static_cast<double>(rows * grads.size());

  double cos_total = 0.0;
  std::size_t cos_count = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (std::size_t j = i + 1; j < grads.size(); ++j) {
      for (std::size_t r = 0; r < rows; ++r) {
        if (grads[i].degenerate[r] || grads[j].degenerate[r]) {
          ++s.degenerate;
          continue;
        }
        double d = 0.0, a = 0.0, b = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double u = grads[i].grads.at(r, c), v = grads[j].grads.at(r, c);
          d += u * v;
          a += u * u;
          b += v * v;
        }
        cos_total += std::abs(d / (std::sqrt(a) * std::sqrt(b)));
        ++cos_count;
      }
    }
  }
  s.mean_abs_cos = cos_count ? cos_total / static_cast<double>(cos_count) : 0.0;
  return s;
}

void write_metrics_csv(std::ostream& out, std::span<const EpochMetrics> rows) {
  out << "epoch,delta,mean_ce,mean_reg,mean_abs_cos,mean_grad_norm,clean_acc\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << format_double(r.delta) << ',' << format_double(r.mean_ce) << ','
        << format_double(r.mean_reg) << ',' << format_double(r.mean_abs_cos) << ',' << format_double(r.mean_grad_norm)
        << ',' << format_double(r.clean_acc) << '\n';
}

}  // namespace trs::training
