#include "trs/calculus.hpp"

#include <stdexcept>

namespace trs::ad {

namespace {

std::vector<Var> leaves(std::span<const Tensor> params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p, true);
  return out;
}

Var checked_scalar(const Var& v) {
  if (v.value().size() != 1) throw std::invalid_argument("function must evaluate to a scalar");
  return v;
}

}  // namespace

Tensor gradient(const ScalarFunction& f, std::span<const Tensor> params, const Tensor& x, Argument wrt) {
  if (!wrt.is_input() && static_cast<std::size_t>(wrt.index) >= params.size()) {
    throw std::out_of_range("gradient: parameter index out of range");
  }
  const auto p = leaves(params);
  const Var xv(x, true);
  const Var out = checked_scalar(f(p, xv));
  const Var& target = wrt.is_input() ? xv : p[static_cast<std::size_t>(wrt.index)];
  return grad(out, target).value();
}

ParamGradients grad_of_grad_functional(const ScalarFunction& f, std::span<const Tensor> params, const Tensor& x,
                                       GradFunctional functional, const Tensor& constant) {
  const auto p = leaves(params);
  const Var xv(x, true);
  const Var out = checked_scalar(f(p, xv));
  const Var gx = grad(out, xv, true);

  ParamGradients result;
  Var objective;
  if (functional == GradFunctional::l2_norm) {
    if (l2_norm(gx.value()) < kDegenerateNorm) {
      result.degenerate = true;
      for (const auto& t : params) result.grads.push_back(Tensor::zeros(t.shape()));
      return result;
    }
    objective = row_norm(reshape(gx, {1, gx.value().size()}));
  } else {
    if (constant.shape() != x.shape()) throw std::invalid_argument("grad_of_grad_functional: constant shape mismatch");
    objective = sum(mul(gx, Var(constant)));
  }
  for (const Var& g : grad(objective, p)) result.grads.push_back(g.value());
  return result;
}

Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& at, double step) {
  if (!(step > 0)) throw std::invalid_argument("fd_gradient: step must be positive");
  std::vector<double> base(at.data().begin(), at.data().end());
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double fp = f(Tensor(at.shape(), std::move(plus)));
    const double fm = f(Tensor(at.shape(), std::move(minus)));
    out[i] = (fp - fm) / (2.0 * step);
  }
  return Tensor(at.shape(), std::move(out));
}

}  // namespace trs::ad
