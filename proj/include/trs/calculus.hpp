#pragma once

// Differentiable scalar functions of (parameters, input) and the derivative
// queries built on top of the autodiff core.

#include <functional>
#include <span>
#include <vector>

#include "trs/autodiff.hpp"

namespace trs::ad {

/// f(params, x) -> scalar. Must be deterministic.
using ScalarFunction = std::function<Var(std::span<const Var> params, const Var& x)>;

/// Selects the argument to differentiate: the input or one parameter.
struct Argument {
  static Argument input() { return Argument{-1}; }
  static Argument param(std::size_t i) { return Argument{static_cast<int>(i)}; }
  bool is_input() const { return index < 0; }
  int index = -1;
};

/// Exact reverse-mode gradient of f at (params, x) with respect to `wrt`.
Tensor gradient(const ScalarFunction& f, std::span<const Tensor> params, const Tensor& x, Argument wrt);

enum class GradFunctional { l2_norm, dot_with_constant };

struct ParamGradients {
  std::vector<Tensor> grads;
  /// Set when ||grad_x f|| < kDegenerateNorm under the l2-norm functional;
  /// the returned gradients are then zero.
  bool degenerate = false;
};

/// d/dparams of functional(grad_x f(params, x)). For `dot_with_constant` the
/// functional is <grad_x f, constant>.
ParamGradients grad_of_grad_functional(const ScalarFunction& f, std::span<const Tensor> params, const Tensor& x,
                                       GradFunctional functional, const Tensor& constant = Tensor());

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every component.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& at, double step);

}  // namespace trs::ad
