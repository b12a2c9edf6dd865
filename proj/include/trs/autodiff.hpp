#pragma once

// Reverse-mode differentiation over rank-2 tensors. Backward rules are built
// from the same differentiable ops, so a gradient computed with
// `create_graph = true` can itself be differentiated (double backprop).

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "trs/tensor.hpp"

namespace trs::ad {

namespace detail {
struct Node;
}

class Var {
 public:
  Var();
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  bool defined() const { return node_ != nullptr; }

  /// Same value with no history.
  Var detached() const { return Var(value()); }

  const detail::Node* node() const { return node_.get(); }

 private:
  friend Var make_op(Tensor, std::vector<Var>, std::function<std::vector<Var>(const Var&, const Var&)>);
  friend std::vector<Var> grad(const Var&, std::span<const Var>, bool);
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Backward rule: (output, upstream gradient) -> one gradient per input.
/// Entries may be undefined for inputs that do not require gradients.
using BackwardFn = std::function<std::vector<Var>(const Var& out, const Var& grad_out)>;

Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward);

/// Whether new ops record history on the calling thread.
bool recording();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Gradients of the scalar `output` with respect to each of `wrt`.
/// With `create_graph` the results are themselves differentiable.
/// Inputs that `output` does not depend on get a zero gradient.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph = false);
Var grad(const Var& output, const Var& wrt, bool create_graph = false);

// Elementwise binary ops broadcast [r,c] with [1,c], [r,1] or [1,1].
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, const Shape& shape);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var clamp_min(const Var& a, double lo);

Var sum(const Var& a);       // -> [1,1]
Var mean(const Var& a);      // -> [1,1]
Var row_sum(const Var& a);   // [r,c] -> [r,1]
Var broadcast_to(const Var& a, const Shape& shape);
Var sum_to(const Var& a, const Shape& shape);

/// Row-wise log-softmax of an [r,c] matrix.
Var log_softmax(const Var& a);
/// Elementwise log(mean_i exp(v_i)) over equally shaped inputs.
Var log_mean_exp(std::span<const Var> values);

/// out[r] = a[r, index[r]] as [r,1].
Var pick(const Var& a, std::span<const std::size_t> index);
/// Inverse layout of pick: [r,1] -> [r,cols] with values at index[r].
Var scatter(const Var& a, std::span<const std::size_t> index, std::size_t cols);

/// Row-wise Euclidean norm [r,c] -> [r,1]. Rows with norm below
/// `kDegenerateNorm` are degenerate: their norm derivative is defined as zero.
Var row_norm(const Var& a);
/// Row-wise cosine similarity [r,c] x [r,c] -> [r,1]; degenerate rows give 0.
Var row_cosine(const Var& a, const Var& b);
/// Indicator per row of ||a_r|| < kDegenerateNorm.
std::vector<bool> degenerate_rows(const Tensor& a);

inline constexpr double kDegenerateNorm = 1e-12;

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace trs::ad
