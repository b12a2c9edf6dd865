#include "trs/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

namespace trs::ad {

namespace detail {

struct Node {
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
};

}  // namespace detail

namespace {

thread_local bool g_recording = true;

const Tensor& require_matrix(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("autodiff values must be rank-2, got " + shape_string(t.shape()));
  return t;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out(2);
  for (int d = 0; d < 2; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                                  shape_string(b));
    }
  }
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const Shape& out_shape, F f) {
  const std::size_t rows = out_shape[0], cols = out_shape[1];
  const std::size_t ars = a.shape()[0] == 1 ? 0 : a.shape()[1];
  const std::size_t acs = a.shape()[1] == 1 ? 0 : 1;
  const std::size_t brs = b.shape()[0] == 1 ? 0 : b.shape()[1];
  const std::size_t bcs = b.shape()[1] == 1 ? 0 : 1;
  std::vector<double> out(rows * cols);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = f(ad[r * ars + c * acs], bd[r * brs + c * bcs]);
    }
  }
  return Tensor(out_shape, std::move(out));
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

Var::Var() = default;

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  require_matrix(value);
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw std::logic_error("use of undefined Var");
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

bool recording() { return g_recording; }

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  require_matrix(value);
  const bool needs = g_recording && std::any_of(inputs.begin(), inputs.end(),
                                                [](const Var& v) { return v.requires_grad(); });
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  if (needs) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->requires_grad = true;
  }
  return Var(std::move(node));
}

std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph) {
  if (output.value().size() != 1) {
    throw std::invalid_argument("grad: output must be a scalar, got " + shape_string(output.shape()));
  }

  // Post-order over the recorded graph.
  std::vector<std::shared_ptr<detail::Node>> order;
  if (output.requires_grad()) {
    std::unordered_map<const detail::Node*, bool> visited;
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(output.node_, 0);
    visited[output.node_.get()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const Var& in = node->inputs[next++];
        if (in.requires_grad() && !visited[in.node_.get()]) {
          visited[in.node_.get()] = true;
          stack.emplace_back(in.node_, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  const bool saved = g_recording;
  g_recording = create_graph;
  std::unordered_map<const detail::Node*, Var> adjoint;
  try {
    if (!order.empty()) adjoint.emplace(output.node(), Var(Tensor::full(output.shape(), 1.0)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const auto& node = *it;
      auto found = adjoint.find(node.get());
      if (found == adjoint.end() || !node->backward) continue;
      const Var g = found->second;
      const Var self(node);
      std::vector<Var> parts = node->backward(self, g);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const Var& in = node->inputs[i];
        if (!in.requires_grad() || i >= parts.size() || !parts[i].defined()) continue;
        if (parts[i].shape() != in.shape()) {
          throw std::logic_error("backward produced gradient of shape " + shape_string(parts[i].shape()) +
                                 " for input of shape " + shape_string(in.shape()));
        }
        auto [slot, inserted] = adjoint.emplace(in.node(), parts[i]);
        if (!inserted) slot->second = add(slot->second, parts[i]);
      }
    }
  } catch (...) {
    g_recording = saved;
    throw;
  }
  g_recording = saved;

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto found = w.defined() ? adjoint.find(w.node()) : adjoint.end();
    if (found == adjoint.end()) {
      result.emplace_back(Tensor::zeros(w.shape()));
    } else if (create_graph) {
      result.push_back(found->second);
    } else {
      result.push_back(found->second.detached());
    }
  }
  return result;
}

Var grad(const Var& output, const Var& wrt, bool create_graph) {
  return grad(output, std::span<const Var>(&wrt, 1), create_graph).front();
}

// ---------------------------------------------------------------------------
// Shape plumbing

Var sum_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  const Tensor& v = a.value();
  const std::size_t rows = v.shape()[0], cols = v.shape()[1];
  if ((shape[0] != rows && shape[0] != 1) || (shape[1] != cols && shape[1] != 1)) {
    throw std::invalid_argument("sum_to: cannot reduce " + shape_string(v.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(shape[0] * shape[1], 0.0);
  const auto d = v.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t rr = shape[0] == 1 ? 0 : r;
      const std::size_t cc = shape[1] == 1 ? 0 : c;
      out[rr * shape[1] + cc] += d[r * cols + c];
    }
  }
  const Shape from = v.shape();
  return make_op(Tensor(shape, std::move(out)), {a},
                 [from](const Var&, const Var& g) { return std::vector<Var>{broadcast_to(g, from)}; });
}

Var broadcast_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  const Shape from = a.shape();
  broadcast_shape(shape, from, "broadcast_to");
  Tensor out = zip(Tensor::zeros(shape), a.value(), shape, [](double, double y) { return y; });
  return make_op(std::move(out), {a},
                 [from](const Var&, const Var& g) { return std::vector<Var>{sum_to(g, from)}; });
}

// ---------------------------------------------------------------------------
// Elementwise binary

Var add(const Var& a, const Var& b) {
  const Shape s = broadcast_shape(a.shape(), b.shape(), "add");
  const Shape as = a.shape(), bs = b.shape();
  return make_op(zip(a.value(), b.value(), s, [](double x, double y) { return x + y; }), {a, b},
                 [as, bs](const Var&, const Var& g) { return std::vector<Var>{sum_to(g, as), sum_to(g, bs)}; });
}

Var sub(const Var& a, const Var& b) {
  const Shape s = broadcast_shape(a.shape(), b.shape(), "sub");
  const Shape as = a.shape(), bs = b.shape();
  return make_op(zip(a.value(), b.value(), s, [](double x, double y) { return x - y; }), {a, b},
                 [as, bs](const Var&, const Var& g) {
                   return std::vector<Var>{sum_to(g, as), sum_to(neg(g), bs)};
                 });
}

Var mul(const Var& a, const Var& b) {
  const Shape s = broadcast_shape(a.shape(), b.shape(), "mul");
  return make_op(zip(a.value(), b.value(), s, [](double x, double y) { return x * y; }), {a, b},
                 [a, b](const Var&, const Var& g) {
                   std::vector<Var> out(2);
                   if (a.requires_grad()) out[0] = sum_to(mul(g, b), a.shape());
                   if (b.requires_grad()) out[1] = sum_to(mul(g, a), b.shape());
                   return out;
                 });
}

Var div(const Var& a, const Var& b) {
  const Shape s = broadcast_shape(a.shape(), b.shape(), "div");
  return make_op(zip(a.value(), b.value(), s, [](double x, double y) { return x / y; }), {a, b},
                 [a, b](const Var& out, const Var& g) {
                   std::vector<Var> res(2);
                   if (a.requires_grad()) res[0] = sum_to(div(g, b), a.shape());
                   if (b.requires_grad()) res[1] = sum_to(neg(div(mul(g, out), b)), b.shape());
                   return res;
                 });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  return make_op(map(a.value(), [s](double x) { return s * x; }), {a},
                 [s](const Var&, const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

Var add_scalar(const Var& a, double s) {
  return make_op(map(a.value(), [s](double x) { return x + s; }), {a},
                 [](const Var&, const Var& g) { return std::vector<Var>{g}; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t n = x.shape()[0], k = x.shape()[1], m = y.shape()[1];
  if (y.shape()[0] != k) {
    throw std::invalid_argument("matmul: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  const auto xd = x.data();
  const auto yd = y.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xd[i * k + p];
      if (xv == 0.0) continue;
      const double* yrow = yd.data() + p * m;
      double* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += xv * yrow[j];
    }
  }
  return make_op(Tensor({n, m}, std::move(out)), {a, b}, [a, b](const Var&, const Var& g) {
    std::vector<Var> res(2);
    if (a.requires_grad()) res[0] = matmul(g, transpose(b));
    if (b.requires_grad()) res[1] = matmul(transpose(a), g);
    return res;
  });
}

Var transpose(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return make_op(Tensor({c, r}, std::move(out)), {a},
                 [](const Var&, const Var& g) { return std::vector<Var>{transpose(g)}; });
}

Var reshape(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  const Shape from = a.shape();
  return make_op(a.value().reshaped(shape), {a},
                 [from](const Var&, const Var& g) { return std::vector<Var>{reshape(g, from)}; });
}

// ---------------------------------------------------------------------------
// Elementwise unary

Var tanh(const Var& a) {
  return make_op(map(a.value(), [](double x) { return std::tanh(x); }), {a}, [](const Var& out, const Var& g) {
    return std::vector<Var>{mul(g, add_scalar(neg(square(out)), 1.0))};
  });
}

Var sigmoid(const Var& a) {
  return make_op(map(a.value(),
                     [](double x) {
                       if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                       const double e = std::exp(x);
                       return e / (1.0 + e);
                     }),
                 {a}, [](const Var& out, const Var& g) {
                   return std::vector<Var>{mul(g, mul(out, add_scalar(neg(out), 1.0)))};
                 });
}

Var softplus(const Var& a) {
  return make_op(map(a.value(), [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }),
                 {a}, [a](const Var&, const Var& g) { return std::vector<Var>{mul(g, sigmoid(a))}; });
}

Var relu(const Var& a) {
  return make_op(map(a.value(), [](double x) { return x > 0 ? x : 0.0; }), {a}, [a](const Var&, const Var& g) {
    Var mask(map(a.value(), [](double x) { return x > 0 ? 1.0 : 0.0; }));
    return std::vector<Var>{mul(g, mask)};
  });
}

Var exp(const Var& a) {
  return make_op(map(a.value(), [](double x) { return std::exp(x); }), {a},
                 [](const Var& out, const Var& g) { return std::vector<Var>{mul(g, out)}; });
}

Var log(const Var& a) {
  return make_op(map(a.value(), [](double x) { return std::log(x); }), {a},
                 [a](const Var&, const Var& g) { return std::vector<Var>{div(g, a)}; });
}

Var abs(const Var& a) {
  return make_op(map(a.value(), [](double x) { return std::abs(x); }), {a}, [a](const Var&, const Var& g) {
    Var sign(map(a.value(), [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }));
    return std::vector<Var>{mul(g, sign)};
  });
}

Var square(const Var& a) {
  return make_op(map(a.value(), [](double x) { return x * x; }), {a},
                 [a](const Var&, const Var& g) { return std::vector<Var>{scale(mul(g, a), 2.0)}; });
}

Var clamp_min(const Var& a, double lo) {
  return make_op(map(a.value(), [lo](double x) { return std::max(x, lo); }), {a}, [a, lo](const Var&, const Var& g) {
    Var mask(map(a.value(), [lo](double x) { return x >= lo ? 1.0 : 0.0; }));
    return std::vector<Var>{mul(g, mask)};
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const Shape from = a.shape();
  return make_op(Tensor::scalar(s), {a},
                 [from](const Var&, const Var& g) { return std::vector<Var>{broadcast_to(g, from)}; });
}

Var mean(const Var& a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x.data()[i * c + j];
  const Shape from = a.shape();
  return make_op(Tensor({r, 1}, std::move(out)), {a},
                 [from](const Var&, const Var& g) { return std::vector<Var>{broadcast_to(g, from)}; });
}

// ---------------------------------------------------------------------------
// Classification helpers

Var log_softmax(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_op(Tensor({r, c}, std::move(out)), {a}, [](const Var& out, const Var& g) {
    return std::vector<Var>{sub(g, mul(exp(out), row_sum(g)))};
  });
}

Var log_mean_exp(std::span<const Var> values) {
  if (values.empty()) throw std::invalid_argument("log_mean_exp: no inputs");
  const Shape shape = values.front().shape();
  const std::size_t n = values.front().value().size();
  const double count = static_cast<double>(values.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (const Var& v : values) {
      if (v.shape() != shape) throw std::invalid_argument("log_mean_exp: shape mismatch");
      m = std::max(m, v.value()[i]);
    }
    double s = 0.0;
    for (const Var& v : values) s += std::exp(v.value()[i] - m);
    out[i] = m + std::log(s / count);
  }
  std::vector<Var> inputs(values.begin(), values.end());
  return make_op(Tensor(shape, std::move(out)), inputs, [inputs, count](const Var& out, const Var& g) {
    std::vector<Var> res(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].requires_grad()) res[i] = scale(mul(g, exp(sub(inputs[i], out))), 1.0 / count);
    }
    return res;
  });
}

Var pick(const Var& a, std::span<const std::size_t> index) {
  const Tensor& x = a.value();
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (index.size() != r) throw std::invalid_argument("pick: index count does not match rows");
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] >= c) throw std::out_of_range("pick: column index out of range");
    out[i] = x.data()[i * c + index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op(Tensor({r, 1}, std::move(out)), {a}, [idx, c](const Var&, const Var& g) {
    return std::vector<Var>{scatter(g, idx, c)};
  });
}

Var scatter(const Var& a, std::span<const std::size_t> index, std::size_t cols) {
  const Tensor& x = a.value();
  const std::size_t r = x.shape()[0];
  if (x.shape()[1] != 1 || index.size() != r) throw std::invalid_argument("scatter: expects [r,1] and r indices");
  std::vector<double> out(r * cols, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] >= cols) throw std::out_of_range("scatter: column index out of range");
    out[i * cols + index[i]] = x.data()[i];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op(Tensor({r, cols}, std::move(out)), {a},
                 [idx](const Var&, const Var& g) { return std::vector<Var>{pick(g, idx)}; });
}

std::vector<bool> degenerate_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<bool> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.data()[i * c + j] * a.data()[i * c + j];
    out[i] = std::sqrt(s) < kDegenerateNorm;
  }
  return out;
}

Var row_norm(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r);
  std::vector<double> live(r), dead(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x.data()[i * c + j] * x.data()[i * c + j];
    out[i] = std::sqrt(s);
    live[i] = out[i] < kDegenerateNorm ? 0.0 : 1.0;
    dead[i] = 1.0 - live[i];
  }
  Var live_mask(Tensor({r, 1}, std::move(live)));
  Var dead_mask(Tensor({r, 1}, std::move(dead)));
  return make_op(Tensor({r, 1}, std::move(out)), {a}, [a, live_mask, dead_mask](const Var& out, const Var& g) {
    // d||a||/da = a / ||a||, zero on degenerate rows.
    Var inv = div(mul(g, live_mask), add(out, dead_mask));
    return std::vector<Var>{mul(a, inv)};
  });
}

Var row_cosine(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("row_cosine: shape mismatch");
  const auto da = degenerate_rows(a.value());
  const auto db = degenerate_rows(b.value());
  const std::size_t r = a.rows();
  std::vector<double> live(r), dead(r);
  for (std::size_t i = 0; i < r; ++i) {
    live[i] = (da[i] || db[i]) ? 0.0 : 1.0;
    dead[i] = 1.0 - live[i];
  }
  Var live_mask(Tensor({r, 1}, std::move(live)));
  Var dead_mask(Tensor({r, 1}, std::move(dead)));
  Var num = mul(row_sum(mul(a, b)), live_mask);
  Var den = add(mul(row_norm(a), row_norm(b)), dead_mask);
  return div(num, den);
}

}  // namespace trs::ad
