#include "trs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace trs {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{0} {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw std::invalid_argument("tensor shape " + shape_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
  for (double v : data_) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor of shape " + shape_string(shape_));
  }
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept {
  if (shape_.size() == 2) return shape_[1];
  return data_.size();
}

double Tensor::item() const {
  if (data_.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::row_at(std::size_t r) const {
  const std::size_t c = cols();
  if (r >= rows()) throw std::out_of_range("row index out of range");
  return Tensor({1, c}, std::vector<double>(data_.begin() + r * c, data_.begin() + (r + 1) * c));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "operator+");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor(a.shape(), std::move(out));
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "operator-");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor(a.shape(), std::move(out));
}

Tensor operator*(double s, const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a[i];
  return Tensor(a.shape(), std::move(out));
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double linf_norm(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double l1_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += std::abs(v);
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  const std::size_t c = rows.front().size();
  std::vector<double> out;
  out.reserve(c * rows.size());
  for (const auto& r : rows) {
    if (r.size() != c) throw std::invalid_argument("stack_rows: ragged rows");
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return Tensor({rows.size(), c}, std::move(out));
}

Tensor select_rows(const Tensor& m, std::span<const std::size_t> indices) {
  const std::size_t c = m.cols();
  std::vector<double> out;
  out.reserve(c * indices.size());
  for (std::size_t i : indices) {
    if (i >= m.rows()) throw std::out_of_range("select_rows: index out of range");
    auto first = m.data().begin() + static_cast<std::ptrdiff_t>(i * c);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(c));
  }
  return Tensor({indices.size(), c}, std::move(out));
}

}  // namespace trs
