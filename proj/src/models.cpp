#include "trs/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>

namespace trs::models {

using ad::Var;

std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::softplus: return "softplus";
    case Activation::relu: return "relu";
  }
  return "unknown";
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "softplus") return Activation::softplus;
  if (name == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

namespace {

Var activate(Activation a, const Var& v) {
  switch (a) {
    case Activation::tanh: return ad::tanh(v);
    case Activation::softplus: return ad::softplus(v);
    case Activation::relu: return ad::relu(v);
  }
  throw std::logic_error("bad activation");
}

std::vector<Var> constants(const std::vector<Tensor>& params) {
  return std::vector<Var>(params.begin(), params.end());
}

void check_input(const Var& x, std::size_t dim) {
  if (x.cols() != dim) {
    throw std::invalid_argument("input has " + std::to_string(x.cols()) + " features, model expects " +
                                std::to_string(dim));
  }
}

}  // namespace

MlpClassifier::MlpClassifier(std::vector<std::size_t> layer_sizes, Activation activation, std::vector<Tensor> params)
    : sizes_(std::move(layer_sizes)), activation_(activation), params_(std::move(params)) {
  if (sizes_.size() < 2) throw std::invalid_argument("MLP needs at least input and output sizes");
  if (sizes_.back() < 2) throw std::invalid_argument("MLP needs at least two classes");
  if (params_.size() != 2 * (sizes_.size() - 1)) throw std::invalid_argument("MLP parameter count mismatch");
  for (std::size_t k = 0; k + 1 < sizes_.size(); ++k) {
    if (params_[2 * k].shape() != Shape{sizes_[k], sizes_[k + 1]} || params_[2 * k + 1].shape() != Shape{1, sizes_[k + 1]}) {
      throw std::invalid_argument("MLP parameter shape mismatch at layer " + std::to_string(k));
    }
  }
}

MlpClassifier MlpClassifier::initialize(std::vector<std::size_t> layer_sizes, Activation activation,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> params;
  for (std::size_t k = 0; k + 1 < layer_sizes.size(); ++k) {
    const std::size_t in = layer_sizes[k], out = layer_sizes[k + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-a, a);
    std::vector<double> w(in * out);
    for (auto& v : w) v = u(rng);
    params.emplace_back(Shape{in, out}, std::move(w));
    params.push_back(Tensor::zeros({1, out}));
  }
  return MlpClassifier(std::move(layer_sizes), activation, std::move(params));
}

std::size_t MlpClassifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

MlpClassifier MlpClassifier::with_parameters(std::vector<Tensor> params) const {
  return MlpClassifier(sizes_, activation_, std::move(params));
}

Var MlpClassifier::logits(std::span<const Var> params, const Var& x) const {
  check_input(x, input_dim());
  if (params.size() != params_.size()) throw std::invalid_argument("MLP parameter count mismatch");
  Var h = x;
  const std::size_t layers = sizes_.size() - 1;
  for (std::size_t k = 0; k < layers; ++k) {
    h = ad::add(ad::matmul(h, params[2 * k]), params[2 * k + 1]);
    if (k + 1 < layers) h = activate(activation_, h);
  }
  return h;
}

Var MlpClassifier::log_confidences(std::span<const Var> params, const Var& x) const {
  return ad::log_softmax(logits(params, x));
}

Var MlpClassifier::log_confidences(const Var& x) const { return log_confidences(constants(params_), x); }

Var MlpClassifier::scores(const Var& x) const { return logits(constants(params_), x); }

Ensemble::Ensemble(std::vector<MlpClassifier> members) : members_(std::move(members)) {
  if (members_.empty()) throw std::invalid_argument("ensemble needs at least one member");
  for (const auto& m : members_) {
    if (m.input_dim() != members_.front().input_dim() || m.num_classes() != members_.front().num_classes()) {
      throw std::invalid_argument("ensemble members disagree on input or class dimensions");
    }
  }
}

Var Ensemble::log_confidences(std::span<const std::vector<Var>> params, const Var& x) const {
  if (params.size() != members_.size()) throw std::invalid_argument("ensemble parameter set count mismatch");
  std::vector<Var> member_logs;
  member_logs.reserve(members_.size());
  for (std::size_t i = 0; i < members_.size(); ++i) member_logs.push_back(members_[i].log_confidences(params[i], x));
  if (member_logs.size() == 1) return member_logs.front();
  return ad::log_mean_exp(member_logs);
}

Var Ensemble::log_confidences(const Var& x) const {
  std::vector<std::vector<Var>> params;
  for (const auto& m : members_) params.push_back(constants(m.parameters()));
  return log_confidences(params, x);
}

Var Ensemble::scores(const Var& x) const { return log_confidences(x); }

void check_labels(std::span<const std::size_t> labels, std::size_t num_classes, std::size_t rows) {
  if (labels.size() != rows) throw std::invalid_argument("label count does not match batch rows");
  for (auto y : labels) {
    if (y >= num_classes) throw std::invalid_argument("invalid label " + std::to_string(y));
  }
}

Var cross_entropy(const Var& log_confidences, std::span<const std::size_t> labels) {
  check_labels(labels, log_confidences.cols(), log_confidences.rows());
  return ad::neg(ad::clamp_min(ad::pick(log_confidences, labels), std::log(kMinConfidence)));
}

Tensor predict_confidences(const Classifier& model, const Tensor& x) {
  ad::NoGradGuard guard;
  const Tensor logp = model.log_confidences(Var(x)).value();
  std::vector<double> p(logp.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logp[i]);
  return Tensor(logp.shape(), std::move(p));
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<std::size_t> predict_labels(const Classifier& model, const Tensor& x) {
  ad::NoGradGuard guard;
  // Log-confidences are monotone in confidences, so argmax agrees.
  const Tensor logp = model.log_confidences(Var(x)).value();
  const std::size_t c = logp.cols();
  std::vector<std::size_t> out(logp.rows());
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = argmax_row(logp.data().subspan(r * c, c));
  return out;
}

std::vector<double> losses(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels) {
  ad::NoGradGuard guard;
  const Tensor l = cross_entropy(model.log_confidences(Var(x)), labels).value();
  return std::vector<double>(l.data().begin(), l.data().end());
}

double loss(const Classifier& model, const Tensor& x_row, std::size_t label) {
  const std::size_t y[] = {label};
  return losses(model, x_row, y).front();
}

double mean_loss(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels) {
  const auto l = losses(model, x, labels);
  double s = 0.0;
  for (double v : l) s += v;
  return s / static_cast<double>(l.size());
}

double accuracy(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy of an empty batch");
  const auto pred = predict_labels(model, x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

std::size_t InputGradients::degenerate_count() const {
  return static_cast<std::size_t>(std::count(degenerate.begin(), degenerate.end(), true));
}

InputGradients input_gradient(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels) {
  Var xv(x, true);
  const Var total = ad::sum(cross_entropy(model.log_confidences(xv), labels));
  InputGradients out{ad::grad(total, xv).value(), {}};
  out.degenerate = ad::degenerate_rows(out.grads);
  return out;
}

double ensemble_training_loss(const Ensemble& ensemble, const Tensor& x, std::span<const std::size_t> labels) {
  if (labels.empty()) throw std::invalid_argument("ensemble_training_loss: empty batch");
  double total = 0.0;
  for (const auto& m : ensemble.members()) total += mean_loss(m, x, labels);
  return total / static_cast<double>(ensemble.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'T', 'R', 'S', 'C', 'K', 'P', 'T', '\0'};

void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::ostream& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint8_t get_u8(std::istream& in) {
  const int c = in.get();
  if (c == std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: unexpected end of data");
  return static_cast<std::uint8_t>(c);
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{get_u8(in)} << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{get_u8(in)} << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_checkpoint(std::ostream& out, const Ensemble& ensemble) {
  out.write(kMagic, sizeof kMagic);
  put_u8(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ensemble.size()));
  for (const auto& m : ensemble.members()) {
    put_u8(out, static_cast<std::uint8_t>(m.activation()));
    put_u32(out, static_cast<std::uint32_t>(m.layer_sizes().size()));
    for (auto s : m.layer_sizes()) put_u32(out, static_cast<std::uint32_t>(s));
    put_u32(out, static_cast<std::uint32_t>(m.parameters().size()));
    for (const auto& t : m.parameters()) {
      put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
      for (double v : t.data()) put_f64(out, v);
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

Ensemble read_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kMagic)) throw std::runtime_error("checkpoint: bad magic");
  const auto version = get_u8(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(in);
  if (count == 0 || count > 1024) throw std::runtime_error("checkpoint: implausible member count");
  std::vector<MlpClassifier> members;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto act = get_u8(in);
    if (act > 2) throw std::runtime_error("checkpoint: unknown activation tag");
    const std::uint32_t layers = get_u32(in);
    if (layers < 2 || layers > 64) throw std::runtime_error("checkpoint: implausible layer count");
    std::vector<std::size_t> sizes(layers);
    for (auto& s : sizes) s = get_u32(in);
    const std::uint32_t tensors = get_u32(in);
    if (tensors != 2 * (layers - 1)) throw std::runtime_error("checkpoint: tensor count mismatch");
    std::vector<Tensor> params;
    for (std::uint32_t t = 0; t < tensors; ++t) {
      const std::uint32_t rank = get_u32(in);
      if (rank != 2) throw std::runtime_error("checkpoint: expected rank-2 parameters");
      Shape shape(rank);
      for (auto& d : shape) d = get_u32(in);
      std::vector<double> values(shape_size(shape));
      for (auto& v : values) v = get_f64(in);
      params.emplace_back(std::move(shape), std::move(values));
    }
    members.emplace_back(std::move(sizes), static_cast<Activation>(act), std::move(params));
  }
  return Ensemble(std::move(members));
}

void save_checkpoint(const std::filesystem::path& path, const Ensemble& ensemble) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(out, ensemble);
}

Ensemble load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace trs::models
