#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "trs/autodiff.hpp"
#include "trs/tensor.hpp"

namespace trs::models {

enum class Activation : std::uint8_t { tanh = 0, softplus = 1, relu = 2 };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);
/// ReLU networks have no finite gradient-Lipschitz constant.
inline bool is_smooth(Activation a) { return a != Activation::relu; }

/// Confidences are clamped below by this value before taking the log.
inline constexpr double kMinConfidence = 1e-30;

/// A differentiable classifier over row-batched inputs.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t input_dim() const = 0;
  virtual std::size_t num_classes() const = 0;
  /// log f_y(x) for every row and class, [B, C].
  virtual ad::Var log_confidences(const ad::Var& x) const = 0;
  /// Pre-softmax scores used by margin losses. For a single network these are
  /// the logits; for an ensemble, the log of the averaged confidences.
  virtual ad::Var scores(const ad::Var& x) const = 0;
};

/// Fully connected network: hidden layers use `activation`, the output layer
/// is linear and followed by a softmax. Parameters are {W1, b1, W2, b2, ...}
/// with W_k of shape [in, out] and b_k of shape [1, out].
class MlpClassifier final : public Classifier {
 public:
  MlpClassifier(std::vector<std::size_t> layer_sizes, Activation activation, std::vector<Tensor> params);

  /// Weights uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)); biases zero.
  static MlpClassifier initialize(std::vector<std::size_t> layer_sizes, Activation activation, std::uint64_t seed);

  std::size_t input_dim() const override { return sizes_.front(); }
  std::size_t num_classes() const override { return sizes_.back(); }
  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  Activation activation() const { return activation_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  MlpClassifier with_parameters(std::vector<Tensor> params) const;

  /// Logits computed from explicit parameter variables (for training).
  ad::Var logits(std::span<const ad::Var> params, const ad::Var& x) const;
  ad::Var log_confidences(std::span<const ad::Var> params, const ad::Var& x) const;

  ad::Var log_confidences(const ad::Var& x) const override;
  ad::Var scores(const ad::Var& x) const override;

 private:
  std::vector<std::size_t> sizes_;
  Activation activation_;
  std::vector<Tensor> params_;
};

/// N base networks whose confidences are averaged.
class Ensemble final : public Classifier {
 public:
  explicit Ensemble(std::vector<MlpClassifier> members);

  std::size_t size() const { return members_.size(); }
  const MlpClassifier& member(std::size_t i) const { return members_.at(i); }
  const std::vector<MlpClassifier>& members() const { return members_; }

  std::size_t input_dim() const override { return members_.front().input_dim(); }
  std::size_t num_classes() const override { return members_.front().num_classes(); }

  /// Ensemble log-confidences from explicit per-member parameter variables.
  ad::Var log_confidences(std::span<const std::vector<ad::Var>> params, const ad::Var& x) const;

  ad::Var log_confidences(const ad::Var& x) const override;
  ad::Var scores(const ad::Var& x) const override;

 private:
  std::vector<MlpClassifier> members_;
};

/// -log max(f_y(x), kMinConfidence) per row, [B, 1].
ad::Var cross_entropy(const ad::Var& log_confidences, std::span<const std::size_t> labels);

/// Confidence vectors [B, C].
Tensor predict_confidences(const Classifier& model, const Tensor& x);
/// argmax f_y(x) per row; ties go to the lowest class index.
std::vector<std::size_t> predict_labels(const Classifier& model, const Tensor& x);
std::size_t argmax_row(std::span<const double> row);

/// Per-item cross-entropy losses.
std::vector<double> losses(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels);
double loss(const Classifier& model, const Tensor& x_row, std::size_t label);
double mean_loss(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels);
double accuracy(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels);

struct InputGradients {
  Tensor grads;                   // [B, dim]
  std::vector<bool> degenerate;   // ||grad|| < kDegenerateNorm
  std::size_t degenerate_count() const;
};

/// grad_x of the per-item cross-entropy for every row.
InputGradients input_gradient(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels);

/// Mean over members and batch items of the cross-entropy.
double ensemble_training_loss(const Ensemble& ensemble, const Tensor& x, std::span<const std::size_t> labels);

void check_labels(std::span<const std::size_t> labels, std::size_t num_classes, std::size_t rows);

// Checkpoints: "TRSCKPT\0", format version byte, u32 member count, then per
// member an activation byte, u32 layer count, u32 layer sizes, u32 tensor
// count and per tensor u32 rank, u32 dims and little-endian f64 values.
inline constexpr std::uint8_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const Ensemble& ensemble);
Ensemble read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Ensemble& ensemble);
Ensemble load_checkpoint(const std::filesystem::path& path);

}  // namespace trs::models
