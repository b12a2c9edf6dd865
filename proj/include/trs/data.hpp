#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trs/tensor.hpp"

namespace trs::data {

/// Per-dimension closed interval [lo, hi].
struct Box {
  std::vector<double> lo;
  std::vector<double> hi;

  static Box uniform(std::size_t dim, double lo, double hi);
  bool contains(const Tensor& points, double slack = 0.0) const;
};

/// Affine map applied to raw features: feature = (raw - offset) * scale.
struct FeatureTransform {
  std::vector<double> offset;
  std::vector<double> scale;
};

/// Labelled points. Labels are class indices 0..num_classes-1.
struct Dataset {
  Tensor inputs;  // [n, dim]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::optional<Box> box;
  std::string provenance;
  std::optional<FeatureTransform> transform;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }
  bool empty() const { return labels.empty(); }

  /// Throws if labels are out of range, sizes disagree or the box is violated.
  void validate() const;
};

enum class SyntheticKind { two_moons, gaussian_blobs };

SyntheticKind parse_synthetic_kind(const std::string& name);
std::string to_string(SyntheticKind kind);

/// Two interleaved half circles (2 classes) or three Gaussian blobs
/// (3 classes), rescaled per dimension to [0, 1]. Classes are balanced to
/// within one point.
Dataset generate_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed);

/// Reads an IDX image file (magic 0x00000803) and label file (magic
/// 0x00000801). Pixels are scaled by 1/255 and the box is [0, 1]^dim.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit);

/// Writes IDX files; used for fixtures and exporting subsets.
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t rows,
               std::size_t cols, const std::vector<std::uint8_t>& pixels, const std::vector<std::uint8_t>& label_bytes);

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices);

/// Seeded permutation split into (first n_first, rest).
std::pair<Dataset, Dataset> split(const Dataset& ds, std::size_t n_first, std::uint64_t seed);

/// Mini-batch index lists. Without shuffling batches follow dataset order.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed);

}  // namespace trs::data
