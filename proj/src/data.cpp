#include "trs/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <stdexcept>

namespace trs::data {

Box Box::uniform(std::size_t dim, double lo, double hi) {
  return Box{std::vector<double>(dim, lo), std::vector<double>(dim, hi)};
}

bool Box::contains(const Tensor& points, double slack) const {
  const std::size_t d = points.cols();
  if (lo.size() != d || hi.size() != d) return false;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double v = points[i];
    if (v < lo[i % d] - slack || v > hi[i % d] + slack) return false;
  }
  return true;
}

void Dataset::validate() const {
  if (inputs.rows() != labels.size()) throw std::invalid_argument("dataset: input rows do not match label count");
  for (auto y : labels) {
    if (y >= num_classes) throw std::invalid_argument("dataset: label " + std::to_string(y) + " out of range");
  }
  if (box && !box->contains(inputs)) throw std::invalid_argument("dataset: inputs outside feature box");
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "two-moons") return SyntheticKind::two_moons;
  if (name == "gaussian-blobs") return SyntheticKind::gaussian_blobs;
  throw std::invalid_argument("unknown synthetic dataset kind '" + name + "'");
}

std::string to_string(SyntheticKind kind) {
  return kind == SyntheticKind::two_moons ? "two-moons" : "gaussian-blobs";
}

namespace {

std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = n == 1 ? a : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  return out;
}

}  // namespace

Dataset generate_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("generate_synthetic: need at least 2 points");
  if (!(noise >= 0)) throw std::invalid_argument("generate_synthetic: noise must be non-negative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> raw;
  std::vector<std::size_t> labels;
  raw.reserve(2 * n);
  std::size_t classes = 0;

  if (kind == SyntheticKind::two_moons) {
    classes = 2;
    const std::size_t n_outer = (n + 1) / 2;
    const std::size_t n_inner = n - n_outer;
    for (double t : linspace(0.0, M_PI, n_outer)) {
      raw.push_back(std::cos(t));
      raw.push_back(std::sin(t));
      labels.push_back(0);
    }
    for (double t : linspace(0.0, M_PI, n_inner)) {
      raw.push_back(1.0 - std::cos(t));
      raw.push_back(0.5 - std::sin(t));
      labels.push_back(1);
    }
  } else {
    classes = 3;
    const double centers[3][2] = {{0.0, 0.0}, {2.0, 0.0}, {1.0, std::sqrt(3.0)}};
    for (std::size_t k = 0; k < classes; ++k) {
      const std::size_t count = n / classes + (k < n % classes ? 1 : 0);
      for (std::size_t i = 0; i < count; ++i) {
        raw.push_back(centers[k][0]);
        raw.push_back(centers[k][1]);
        labels.push_back(k);
      }
    }
  }
  if (noise > 0) {
    for (auto& v : raw) v += noise * gauss(rng);
  }

  FeatureTransform tf{{0.0, 0.0}, {1.0, 1.0}};
  for (std::size_t d = 0; d < 2; ++d) {
    double lo = raw[d], hi = raw[d];
    for (std::size_t i = d; i < raw.size(); i += 2) {
      lo = std::min(lo, raw[i]);
      hi = std::max(hi, raw[i]);
    }
    tf.offset[d] = lo;
    tf.scale[d] = hi > lo ? 1.0 / (hi - lo) : 1.0;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::size_t d = i % 2;
    raw[i] = std::clamp((raw[i] - tf.offset[d]) * tf.scale[d], 0.0, 1.0);
  }

  Dataset ds;
  ds.inputs = Tensor({labels.size(), 2}, std::move(raw));
  ds.labels = std::move(labels);
  ds.num_classes = classes;
  ds.provenance = to_string(kind) + " n=" + std::to_string(n) + " seed=" + std::to_string(seed);
  ds.transform = std::move(tf);
  return ds;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) throw std::runtime_error(what + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit) {
  if (limit == 0) throw std::invalid_argument("load_idx: limit 0 yields an empty dataset");
  const auto img = read_file(images);
  const auto lab = read_file(labels);

  if (read_be32(img, 0, images.string()) != kImageMagic) throw std::runtime_error(images.string() + ": bad magic");
  if (read_be32(lab, 0, labels.string()) != kLabelMagic) throw std::runtime_error(labels.string() + ": bad magic");
  const std::size_t count = read_be32(img, 4, images.string());
  const std::size_t rows = read_be32(img, 8, images.string());
  const std::size_t cols = read_be32(img, 12, images.string());
  const std::size_t label_count = read_be32(lab, 4, labels.string());
  if (count != label_count) {
    throw std::runtime_error("load_idx: " + std::to_string(count) + " images but " + std::to_string(label_count) +
                             " labels");
  }
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + count * dim) throw std::runtime_error(images.string() + ": truncated pixel data");
  if (lab.size() < 8 + count) throw std::runtime_error(labels.string() + ": truncated label data");

  const std::size_t n = std::min(limit, count);
  if (n == 0) throw std::runtime_error("load_idx: file contains no items");
  std::vector<double> pixels(n * dim);
  for (std::size_t i = 0; i < n * dim; ++i) pixels[i] = static_cast<double>(img[16 + i]) / 255.0;
  Dataset ds;
  ds.inputs = Tensor({n, dim}, std::move(pixels));
  ds.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = max_label + 1;
  ds.box = Box::uniform(dim, 0.0, 1.0);
  ds.provenance = "idx " + images.filename().string() + " n=" + std::to_string(n);
  return ds;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t rows,
               std::size_t cols, const std::vector<std::uint8_t>& pixels, const std::vector<std::uint8_t>& label_bytes) {
  const std::size_t count = label_bytes.size();
  if (pixels.size() != count * rows * cols) throw std::invalid_argument("write_idx: pixel count mismatch");
  std::ofstream img(images, std::ios::binary);
  write_be32(img, kImageMagic);
  write_be32(img, static_cast<std::uint32_t>(count));
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  std::ofstream lab(labels, std::ios::binary);
  write_be32(lab, kLabelMagic);
  write_be32(lab, static_cast<std::uint32_t>(count));
  lab.write(reinterpret_cast<const char*>(label_bytes.data()), static_cast<std::streamsize>(label_bytes.size()));
  if (!img || !lab) throw std::runtime_error("write_idx: write failed");
}

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.inputs = select_rows(ds.inputs, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(ds.labels.at(i));
  out.num_classes = ds.num_classes;
  out.box = ds.box;
  out.provenance = ds.provenance;
  out.transform = ds.transform;
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, std::size_t n_first, std::uint64_t seed) {
  if (n_first > ds.size()) throw std::invalid_argument("split: first part larger than dataset");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_first));
  std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(n_first), order.end());
  return {subset(ds, a), subset(ds, b)};
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

}  // namespace trs::data
