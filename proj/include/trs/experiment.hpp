#pragma once

// Experiment driver behind the command-line tool: config parsing, staged
// runs (train, attack, transfer, bounds, boundary, report) and their
// machine-readable outputs.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "trs/attacks.hpp"
#include "trs/bounds.hpp"
#include "trs/data.hpp"
#include "trs/models.hpp"
#include "trs/training.hpp"

namespace trs::experiment {

struct DataSpec {
  std::string kind = "two-moons";  // two-moons | gaussian-blobs | idx
  std::size_t train = 1000;
  std::size_t test = 500;
  double noise = 0.1;
  std::filesystem::path images, labels, test_images, test_labels;  // idx only
  std::size_t limit = 2000;
};

struct ModelSpec {
  std::size_t members = 3;
  std::vector<std::size_t> hidden{16, 16};
  models::Activation activation = models::Activation::tanh;
};

/// One [attack NAME] section: a spec evaluated at every listed epsilon.
struct NamedAttack {
  std::string name;
  attacks::AttackSpec spec;
  std::vector<double> epsilons;
};

struct TransferSettings {
  std::string attack;  // name of an attack section
  double epsilon = 0.07;
};

struct BoundsSettings {
  std::string attack;
  double epsilon = 0.05;
  std::size_t points = 200;
  std::size_t surrogate = 0;
  std::size_t target = 1;
  bounds::EstimationConfig estimation;
};

struct BoundarySettings {
  std::size_t resolution = 41;
  double half_width = 0.3;
  std::size_t point = 0;  // index into the test set
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "results";
  DataSpec data;
  ModelSpec model;
  training::TrainConfig train;
  std::vector<training::Mode> modes{training::Mode::vanilla, training::Mode::trs};
  std::vector<NamedAttack> attacks;
  TransferSettings transfer;
  BoundsSettings bounds;
  BoundarySettings boundary;

  const NamedAttack& attack(const std::string& name) const;
  void validate() const;
};

/// Sections in brackets, `key = value` lines, `#` comments. Attack sections
/// are written `[attack NAME]`. Unknown sections or keys are errors.
ExperimentConfig parse_config(std::istream& in, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Seeds consumed by a run, all derived from the global seed.
struct Seeds {
  std::uint64_t data_train, data_test, init, shuffle, attack, bounds, boundary;
};
Seeds derive_seeds(std::uint64_t global);

struct Datasets {
  data::Dataset train;
  data::Dataset test;
};
Datasets make_datasets(const ExperimentConfig& cfg);

/// Thrown by a failing stage; the message starts with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct BoundaryGrid {
  std::size_t resolution = 0;
  double half_width = 0.0;
  Tensor d_grad;  // unit, along the negative loss gradient
  Tensor d_orth;  // unit, orthogonal to d_grad
  std::vector<double> u, v;
  std::vector<std::size_t> labels;  // row-major over (u, v)

  /// Adjacent grid cells (along u and along v) with different labels.
  std::size_t label_changes() const;
};

/// Predictions on x + u d_grad + v d_orth over a resolution x resolution
/// grid, u, v in [-half_width, half_width]. With odd resolution the centre
/// cell is x itself.
BoundaryGrid emit_boundary_grid(const models::Classifier& model, const Tensor& x_row, std::size_t y,
                                std::size_t resolution, double half_width, std::uint64_t seed);
void write_grid_csv(std::ostream& out, const BoundaryGrid& grid);

struct ModeSummary {
  training::Mode mode;
  double clean_accuracy = 0.0;
  double mean_abs_cos = 0.0;
  double transfer_rate = 0.0;  // off-diagonal mean of the member transfer matrix
  std::size_t boundary_changes = 0;
  std::vector<double> robust;  // per robust-table row
};

struct RobustRow {
  std::string attack;
  double epsilon = 0.0;
};

/// Runs stages against one output directory. Stages after `train` load
/// checkpoints written earlier when the ensembles are not in memory.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, std::size_t threads = 1);

  void train();
  void attack();
  void transfer();
  void bounds();
  void boundary();
  void report();
  void all();

  const ExperimentConfig& config() const { return cfg_; }
  const Datasets& datasets() const { return data_; }
  const std::map<training::Mode, models::Ensemble>& ensembles();
  const std::vector<RobustRow>& robust_rows() const { return rows_; }
  /// Robust accuracy per row for each mode (filled by `attack`).
  const std::map<training::Mode, std::vector<double>>& robust() const { return robust_; }
  const std::vector<ModeSummary>& summary() const { return summary_; }

  std::filesystem::path checkpoint_path(training::Mode m) const;

 private:
  template <class Fn>
  void stage(const std::string& name, Fn&& fn);
  void write_manifest();

  ExperimentConfig cfg_;
  std::size_t threads_;
  Seeds seeds_;
  Datasets data_;
  std::map<training::Mode, models::Ensemble> ensembles_;
  std::vector<RobustRow> rows_;
  std::map<training::Mode, std::vector<double>> robust_;
  std::map<training::Mode, double> transfer_rate_;
  std::map<training::Mode, std::size_t> boundary_changes_;
  std::vector<ModeSummary> summary_;
  std::vector<std::string> stages_done_;
  std::vector<std::string> files_;
};

/// File-name form of a mode ("trs+advt" -> "trs_advt").
std::string mode_file_name(training::Mode m);

/// Worker count from TRS_THREADS (default 1). Results never depend on it.
std::size_t threads_from_env();

}  // namespace trs::experiment
