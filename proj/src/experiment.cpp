#include "trs/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "trs/format.hpp"
#include "trs/transfer.hpp"

#ifndef TRS_VERSION
#define TRS_VERSION "unknown"
#endif

namespace trs::experiment {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

struct Entry {
  std::string key, value;
  int line = 0;
};

struct Section {
  std::string name, arg;
  int line = 0;
  std::vector<Entry> entries;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

class Reader {
 public:
  Reader(std::string source, const Entry& e) : where_(std::move(source) + ":" + std::to_string(e.line) + ": "), e_(e) {}

  [[noreturn]] void fail(const std::string& msg) const {
    throw std::invalid_argument(where_ + "'" + e_.key + "': " + msg);
  }

  double real() const { return real(e_.value); }
  double real(const std::string& s) const {
    double v = 0.0;
    const std::string t = trim(s);
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty()) fail("expected a number, got '" + s + "'");
    return v;
  }
  std::size_t count() const { return count(e_.value); }
  std::size_t count(const std::string& s) const {
    std::size_t v = 0;
    const std::string t = trim(s);
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty()) fail("expected a non-negative integer, got '" + s + "'");
    return v;
  }
  bool boolean() const {
    if (e_.value == "true") return true;
    if (e_.value == "false") return false;
    fail("expected true or false");
  }
  std::vector<std::string> list() const {
    std::vector<std::string> out;
    std::stringstream ss(e_.value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    if (out.empty() || std::any_of(out.begin(), out.end(), [](const auto& s) { return s.empty(); })) {
      fail("expected a comma-separated list");
    }
    return out;
  }
  std::vector<double> reals() const {
    std::vector<double> out;
    for (const auto& s : list()) out.push_back(real(s));
    return out;
  }
  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> out;
    for (const auto& s : list()) out.push_back(count(s));
    return out;
  }
  const std::string& text() const { return e_.value; }
  // Runs a parser that throws std::invalid_argument and re-tags the message.
  template <class Fn>
  auto wrap(Fn&& fn) const {
    try {
      return fn(e_.value);
    } catch (const std::invalid_argument& ex) {
      fail(ex.what());
    }
  }

 private:
  std::string where_;
  const Entry& e_;
};

using Handlers = std::map<std::string, std::function<void(const Reader&)>>;

void apply(const Section& s, const Handlers& h, const std::string& source) {
  std::set<std::string> seen;
  for (const auto& e : s.entries) {
    const auto it = h.find(e.key);
    if (it == h.end()) {
      throw std::invalid_argument(source + ":" + std::to_string(e.line) + ": unknown key '" + e.key +
                                  "' in section [" + s.name + "]");
    }
    if (!seen.insert(e.key).second) {
      throw std::invalid_argument(source + ":" + std::to_string(e.line) + ": duplicate key '" + e.key + "'");
    }
    it->second(Reader(source, e));
  }
}

std::vector<Section> split_sections(std::istream& in, const std::string& source) {
  std::vector<Section> out;
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw std::invalid_argument(source + ":" + std::to_string(line) + ": malformed section");
      const std::string inner = trim(s.substr(1, s.size() - 2));
      const auto space = inner.find(' ');
      Section sec;
      sec.name = inner.substr(0, space);
      sec.arg = space == std::string::npos ? "" : trim(inner.substr(space + 1));
      sec.line = line;
      out.push_back(std::move(sec));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(source + ":" + std::to_string(line) + ": expected key = value");
    if (out.empty()) throw std::invalid_argument(source + ":" + std::to_string(line) + ": entry outside a section");
    out.back().entries.push_back(Entry{trim(s.substr(0, eq)), trim(s.substr(eq + 1)), line});
  }
  return out;
}

NamedAttack build_attack(const Section& s, const std::string& source) {
  if (s.arg.empty()) throw std::invalid_argument(source + ":" + std::to_string(s.line) + ": attack section needs a name");
  attacks::Method method = attacks::Method::pgd;
  for (const auto& e : s.entries) {
    if (e.key == "method") method = Reader(source, e).wrap([](const std::string& v) { return attacks::parse_method(v); });
  }
  NamedAttack a;
  a.name = s.arg;
  a.spec = attacks::AttackSpec::defaults(method, 0.3);
  a.epsilons = {a.spec.epsilon};
  auto& sp = a.spec;
  const Handlers h{
      {"method", [](const Reader&) {}},
      {"epsilons", [&](const Reader& r) { a.epsilons = r.reals(); }},
      {"norm", [&](const Reader& r) { sp.norm = r.wrap([](const std::string& v) { return attacks::parse_norm(v); }); }},
      {"steps", [&](const Reader& r) { sp.steps = r.count(); }},
      {"step_size", [&](const Reader& r) { sp.step_size = r.real(); }},
      {"restarts", [&](const Reader& r) { sp.restarts = r.count(); }},
      {"momentum", [&](const Reader& r) { sp.momentum = r.real(); }},
      {"loss", [&](const Reader& r) { sp.loss = r.wrap([](const std::string& v) { return attacks::parse_attack_loss(v); }); }},
      {"targeted", [&](const Reader& r) { sp.targeted = r.boolean(); }},
      {"target", [&](const Reader& r) { sp.target = r.count(); }},
      {"c", [&](const Reader& r) { sp.c = r.real(); }},
      {"kappa", [&](const Reader& r) { sp.kappa = r.real(); }},
      {"l1_weight", [&](const Reader& r) { sp.l1_weight = r.real(); }},
      {"learning_rate", [&](const Reader& r) { sp.learning_rate = r.real(); }},
  };
  apply(s, h, source);
  return a;
}

}  // namespace

const NamedAttack& ExperimentConfig::attack(const std::string& name) const {
  for (const auto& a : attacks) {
    if (a.name == name) return a;
  }
  throw std::invalid_argument("config: no attack section named '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (data.kind != "idx") {
    data::parse_synthetic_kind(data.kind);
    if (data.train == 0 || data.test == 0) throw std::invalid_argument("config: train and test sizes must be positive");
  } else {
    for (const auto& p : {data.images, data.labels, data.test_images, data.test_labels}) {
      if (p.empty()) throw std::invalid_argument("config: idx data needs images, labels, test_images, test_labels");
      if (!fs::exists(p)) throw std::invalid_argument("config: file not found: " + p.string());
    }
  }
  if (model.members == 0) throw std::invalid_argument("config: members must be positive");
  for (auto w : model.hidden) {
    if (w == 0) throw std::invalid_argument("config: hidden widths must be positive");
  }
  if (modes.empty()) throw std::invalid_argument("config: no training modes");
  std::set<training::Mode> unique(modes.begin(), modes.end());
  if (unique.size() != modes.size()) throw std::invalid_argument("config: duplicate training mode");
  for (auto m : modes) {
    auto tc = train;
    tc.mode = m;
    tc.validate();
  }
  std::set<std::string> names;
  for (const auto& a : attacks) {
    if (!names.insert(a.name).second) throw std::invalid_argument("config: duplicate attack '" + a.name + "'");
    if (a.epsilons.empty()) throw std::invalid_argument("config: attack '" + a.name + "' has no epsilons");
    for (double e : a.epsilons) {
      auto s = a.spec;
      s.epsilon = e;
      s.validate();
    }
  }
  if (!transfer.attack.empty()) attack(transfer.attack);
  if (!bounds.attack.empty()) attack(bounds.attack);
  if (bounds.points == 0) throw std::invalid_argument("config: bounds points must be positive");
  if (boundary.resolution == 0 || !(boundary.half_width > 0)) {
    throw std::invalid_argument("config: boundary needs resolution >= 1 and half_width > 0");
  }
}

ExperimentConfig parse_config(std::istream& in, const std::string& source) {
  ExperimentConfig cfg;
  cfg.train.epochs = 60;
  cfg.train.learning_rate = 0.1;
  cfg.train.batch_size = 32;
  auto& t = cfg.train;
  const Handlers experiment{
      {"seed", [&](const Reader& r) { cfg.seed = r.count(); }},
      {"out", [&](const Reader& r) { cfg.out = r.text(); }},
  };
  const Handlers data{
      {"kind", [&](const Reader& r) { cfg.data.kind = r.text(); }},
      {"train", [&](const Reader& r) { cfg.data.train = r.count(); }},
      {"test", [&](const Reader& r) { cfg.data.test = r.count(); }},
      {"noise", [&](const Reader& r) { cfg.data.noise = r.real(); }},
      {"images", [&](const Reader& r) { cfg.data.images = r.text(); }},
      {"labels", [&](const Reader& r) { cfg.data.labels = r.text(); }},
      {"test_images", [&](const Reader& r) { cfg.data.test_images = r.text(); }},
      {"test_labels", [&](const Reader& r) { cfg.data.test_labels = r.text(); }},
      {"limit", [&](const Reader& r) { cfg.data.limit = r.count(); }},
  };
  const Handlers model{
      {"members", [&](const Reader& r) { cfg.model.members = r.count(); }},
      {"hidden", [&](const Reader& r) { cfg.model.hidden = r.counts(); }},
      {"activation",
       [&](const Reader& r) {
         cfg.model.activation = r.wrap([](const std::string& v) { return models::parse_activation(v); });
       }},
  };
  const Handlers train{
      {"modes",
       [&](const Reader& r) {
         cfg.modes.clear();
         for (const auto& s : r.list()) cfg.modes.push_back(r.wrap([&](const std::string&) { return training::parse_mode(s); }));
       }},
      {"epochs", [&](const Reader& r) { t.epochs = r.count(); }},
      {"lambda_a", [&](const Reader& r) { t.lambda_a = r.real(); }},
      {"lambda_b", [&](const Reader& r) { t.lambda_b = r.real(); }},
      {"delta_0", [&](const Reader& r) { t.delta_0 = r.real(); }},
      {"delta_M", [&](const Reader& r) { t.delta_M = r.real(); }},
      {"inner_steps", [&](const Reader& r) { t.inner_steps = r.count(); }},
      {"optimizer",
       [&](const Reader& r) { t.optimizer = r.wrap([](const std::string& v) { return training::parse_optimizer(v); }); }},
      {"learning_rate", [&](const Reader& r) { t.learning_rate = r.real(); }},
      {"adam_beta1", [&](const Reader& r) { t.adam_beta1 = r.real(); }},
      {"adam_beta2", [&](const Reader& r) { t.adam_beta2 = r.real(); }},
      {"adam_eps", [&](const Reader& r) { t.adam_eps = r.real(); }},
      {"lr_milestones", [&](const Reader& r) { t.lr_milestones = r.reals(); }},
      {"lr_decay", [&](const Reader& r) { t.lr_decay = r.real(); }},
      {"batch_size", [&](const Reader& r) { t.batch_size = r.count(); }},
      {"adv_epsilon", [&](const Reader& r) { t.adv_epsilon = r.real(); }},
      {"adv_steps", [&](const Reader& r) { t.adv_steps = r.count(); }},
      {"gal_weight", [&](const Reader& r) { t.gal_weight = r.real(); }},
  };
  const Handlers transfer{
      {"attack", [&](const Reader& r) { cfg.transfer.attack = r.text(); }},
      {"epsilon", [&](const Reader& r) { cfg.transfer.epsilon = r.real(); }},
  };
  const Handlers bounds{
      {"attack", [&](const Reader& r) { cfg.bounds.attack = r.text(); }},
      {"epsilon", [&](const Reader& r) { cfg.bounds.epsilon = r.real(); }},
      {"points", [&](const Reader& r) { cfg.bounds.points = r.count(); }},
      {"surrogate", [&](const Reader& r) { cfg.bounds.surrogate = r.count(); }},
      {"target", [&](const Reader& r) { cfg.bounds.target = r.count(); }},
      {"beta_radius", [&](const Reader& r) { cfg.bounds.estimation.beta_radius = r.real(); }},
      {"beta_samples", [&](const Reader& r) { cfg.bounds.estimation.beta_samples = r.count(); }},
  };
  const Handlers boundary{
      {"resolution", [&](const Reader& r) { cfg.boundary.resolution = r.count(); }},
      {"half_width", [&](const Reader& r) { cfg.boundary.half_width = r.real(); }},
      {"point", [&](const Reader& r) { cfg.boundary.point = r.count(); }},
  };
  const std::map<std::string, const Handlers*> fixed{
      {"experiment", &experiment}, {"data", &data},         {"model", &model},
      {"train", &train},           {"transfer", &transfer}, {"bounds", &bounds},
      {"boundary", &boundary},
  };

  std::set<std::string> seen;
  for (const auto& s : split_sections(in, source)) {
    if (s.name == "attack") {
      cfg.attacks.push_back(build_attack(s, source));
      continue;
    }
    const auto it = fixed.find(s.name);
    if (it == fixed.end()) {
      throw std::invalid_argument(source + ":" + std::to_string(s.line) + ": unknown section [" + s.name + "]");
    }
    if (!s.arg.empty() || !seen.insert(s.name).second) {
      throw std::invalid_argument(source + ":" + std::to_string(s.line) + ": repeated or named section [" + s.name + "]");
    }
    apply(s, *it->second, source);
  }
  if (!cfg.attacks.empty()) {
    if (cfg.transfer.attack.empty()) cfg.transfer.attack = cfg.attacks.front().name;
    if (cfg.bounds.attack.empty()) cfg.bounds.attack = cfg.attacks.front().name;
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  return parse_config(in, path.string());
}

// ---------------------------------------------------------------------------
// Seeds, data, helpers

Seeds derive_seeds(std::uint64_t global) {
  const auto lo = static_cast<std::uint32_t>(global), hi = static_cast<std::uint32_t>(global >> 32);
  std::seed_seq seq{lo, hi, 0x7452u};
  std::uint32_t w[14];
  seq.generate(std::begin(w), std::end(w));
  auto pick = [&](int i) { return (std::uint64_t{w[2 * i]} << 32) | w[2 * i + 1]; };
  return Seeds{pick(0), pick(1), pick(2), pick(3), pick(4), pick(5), pick(6)};
}

Datasets make_datasets(const ExperimentConfig& cfg) {
  const Seeds s = derive_seeds(cfg.seed);
  Datasets out;
  if (cfg.data.kind == "idx") {
    out.train = data::load_idx(cfg.data.images, cfg.data.labels, cfg.data.limit);
    out.test = data::load_idx(cfg.data.test_images, cfg.data.test_labels, cfg.data.limit);
  } else {
    // One draw split in two, so train and test share the feature transform.
    const auto all = data::generate_synthetic(data::parse_synthetic_kind(cfg.data.kind), cfg.data.train + cfg.data.test,
                                              cfg.data.noise, s.data_train);
    std::tie(out.train, out.test) = data::split(all, cfg.data.train, s.data_test);
  }
  out.train.validate();
  out.test.validate();
  return out;
}

std::string mode_file_name(training::Mode m) {
  std::string s = training::to_string(m);
  std::replace(s.begin(), s.end(), '+', '_');
  std::replace(s.begin(), s.end(), '-', '_');
  return s;
}

std::size_t threads_from_env() {
  const char* v = std::getenv("TRS_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw std::invalid_argument("TRS_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

namespace {

// Runs fn(0..n-1) on up to `threads` workers; rethrows the first failure by
// index so error reporting does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t k = std::min(threads, n);
  if (k <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < k; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

std::vector<const models::Classifier*> member_ptrs(const models::Ensemble& e) {
  std::vector<const models::Classifier*> out;
  for (const auto& m : e.members()) out.push_back(&m);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Decision-boundary grids

std::size_t BoundaryGrid::label_changes() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      const auto l = labels[i * resolution + j];
      if (i + 1 < resolution && labels[(i + 1) * resolution + j] != l) ++n;
      if (j + 1 < resolution && labels[i * resolution + j + 1] != l) ++n;
    }
  }
  return n;
}

BoundaryGrid emit_boundary_grid(const models::Classifier& model, const Tensor& x_row, std::size_t y,
                                std::size_t resolution, double half_width, std::uint64_t seed) {
  const std::size_t d = x_row.cols();
  if (x_row.rows() != 1) throw std::invalid_argument("emit_boundary_grid: expected a single row");
  if (d < 2) throw std::invalid_argument("emit_boundary_grid: input dimension must be >= 2");
  if (resolution == 0 || !(half_width > 0)) throw std::invalid_argument("emit_boundary_grid: bad grid size");
  const std::size_t label[] = {y};
  const auto g = models::input_gradient(model, x_row, label);
  if (g.degenerate[0]) throw std::invalid_argument("emit_boundary_grid: degenerate gradient at x");

  BoundaryGrid grid;
  grid.resolution = resolution;
  grid.half_width = half_width;
  grid.d_grad = (-1.0 / l2_norm(g.grads)) * g.grads;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor r;
  do {
    std::vector<double> v(d);
    for (auto& e : v) e = gauss(rng);
    r = Tensor::row(std::move(v));
    r = r - dot(r, grid.d_grad) * grid.d_grad;
  } while (l2_norm(r) < 1e-6);
  r = (1.0 / l2_norm(r)) * r;
  r = r - dot(r, grid.d_grad) * grid.d_grad;  // second pass for round-off
  grid.d_orth = (1.0 / l2_norm(r)) * r;

  std::vector<double> coords(resolution, 0.0);
  for (std::size_t i = 0; i < resolution && resolution > 1; ++i) {
    coords[i] = std::lerp(-half_width, half_width, static_cast<double>(i) / static_cast<double>(resolution - 1));
  }
  std::vector<double> pts;
  pts.reserve(resolution * resolution * d);
  for (double u : coords) {
    for (double v : coords) {
      grid.u.push_back(u);
      grid.v.push_back(v);
      for (std::size_t j = 0; j < d; ++j) pts.push_back(x_row[j] + u * grid.d_grad[j] + v * grid.d_orth[j]);
    }
  }
  grid.labels = models::predict_labels(model, Tensor({resolution * resolution, d}, std::move(pts)));
  return grid;
}

void write_grid_csv(std::ostream& out, const BoundaryGrid& grid) {
  out << "u,v,label\n";
  for (std::size_t i = 0; i < grid.labels.size(); ++i) {
    out << format_double(grid.u[i]) << ',' << format_double(grid.v[i]) << ',' << grid.labels[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Stages

Experiment::Experiment(ExperimentConfig cfg, std::size_t threads)
    : cfg_(std::move(cfg)), threads_(std::max<std::size_t>(1, threads)), seeds_(derive_seeds(cfg_.seed)) {
  cfg_.validate();
  data_ = make_datasets(cfg_);
  fs::create_directories(cfg_.out);
}

template <class Fn>
void Experiment::stage(const std::string& name, Fn&& fn) {
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
  stages_done_.push_back(name);
  write_manifest();
}

fs::path Experiment::checkpoint_path(training::Mode m) const {
  return cfg_.out / "checkpoints" / (mode_file_name(m) + ".ckpt");
}

const std::map<training::Mode, models::Ensemble>& Experiment::ensembles() {
  for (auto m : cfg_.modes) {
    if (ensembles_.count(m)) continue;
    const auto p = checkpoint_path(m);
    if (!fs::exists(p)) throw std::runtime_error("missing checkpoint " + p.string() + " (run the train stage first)");
    ensembles_.emplace(m, models::load_checkpoint(p));
  }
  return ensembles_;
}

void Experiment::train() {
  stage("train", [&] {
    fs::create_directories(cfg_.out / "checkpoints");
    std::vector<std::size_t> layers{data_.train.dim()};
    layers.insert(layers.end(), cfg_.model.hidden.begin(), cfg_.model.hidden.end());
    layers.push_back(data_.train.num_classes);

    const auto& modes = cfg_.modes;
    std::vector<std::optional<models::Ensemble>> trained(modes.size());
    std::vector<std::vector<training::EpochMetrics>> metrics(modes.size());
    parallel_for(modes.size(), threads_, [&](std::size_t k) {
      auto tc = cfg_.train;
      tc.mode = modes[k];
      tc.seed = seeds_.shuffle;
      tc.box = data_.train.box;
      // Every mode starts from the same initial members.
      std::vector<models::MlpClassifier> members;
      for (std::size_t i = 0; i < cfg_.model.members; ++i) {
        members.push_back(models::MlpClassifier::initialize(layers, cfg_.model.activation, seeds_.init + i));
      }
      training::Trainer trainer(models::Ensemble(std::move(members)), tc);
      metrics[k] = trainer.fit(data_.train);
      trained[k] = trainer.ensemble();
    });
    for (std::size_t k = 0; k < modes.size(); ++k) {
      ensembles_.insert_or_assign(modes[k], *trained[k]);
      models::save_checkpoint(checkpoint_path(modes[k]), *trained[k]);
      const auto name = "metrics_" + mode_file_name(modes[k]) + ".csv";
      auto out = open_out(cfg_.out / name);
      training::write_metrics_csv(out, metrics[k]);
      files_.push_back(name);
      files_.push_back("checkpoints/" + mode_file_name(modes[k]) + ".ckpt");
    }
  });
}

void Experiment::attack() {
  stage("attack", [&] {
    const auto& ens = ensembles();
    rows_.clear();
    std::vector<attacks::AttackSpec> specs;
    for (const auto& a : cfg_.attacks) {
      for (double e : a.epsilons) {
        rows_.push_back(RobustRow{a.name, e});
        auto s = a.spec;
        s.epsilon = e;
        s.seed = seeds_.attack;
        s.box = data_.test.box;
        specs.push_back(s);
      }
    }
    const auto& modes = cfg_.modes;
    std::vector<std::vector<double>> acc(modes.size(), std::vector<double>(specs.size()));
    parallel_for(modes.size() * specs.size(), threads_, [&](std::size_t idx) {
      const std::size_t k = idx / specs.size(), r = idx % specs.size();
      const auto& model = ens.at(modes[k]);
      const auto batch = attacks::run_attack(model, data_.test.inputs, data_.test.labels, specs[r]);
      acc[k][r] = models::accuracy(model, batch.adversarials, data_.test.labels);
    });
    for (std::size_t k = 0; k < modes.size(); ++k) robust_[modes[k]] = acc[k];

    auto out = open_out(cfg_.out / "robust_accuracy.csv");
    out << "attack,epsilon";
    for (auto m : modes) out << ',' << training::to_string(m);
    out << '\n';
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      out << rows_[r].attack << ',' << format_double(rows_[r].epsilon);
      for (std::size_t k = 0; k < modes.size(); ++k) out << ',' << format_double(acc[k][r]);
      out << '\n';
    }
    files_.push_back("robust_accuracy.csv");
  });
}

void Experiment::transfer() {
  stage("transfer", [&] {
    if (cfg_.transfer.attack.empty()) throw std::invalid_argument("no attack configured");
    const auto& ens = ensembles();
    auto spec = cfg_.attack(cfg_.transfer.attack).spec;
    spec.epsilon = cfg_.transfer.epsilon;
    spec.seed = seeds_.attack;
    spec.box = data_.test.box;
    const auto& modes = cfg_.modes;
    std::vector<transfer::TransferMatrix> mats(modes.size());
    parallel_for(modes.size(), threads_, [&](std::size_t k) {
      const auto& e = ens.at(modes[k]);
      const auto ptrs = member_ptrs(e);
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < e.size(); ++i) ids.push_back("m" + std::to_string(i));
      mats[k] = transfer::transfer_matrix(ptrs, ids, data_.test, spec);
    });
    for (std::size_t k = 0; k < modes.size(); ++k) {
      transfer_rate_[modes[k]] = mats[k].ids.size() > 1 ? mats[k].off_diagonal_mean() : 0.0;
      const auto name = "transfer_" + mode_file_name(modes[k]) + ".csv";
      auto out = open_out(cfg_.out / name);
      transfer::write_matrix_csv(out, mats[k]);
      files_.push_back(name);
    }
  });
}

void Experiment::bounds() {
  stage("bounds", [&] {
    if (cfg_.bounds.attack.empty()) throw std::invalid_argument("no attack configured");
    const auto& ens = ensembles();
    auto spec = cfg_.attack(cfg_.bounds.attack).spec;
    spec.epsilon = cfg_.bounds.epsilon;
    spec.seed = seeds_.attack;
    spec.box = data_.test.box;
    std::vector<std::size_t> idx(std::min(cfg_.bounds.points, data_.test.size()));
    std::iota(idx.begin(), idx.end(), 0);
    const auto sub = data::subset(data_.test, idx);
    auto est = cfg_.bounds.estimation;
    est.seed = seeds_.bounds;

    const auto& modes = cfg_.modes;
    std::vector<std::string> reports(modes.size());
    parallel_for(modes.size(), threads_, [&](std::size_t k) {
      const auto& e = ens.at(modes[k]);
      if (std::max(cfg_.bounds.surrogate, cfg_.bounds.target) >= e.size() ||
          cfg_.bounds.surrogate == cfg_.bounds.target) {
        return;
      }
      const auto rep = bounds::evaluate_bounds(e.member(cfg_.bounds.surrogate), e.member(cfg_.bounds.target), sub,
                                               spec, est);
      reports[k] = bounds::to_json(rep, -1);
    });
    nlohmann::json doc = nlohmann::json::object();
    doc["surrogate"] = cfg_.bounds.surrogate;
    doc["target"] = cfg_.bounds.target;
    for (std::size_t k = 0; k < modes.size(); ++k) {
      doc["reports"][training::to_string(modes[k])] =
          reports[k].empty() ? nlohmann::json(nullptr) : nlohmann::json::parse(reports[k]);
    }
    auto out = open_out(cfg_.out / "bounds.json");
    out << doc.dump(2) << '\n';
    files_.push_back("bounds.json");
  });
}

void Experiment::boundary() {
  stage("boundary", [&] {
    const auto& ens = ensembles();
    const auto i = cfg_.boundary.point;
    if (i >= data_.test.size()) throw std::invalid_argument("boundary point index out of range");
    for (auto m : cfg_.modes) {
      const auto grid = emit_boundary_grid(ens.at(m), data_.test.inputs.row_at(i), data_.test.labels[i],
                                           cfg_.boundary.resolution, cfg_.boundary.half_width, seeds_.boundary);
      boundary_changes_[m] = grid.label_changes();
      const auto name = "boundary_" + mode_file_name(m) + ".csv";
      auto out = open_out(cfg_.out / name);
      write_grid_csv(out, grid);
      files_.push_back(name);
    }
  });
}

void Experiment::report() {
  if (robust_.size() != cfg_.modes.size()) attack();
  if (transfer_rate_.size() != cfg_.modes.size() && !cfg_.transfer.attack.empty()) transfer();
  if (boundary_changes_.size() != cfg_.modes.size()) boundary();
  stage("report", [&] {
    const auto& ens = ensembles();
    summary_.clear();
    for (auto m : cfg_.modes) {
      const auto& e = ens.at(m);
      ModeSummary s;
      s.mode = m;
      s.clean_accuracy = models::accuracy(e, data_.test.inputs, data_.test.labels);
      s.mean_abs_cos = e.size() > 1 ? training::diversity(e, data_.test.inputs, data_.test.labels).mean_abs_cos : 1.0;
      s.transfer_rate = transfer_rate_.count(m) ? transfer_rate_.at(m) : 0.0;
      s.boundary_changes = boundary_changes_.at(m);
      s.robust = robust_.at(m);
      summary_.push_back(std::move(s));
    }
    auto out = open_out(cfg_.out / "summary.csv");
    out << "mode,clean_accuracy,mean_abs_cos,transfer_rate,boundary_changes";
    for (const auto& r : rows_) out << ',' << r.attack << '@' << format_double(r.epsilon);
    out << '\n';
    for (const auto& s : summary_) {
      out << training::to_string(s.mode) << ',' << format_double(s.clean_accuracy) << ','
          << format_double(s.mean_abs_cos) << ',' << format_double(s.transfer_rate) << ',' << s.boundary_changes;
      for (double v : s.robust) out << ',' << format_double(v);
      out << '\n';
    }
    files_.push_back("summary.csv");
  });
}

void Experiment::all() {
  train();
  attack();
  transfer();
  bounds();
  boundary();
  report();
}

void Experiment::write_manifest() {
  const auto path = cfg_.out / "manifest.json";
  nlohmann::json doc;
  std::vector<std::string> stages, files;
  if (fs::exists(path)) {
    try {
      std::ifstream in(path);
      const auto old = nlohmann::json::parse(in);
      if (old.value("seed", cfg_.seed + 1) == cfg_.seed) {
        stages = old.value("stages", stages);
        files = old.value("files", files);
      }
    } catch (const std::exception&) {
      // Unreadable manifest: start a fresh one.
    }
  }
  for (const auto& s : stages_done_) {
    if (std::find(stages.begin(), stages.end(), s) == stages.end()) stages.push_back(s);
  }
  for (const auto& f : files_) {
    if (std::find(files.begin(), files.end(), f) == files.end()) files.push_back(f);
  }
  doc["version"] = TRS_VERSION;
  doc["seed"] = cfg_.seed;
  doc["seeds"] = {{"data_train", seeds_.data_train}, {"data_test", seeds_.data_test},
                  {"init", seeds_.init},             {"shuffle", seeds_.shuffle},
                  {"attack", seeds_.attack},         {"bounds", seeds_.bounds},
                  {"boundary", seeds_.boundary}};
  doc["data"] = {{"provenance", data_.train.provenance}, {"train", data_.train.size()}, {"test", data_.test.size()}};
  std::vector<std::string> modes;
  for (auto m : cfg_.modes) modes.push_back(training::to_string(m));
  doc["modes"] = modes;
  doc["members"] = cfg_.model.members;
  doc["stages"] = stages;
  doc["files"] = files;
  auto out = open_out(path);
  out << doc.dump(2) << '\n';
}

}  // namespace trs::experiment
