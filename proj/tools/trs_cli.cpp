#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "trs/experiment.hpp"

using namespace trs::experiment;

int main(int argc, char** argv) {
  CLI::App app{"Train, attack and measure diversified ensembles"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;

  const char* stages[][2] = {
      {"train", "train every configured mode and write checkpoints and per-epoch metrics"},
      {"attack", "whitebox robust accuracy table for every attack and epsilon"},
      {"transfer", "member-to-member transfer matrices"},
      {"bounds", "estimate constants and evaluate the transferability bounds"},
      {"boundary", "decision-boundary grids around one test point"},
      {"report", "summary table (runs missing evaluation stages)"},
      {"all", "the full pipeline"},
  };
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s[0], s[1]);
    sub->add_option("--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed (overrides the config)");
    sub->add_option("--out", out, "output directory (overrides the config)");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  ExperimentConfig cfg;
  std::size_t threads = 1;
  try {
    cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    threads = threads_from_env();
  } catch (const std::exception& e) {
    std::cerr << "config: " << e.what() << '\n';
    return 1;
  }

  try {
    Experiment ex(cfg, threads);
    if (cmd == "train") ex.train();
    else if (cmd == "attack") ex.attack();
    else if (cmd == "transfer") ex.transfer();
    else if (cmd == "bounds") ex.bounds();
    else if (cmd == "boundary") ex.boundary();
    else if (cmd == "report") ex.report();
    else ex.all();

    if (cmd == "report" || cmd == "all") {
      for (const auto& s : ex.summary()) {
        std::cout << trs::training::to_string(s.mode) << ": clean " << s.clean_accuracy << ", |cos| "
                  << s.mean_abs_cos << ", transfer " << s.transfer_rate;
        for (std::size_t r = 0; r < s.robust.size(); ++r) {
          const auto& row = ex.robust_rows()[r];
          std::cout << ", " << row.attack << '@' << row.epsilon << ' ' << s.robust[r];
        }
        std::cout << '\n';
      }
    }
    std::cout << "outputs in " << cfg.out.string() << '\n';
  } catch (const StageError& e) {
    std::cerr << "stage " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "setup: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
