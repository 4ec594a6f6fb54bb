#include <iostream>

#include <CLI11.hpp>

#include "moesim/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Discrete-event simulator for MoE expert prefetching"};
  app.require_subcommand(1);

  moesim::CommandOptions opts;
  std::uint64_t seed = 0;
  std::string preset;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opts.config, "experiment config (JSON)")->required();
    cmd->add_option("--seed", seed, "root seed, overrides the config");
    cmd->add_option("--out-dir", opts.out_dir, "directory for output files");
    cmd->add_option("--preset", preset, "device preset supplying the link bandwidth");
  };

  auto* simulate = app.add_subcommand("simulate", "run every policy on every workload");
  add_common(simulate);
  simulate->add_flag("--emit-events", opts.emit_events, "dump per-run event and cache traces");

  auto* compare = app.add_subcommand("compare", "paired comparison against the first policy");
  add_common(compare);
  compare->add_flag("--emit-events", opts.emit_events, "dump per-run event and cache traces");

  auto* train = app.add_subcommand("train", "train the activation predictor from a log");
  add_common(train);
  train->add_option("--log", opts.log, "activation log")->required();
  train->add_option("--model", opts.model_out, "output model file (default forest.model_path, else <out-dir>/forest.bin)");

  auto* fit = app.add_subcommand("fit", "fit exponential decay curves to an accuracy CSV");
  fit->add_option("--csv", opts.csv, "accuracy CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? moesim::kExitOk : moesim::kExitUsage;
  }
  for (auto* cmd : {simulate, compare, train}) {
    if (cmd->count("--seed") > 0) opts.overrides.seed = seed;
    if (cmd->count("--preset") > 0) opts.overrides.preset = preset;
  }

  if (*simulate) return moesim::cmd_simulate(opts, std::cout, std::cerr);
  if (*compare) return moesim::cmd_compare(opts, std::cout, std::cerr);
  if (*train) return moesim::cmd_train(opts, std::cout, std::cerr);
  return moesim::cmd_fit(opts, std::cout, std::cerr);
}
