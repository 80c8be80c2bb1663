#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uada/commands.hpp"

// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

int main(int argc, char** argv) {
  CLI::App app{"synthetic lidar detection and domain adaptation workbench"};
  app.require_subcommand(1);

  uada::GenOptions gen;
  auto* cgen = app.add_subcommand("gen", "generate a dataset from a profile");
  cgen->add_option("profile", gen.profile, "builtin profile name")->required();
  cgen->add_option("n_scenes", gen.n_scenes, "number of scenes")->required();
  cgen->add_option("--seed", gen.seed, "rng seed");
  cgen->add_option("--out", gen.out_dir, "output directory")->required();
  cgen->add_flag("--force", gen.force, "overwrite a non-empty directory");
  cgen->add_option("--jobs", gen.jobs, "generation threads");

  std::string train_config;
  int train_jobs = 1;
  auto* ctrain = app.add_subcommand("train", "train a detector from a config");
  ctrain->add_option("config", train_config, "run config file")->required();
  ctrain->add_option("--jobs", train_jobs, "per-class AP threads");

  uada::EvalCmdOptions eval;
  auto* ceval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ceval->add_option("checkpoint", eval.checkpoint, "checkpoint file")->required();
  ceval->add_option("dataset", eval.dataset, "dataset directory")->required();
  ceval->add_option("--out", eval.out_dir, "output directory")->required();
  ceval->add_option("--jobs", eval.jobs, "per-class AP threads");

  std::string stats_dataset, stats_out;
  auto* cstats = app.add_subcommand("stats", "dataset label statistics");
  cstats->add_option("dataset", stats_dataset, "dataset directory")->required();
  cstats->add_option("--out", stats_out, "output directory")->required();

  uada::CompareOptions cmp;
  auto* ccmp = app.add_subcommand("compare", "tabulate runs against baselines");
  ccmp->add_option("--source", cmp.source_csv, "source-only metrics csv")
      ->required();
  ccmp->add_option("--oracle", cmp.oracle_csv, "oracle metrics csv")->required();
  ccmp->add_option("adapted", cmp.adapted_csvs, "adapted metrics csvs")
      ->required();
  ccmp->add_option("--out", cmp.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (cgen->parsed()) {
      uada::cmd_gen(gen, std::cout);
    } else if (ctrain->parsed()) {
      uada::cmd_train(train_config, train_jobs, std::cout);
    } else if (ceval->parsed()) {
      uada::cmd_eval(eval, std::cout);
    } else if (cstats->parsed()) {
      uada::cmd_stats(stats_dataset, stats_out, std::cout);
    } else if (ccmp->parsed()) {
      uada::cmd_compare(cmp, std::cout);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
