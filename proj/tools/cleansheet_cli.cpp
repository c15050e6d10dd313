#include "cleansheet/experiment.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

using namespace cleansheet;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool fp64 = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (YAML)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--out", f.out, "output root (default: output_dir from the config)");
  cmd->add_flag("--verify-fp64", f.fp64, "64-bit deterministic arithmetic");
}

int execute(Command command, const CommonFlags& f, RunOptions options) {
  ExperimentConfig config = load_experiment_config(f.config);
  if (f.seed) config.seed = *f.seed;
  options.command = command;
  options.fp64 = f.fp64;
  options.output_root = f.out;
  const RunOutcome outcome = run_experiment(config, options);
  for (const auto& c : outcome.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  }
  std::cout << outcome.directory.string() << '\n';
  return outcome.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trigger synthesis from clean data, with attack and defense evaluation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "only warnings and errors on stderr");

  CommonFlags flags;
  RunOptions options;
  std::string ensemble;
  std::string trigger;
  std::vector<std::string> targets;
  std::string plot_dir;

  auto* train = app.add_subcommand("train-substitutes", "train the substitute ensemble by competitive distillation");
  auto* gen = app.add_subcommand("gen-trigger", "train substitutes and optimise the trigger");
  auto* attack = app.add_subcommand("eval-attack", "evaluate a trigger against target models");
  auto* defense = app.add_subcommand("eval-defense", "run the defense battery against a trigger");
  auto* split = app.add_subcommand("split-data", "write the attacker/user split plan");
  auto* run = app.add_subcommand("run", "full pipeline");
  auto* plot = app.add_subcommand("plot", "render SVG figures for a finished run directory");
  for (auto* cmd : {train, gen, attack, defense, split, run}) add_common(cmd, flags);
  gen->add_option("--ensemble", ensemble, "start from a saved ensemble directory")->check(CLI::ExistingDirectory);
  for (auto* cmd : {attack, defense}) {
    cmd->add_option("--trigger", trigger, "trigger archive")->required()->check(CLI::ExistingFile);
    cmd->add_option("--target", targets, "target checkpoint(s) instead of the config's targets")
        ->check(CLI::ExistingFile);
  }
  attack->add_option("--ensemble", ensemble, "substitutes for the UAP baseline")->check(CLI::ExistingDirectory);
  plot->add_option("run_dir", plot_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
  options.ensemble_dir = ensemble;
  options.trigger_path = trigger;
  for (const auto& t : targets) options.target_paths.emplace_back(t);

  try {
    if (*plot) {
      for (const auto& p : emit_plots(plot_dir)) std::cout << p.string() << '\n';
      return 0;
    }
    const std::vector<std::pair<CLI::App*, Command>> table{{train, Command::train_substitutes},
                                                           {gen, Command::gen_trigger},
                                                           {attack, Command::eval_attack},
                                                           {defense, Command::eval_defense},
                                                           {split, Command::split_data},
                                                           {run, Command::run}};
    for (const auto& [cmd, command] : table) {
      if (*cmd) return execute(command, flags, options);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
