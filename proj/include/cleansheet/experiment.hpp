#pragma once

// Experiment orchestration: YAML configuration, the staged pipeline behind
// each CLI command, report files and static SVG figures.

#include "cleansheet/attack_eval.hpp"
#include "cleansheet/defenses.hpp"
#include "cleansheet/partition.hpp"
#include "cleansheet/smaml.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cleansheet {

struct DatasetConfig {
  std::string source = "synthetic-shapes";  // synthetic-shapes | blobs | cifar10-binary
  int num_classes = 2;
  int image_size = 16;  // synthetic-shapes
  int dims = 8;         // blobs
  double noise = 0.08;
  double distractor_prob = 0.3;
  double spread = 0.06;
  Index train = 1600;
  Index val = 200;
  Index test = 400;
  std::string path;          // cifar10-binary
  std::vector<int> classes;  // cifar10-binary
  std::optional<std::uint64_t> seed;  // defaults to a stream of the run seed

  void validate() const;
};

struct TargetEntry {
  std::optional<ModelSpec> spec;
  std::string checkpoint;
};

struct UapSettings {
  bool enabled = false;
  double epsilon = 0.1;
  int steps = 200;
  double step_size = 0.005;
};

struct AttackSettings {
  int target_class = 0;
  NormType norm_type = NormType::l1;
  std::vector<double> transparency_grid = default_transparency_grid();
  std::vector<int> campaign_classes;
  UapSettings uap;
};

struct DefenseSettings {
  bool prune = false;
  PruneMethod prune_method = PruneMethod::magnitude;
  std::vector<double> prune_ratios{0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  bool fine_tune = false;
  FineTuneConfig fine_tune_config;
  bool nad = false;
  NadConfig nad_config;
  bool strip = false;
  int strip_overlays = 64;
  bool beatrix = false;
  BeatrixConfig beatrix_config;

  [[nodiscard]] bool any() const { return prune || fine_tune || nad || strip || beatrix; }
};

struct SplitSettings {
  std::string mode = "none";  // none | overlap | dirichlet
  FractionRange attacker{0.0, 1.0};
  FractionRange user{0.0, 1.0};
  double alpha = 0.5;
};

struct CheckSettings {
  bool enabled = true;
  double min_transfer_asr = 0.6;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DatasetConfig dataset;
  std::vector<ModelSpec> substitutes;  // num_classes filled from the dataset
  std::vector<TargetEntry> targets;
  TrainConfig target_training;
  DistillConfig distill;      // num_substitutes follows `substitutes`
  OptimizerSchedule schedule;  // iters_per_epoch 0: one pass over the attacker's data
  LambdaScheduler lambda;
  AttackSettings attack;
  DefenseSettings defenses;
  SplitSettings split;
  CheckSettings checks;

  // Throws ConfigError naming the offending key.
  void validate() const;
};

ExperimentConfig parse_experiment_config(const std::string& yaml_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string to_yaml(const ExperimentConfig& config);
Json to_json(const ExperimentConfig& config);
// First 16 hex digits of a 64-bit FNV-1a hash of the canonical JSON form.
std::string config_hash(const ExperimentConfig& config);

enum class Command { train_substitutes, gen_trigger, eval_attack, eval_defense, split_data, run };

std::string to_string(Command command);

struct RunOptions {
  Command command = Command::run;
  bool fp64 = false;
  std::filesystem::path output_root;         // empty: config.output_dir
  std::filesystem::path ensemble_dir;        // gen-trigger: start from these substitutes
  std::filesystem::path trigger_path;        // eval-attack / eval-defense
  std::vector<std::filesystem::path> target_paths;  // eval-*: pretrained targets instead of config targets
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct RunOutcome {
  std::filesystem::path directory;
  std::vector<CheckResult> checks;
  [[nodiscard]] bool passed() const;
};

// <root>/<command>-<seed>-<hash>; refuses to reuse an existing directory.
std::filesystem::path run_directory(const ExperimentConfig& config, const RunOptions& options);

// Runs the stages of `options.command`. On a stage failure, writes
// failure.json next to the partial artifacts and rethrows.
RunOutcome run_experiment(const ExperimentConfig& config, const RunOptions& options);

// SVG figures for the reports found in `artifact_dir`, written to
// artifact_dir/plots. Returns the files written.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& artifact_dir);

}  // namespace cleansheet
