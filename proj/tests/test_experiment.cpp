#include "cleansheet/experiment.hpp"
#include "support.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <sstream>

using namespace cleansheet;
namespace ct = cleansheet::testing;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# small blobs run
seed: 3
output_dir: out
dataset:
  source: blobs
  num_classes: 2
  dims: 8
  train: 300
  val: 100
  test: 100
substitutes:
  - {family: mlp, depth: 1, width: 16}
  - {family: mlp, depth: 2, width: 16}
targets:
  - {family: mlp, depth: 2, width: 24}
target_training:
  learning_rate: 0.05
  epochs: 4
  batch_size: 30
distill:
  learning_rate: 0.05
  batch_size: 30
schedule:
  max_epochs: 3
  iters_per_epoch: 30
  trigger_lr: 0.05
attack:
  target_class: 1
  norm_type: L2
defenses:
  prune: {enabled: false}
checks:
  enabled: true
  min_transfer_asr: 0.5
)";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Quiet : public ::testing::Environment {
 public:
  void SetUp() override { spdlog::set_level(spdlog::level::warn); }
};

const auto* const kQuiet = ::testing::AddGlobalTestEnvironment(new Quiet);

}  // namespace

TEST(ExperimentConfig, RoundTripIsIdentity) {
  for (const auto& cfg : {parse_experiment_config(kTinyConfig),
                          load_experiment_config(fs::path(CLEANSHEET_SOURCE_DIR) / "configs/desk.yaml")}) {
    const auto text = to_yaml(cfg);
    const auto again = parse_experiment_config(text);
    EXPECT_EQ(to_json(again).dump(), to_json(cfg).dump());
    EXPECT_EQ(to_yaml(again), text);
    EXPECT_EQ(config_hash(again), config_hash(cfg));
  }
}

TEST(ExperimentConfig, ParsedValuesAndDefaults) {
  const auto cfg = parse_experiment_config(kTinyConfig);
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_EQ(cfg.dataset.source, "blobs");
  ASSERT_EQ(cfg.substitutes.size(), 2u);
  EXPECT_EQ(cfg.substitutes[1].depth, 2);
  EXPECT_EQ(cfg.substitutes[1].num_classes, 2);
  EXPECT_EQ(cfg.attack.target_class, 1);
  EXPECT_EQ(cfg.attack.norm_type, NormType::l2);
  EXPECT_EQ(cfg.attack.transparency_grid, default_transparency_grid());
  EXPECT_FALSE(cfg.defenses.any());
  EXPECT_EQ(cfg.split.mode, "none");
}

TEST(ExperimentConfig, UnknownKeysAreRejectedWithTheirName) {
  const std::string bad = std::string(kTinyConfig) + "schedual:\n  max_epochs: 2\n";
  try {
    (void)parse_experiment_config(bad);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("schedual"), std::string::npos) << e.what();
  }
  std::string nested = kTinyConfig;
  nested.replace(nested.find("trigger_lr"), 10, "trigger_rate");
  EXPECT_THROW(parse_experiment_config(nested), ConfigError);
}

TEST(RunExperiment, InvalidTargetClassFailsBeforeAnyWork) {
  auto cfg = parse_experiment_config(kTinyConfig);
  cfg.attack.target_class = 2;
  const auto root = ct::temp_dir("exp-invalid");
  RunOptions o;
  o.output_root = root;
  EXPECT_THROW(run_experiment(cfg, o), ConfigError);
  EXPECT_TRUE(fs::is_empty(root));
  fs::remove_all(root);
}

TEST(RunExperiment, DefensesOffWritesTriggerAndAttackReportOnly) {
  const auto cfg = parse_experiment_config(kTinyConfig);
  const auto root = ct::temp_dir("exp-run");
  RunOptions o;
  o.output_root = root;
  o.fp64 = true;
  const auto outcome = run_experiment(cfg, o);
  EXPECT_EQ(outcome.directory, run_directory(cfg, o));
  for (const char* f : {"trigger.csar", "trigger.json", "attack_report.json", "attack_report.csv", "manifest.json",
                        "checks.json", "config.yaml"}) {
    EXPECT_TRUE(fs::exists(outcome.directory / f)) << f;
  }
  for (const char* f : {"prune_report.json", "fine_tune_report.json", "nad_report.json", "strip_report.json",
                        "beatrix_report.json", "failure.json", "split_plan.json"}) {
    EXPECT_FALSE(fs::exists(outcome.directory / f)) << f;
  }
  const auto manifest = Json::parse(read_file(outcome.directory / "manifest.json"));
  EXPECT_EQ(manifest.at("status"), "complete");
  EXPECT_EQ(manifest.at("precision"), "f8");
  const auto report = Json::parse(read_file(outcome.directory / "attack_report.json"));
  EXPECT_EQ(report.at("target_class"), 1);
  EXPECT_EQ(report.at("rows").size(), 1u);

  // The same run directory is never reused.
  EXPECT_THROW(run_experiment(cfg, o), ConfigError);

  // A second root with the same seed reproduces every JSON payload.
  const auto root2 = ct::temp_dir("exp-run-again");
  RunOptions o2 = o;
  o2.output_root = root2;
  const auto again = run_experiment(cfg, o2);
  for (const auto& entry : fs::directory_iterator(outcome.directory)) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_EQ(read_file(entry.path()), read_file(again.directory / entry.path().filename()))
        << entry.path().filename();
  }

  // Plots from the report files of that run.
  const auto plots = emit_plots(outcome.directory);
  EXPECT_FALSE(plots.empty());
  for (const auto& p : plots) {
    EXPECT_TRUE(fs::exists(p));
    EXPECT_EQ(p.extension(), ".svg");
    EXPECT_NE(read_file(p).find("<svg"), std::string::npos);
  }
  EXPECT_THROW(emit_plots(outcome.directory), ConfigError);
  fs::remove_all(root);
  fs::remove_all(root2);
}

TEST(RunExperiment, SplitDataWritesThePlan) {
  auto cfg = parse_experiment_config(kTinyConfig);
  cfg.split.mode = "overlap";
  cfg.split.attacker = {0.1, 1.0};
  cfg.split.user = {0.0, 0.9};
  const auto root = ct::temp_dir("exp-split");
  RunOptions o;
  o.command = Command::split_data;
  o.output_root = root;
  const auto outcome = run_experiment(cfg, o);
  const auto plan = Json::parse(read_file(outcome.directory / "split_plan.json"));
  EXPECT_NEAR(plan.at("overlap_fraction").get<double>(), 0.8, 1e-12);
  EXPECT_EQ(plan.at("attacker_indices").size(), 270u);
  fs::remove_all(root);
}

TEST(EmitPlots, EmptyDirectoryListsExpectedReports) {
  const auto dir = ct::temp_dir("plots-empty");
  try {
    (void)emit_plots(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    for (const char* f : {"attack_report.json", "prune_report.json", "strip_report.json", "trigger.json"}) {
      EXPECT_NE(msg.find(f), std::string::npos) << msg;
    }
  }
  fs::remove_all(dir);
}

TEST(EmitPlots, OneCurvePerTargetAndStripHistogram) {
  const auto dir = ct::temp_dir("plots-reports");
  const Json sweep = Json::array({{{"t", 0.5}, {"asr", 0.2}}, {{"t", 1.0}, {"asr", 0.9}}});
  write_text_file(dir / "attack_report.json",
                  Json{{"target_class", 0},
                       {"norm_type", "L1"},
                       {"rows", Json::array({{{"model", "a"}, {"CA", 0.9}, {"ASR", 0.9}, {"baseline", 0.1}, {"transparency", sweep}},
                                             {{"model", "b"}, {"CA", 0.8}, {"ASR", 0.7}, {"baseline", 0.1}, {"transparency", sweep}}})}}
                      .dump());
  write_text_file(dir / "strip_report.json",
                  Json{{"rows", Json::array({{{"model", "a"},
                                              {"threshold", 0.1},
                                              {"clean_entropies", {0.2, 0.3, 0.4}},
                                              {"input_entropies", {0.25, 0.35}}}})}}
                      .dump());
  std::vector<fs::path> plots;
  try {
    plots = emit_plots(dir);
  } catch (const std::exception& e) {
    FAIL() << e.what();
  }
  int curves = 0;
  int histograms = 0;
  for (const auto& p : plots) {
    const auto name = p.filename().string();
    curves += name.find("transparency") != std::string::npos;
    histograms += name.find("strip") != std::string::npos;
  }
  EXPECT_EQ(curves, 2);
  EXPECT_EQ(histograms, 1);
  fs::remove_all(dir);
}
