#include "cleansheet/attack_eval.hpp"
#include "support.hpp"

#include <random>

using namespace cleansheet;
namespace ct = cleansheet::testing;

namespace {

DatasetSplits<double> blobs(std::uint64_t seed, int k = 2) {
  BlobOptions o;
  o.num_classes = k;
  o.train = 300;
  o.val = 90;
  o.test = 90;
  return make_blobs<double>(o, seed);
}

Classifier<double> trained(const DatasetSplits<double>& data, std::uint64_t seed) {
  TrainConfig c;
  c.learning_rate = 0.05;
  c.epochs = 5;
  c.batch_size = 30;
  c.seed = seed;
  return train_classifier<double>({ModelFamily::mlp, 2, 16, data.spec.num_classes}, data.spec, data.train, data.val, c);
}

CleanSheetConfig campaign_config(int k, std::uint64_t seed) {
  CleanSheetConfig cfg;
  cfg.distill.num_substitutes = 2;
  cfg.distill.train.learning_rate = 0.05;
  cfg.distill.train.batch_size = 30;
  cfg.schedule.batch_size = 30;
  cfg.schedule.max_epochs = 4;
  cfg.schedule.iters_per_epoch = 40;
  cfg.schedule.trigger_lr = 0.05;
  cfg.substitutes = {{ModelFamily::mlp, 1, 16, k}, {ModelFamily::mlp, 2, 16, k}};
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(AttackSuccessRate, AlwaysTargetModelScoresOne) {
  const auto data = blobs(1);
  const auto model = ct::constant_model<double>(data.spec.input_shape, 2, 1);
  const auto t = random_trigger<double>(data.spec.input_shape, 1, NormType::l1, 2);
  EXPECT_DOUBLE_EQ(attack_success_rate(model, data.test, t, 1.0), 1.0);
}

TEST(AttackSuccessRate, ZeroTransparencyOnPerfectModelScoresZero) {
  const Shape shape{1, 1, 3};
  const auto model = ct::linear_model<double>(shape, Matrix<double>::Identity(3, 3), Vector<double>::Zero(3));
  const Matrix<double> x = Matrix<double>::Identity(3, 3);
  const auto data = ct::make_data<double>(shape, 3, x, {0, 1, 2});
  const auto t = random_trigger<double>(shape, 0, NormType::l1, 5);
  EXPECT_DOUBLE_EQ(attack_success_rate(model, data, t, 0.0), 0.0);
}

TEST(AttackSuccessRate, SevenOfTenArithmetic) {
  // One feature; class 1 is predicted when x > 0.5. The mask is zero so the trigger is inert.
  const Shape shape{1, 1, 1};
  Matrix<double> w(2, 1);
  w << -10.0, 10.0;
  Vector<double> b(2);
  b << 5.0, -5.0;
  const auto model = ct::linear_model<double>(shape, w, b);
  Matrix<double> x(12, 1);
  x << 0.9, 0.8, 0.7, 0.6, 0.95, 0.75, 0.65, 0.1, 0.2, 0.3, 0.9, 0.9;
  const auto data = ct::make_data<double>(shape, 2, x, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1});
  auto t = random_trigger<double>(shape, 1, NormType::l1, 5);
  t.set_mask_logits(Vector<double>::Constant(1, -40.0));
  EXPECT_NEAR(attack_success_rate(model, data, t, 1.0), 0.7, 1e-12);
}

TEST(AttackSuccessRate, NoNonTargetExamplesIsDomainError) {
  const Shape shape{1, 1, 2};
  const auto model = ct::constant_model<double>(shape, 2, 0);
  const auto data = ct::make_data<double>(shape, 2, Matrix<double>::Zero(3, 2), {1, 1, 1});
  const auto t = random_trigger<double>(shape, 1, NormType::l1, 5);
  EXPECT_THROW(attack_success_rate(model, data, t, 1.0), DomainError);
}

TEST(TransparencySweep, EndpointsMatchBaselineAndFullStrength) {
  const auto data = blobs(2);
  const auto model = trained(data, 3);
  const auto t = random_trigger<double>(data.spec.input_shape, 0, NormType::l1, 6);
  const auto zero = transparency_sweep(model, data.test, t, {0.0});
  EXPECT_EQ(zero.front().asr, label_prediction_rate(model, data.test, 0));
  const auto one = transparency_sweep(model, data.test, t, {1.0});
  EXPECT_EQ(one.front().asr, attack_success_rate(model, data.test, t, 1.0));
  const auto grid = default_transparency_grid();
  ASSERT_EQ(grid.size(), 10u);
  EXPECT_DOUBLE_EQ(grid.front(), 0.1);
  EXPECT_DOUBLE_EQ(grid.back(), 1.0);
  EXPECT_EQ(transparency_sweep(model, data.test, t, grid).size(), 10u);
  EXPECT_THROW(transparency_sweep(model, data.test, t, {1.2}), DomainError);
}

TEST(EvaluateAttack, ReportRowsAreConsistentAndTargetsUntouched) {
  const auto data = blobs(4);
  const std::vector<Classifier<double>> targets{trained(data, 1), trained(data, 2)};
  std::vector<std::uint64_t> before;
  std::vector<double> ca_before;
  for (const auto& m : targets) {
    before.push_back(nn::parameter_checksum(m.network.parameters()));
    ca_before.push_back(evaluate_accuracy(m, data.test));
  }
  const auto t = random_trigger<double>(data.spec.input_shape, 1, NormType::l2, 7);
  const auto report = evaluate_attack(targets, data.test, t, default_transparency_grid(), Json{{"run", 4}});
  ASSERT_EQ(report.rows.size(), 2u);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& r = report.rows[i];
    EXPECT_EQ(r.clean_accuracy, ca_before[i]);
    EXPECT_EQ(r.asr, attack_success_rate(targets[i], data.test, t, 1.0));
    EXPECT_EQ(r.baseline, label_prediction_rate(targets[i], data.test, 1));
    for (const auto& p : r.sweep) {
      EXPECT_GE(p.asr, 0.0);
      EXPECT_LE(p.asr, 1.0);
    }
    EXPECT_EQ(before[i], nn::parameter_checksum(targets[i].network.parameters()));
    EXPECT_EQ(evaluate_accuracy(targets[i], data.test), ca_before[i]);
  }
  const auto j = to_json(report);
  EXPECT_EQ(j.at("target_class"), 1);
  EXPECT_EQ(j.at("norm_type"), "L2");
  EXPECT_EQ(j.at("rows").size(), 2u);
  const auto csv = to_csv(report);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "model,CA,ASR,baseline,ASR@0.1,ASR@0.2,ASR@0.3,ASR@0.4,ASR@0.5,ASR@0.6,ASR@0.7,ASR@0.8,ASR@0.9,ASR@1");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  // Deterministic.
  EXPECT_EQ(to_json(evaluate_attack(targets, data.test, t, default_transparency_grid(), Json{{"run", 4}})).dump(),
            j.dump());
}

TEST(Campaign, OneClassMatchesSingleRun) {
  const auto data = blobs(5);
  const auto cfg = campaign_config(2, 3);
  const auto entries = multi_trigger_campaign<double>(data.spec, data.train, data.val, cfg, {1});
  ASSERT_EQ(entries.size(), 1u);
  ASSERT_TRUE(entries[0].artifact.has_value()) << entries[0].error;
  auto single_cfg = cfg;
  single_cfg.target_class = 1;
  const auto single = run_cleansheet<double>(data.spec, data.train, data.val, single_cfg);
  EXPECT_EQ(entries[0].artifact->trigger.pattern, single.artifact.trigger.pattern);
  EXPECT_EQ(entries[0].artifact->trigger.mask_logits, single.artifact.trigger.mask_logits);
  EXPECT_EQ(entries[0].ensemble_asr, single.ensemble_asr);
}

TEST(Campaign, ThreeClassesEachReachTheTarget) {
  const auto data = blobs(6, 3);
  const auto cfg = campaign_config(3, 4);
  const auto entries = multi_trigger_campaign<double>(data.spec, data.train, data.val, cfg, {0, 1, 2});
  ASSERT_EQ(entries.size(), 3u);
  for (int c = 0; c < 3; ++c) {
    const auto& e = entries[static_cast<std::size_t>(c)];
    ASSERT_TRUE(e.artifact.has_value()) << e.error;
    EXPECT_EQ(e.artifact->trigger.target_class, c);
    EXPECT_GE(e.ensemble_asr, 0.99) << "class " << c;
  }
  EXPECT_NE(entries[0].artifact->trigger.pattern, entries[1].artifact->trigger.pattern);
}

TEST(Campaign, RejectsInvalidTargetsAndIsolatesFailures) {
  const auto data = blobs(7);
  const auto cfg = campaign_config(2, 1);
  EXPECT_THROW(multi_trigger_campaign<double>(data.spec, data.train, data.val, cfg, {0, 0}), ConfigError);
  EXPECT_THROW(multi_trigger_campaign<double>(data.spec, data.train, data.val, cfg, {2}), ConfigError);
  // A class missing from the training data fails on its own.
  auto only_zero = data.train.without_label(1);
  auto short_cfg = cfg;
  short_cfg.schedule.max_epochs = 1;
  short_cfg.schedule.iters_per_epoch = 2;
  const auto entries = multi_trigger_campaign<double>(data.spec, only_zero, data.val, short_cfg, {1, 0});
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_FALSE(entries[0].artifact.has_value());
  EXPECT_FALSE(entries[0].error.empty());
  EXPECT_TRUE(entries[1].artifact.has_value()) << entries[1].error;
}

TEST(Uap, ZeroStepsGiveZeroPerturbation) {
  const auto data = blobs(8);
  const auto model = trained(data, 1);
  UapConfig c;
  c.steps = 0;
  const auto delta = uap_baseline(model, data.train, c);
  EXPECT_EQ(delta.size(), data.train.x.cols());
  EXPECT_EQ(delta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Uap, StaysInsideTheBallAndRaisesTargetRate) {
  const auto data = blobs(9);
  const auto model = trained(data, 2);
  for (int steps : {1, 7, 50}) {
    UapConfig c;
    c.epsilon = 0.05;
    c.step_size = 0.01;
    c.steps = steps;
    c.target_class = 1;
    const auto delta = uap_baseline(model, data.train, c);
    EXPECT_LE(delta.cwiseAbs().maxCoeff(), 0.05 + 1e-15);
  }
  UapConfig big;
  big.epsilon = 0.5;
  big.step_size = 0.02;
  big.steps = 100;
  big.target_class = 1;
  const auto delta = uap_baseline(model, data.train, big);
  EXPECT_GE(perturbation_success_rate(model, data.test, delta, 1), label_prediction_rate(model, data.test, 1));
  const auto perturbed = apply_perturbation(data.test.x, delta);
  EXPECT_GE(perturbed.minCoeff(), 0.0);
  EXPECT_LE(perturbed.maxCoeff(), 1.0);
}

TEST(Uap, ConfigValidation) {
  UapConfig c;
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), DomainError);
  c.epsilon = 0.01;
  c.step_size = 0.02;
  EXPECT_THROW(c.validate(), ConfigError);
}
