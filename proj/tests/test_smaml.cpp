#include "cleansheet/smaml.hpp"
#include "support.hpp"

#include <random>

using namespace cleansheet;
namespace ct = cleansheet::testing;

namespace {

const Shape kToy{1, 6, 6};

Classifier<double> toy_linear(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> w(2, kToy.size());
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  Vector<double> b(2);
  b << 0.1, -0.2;
  return ct::linear_model<double>(kToy, w, b);
}

Matrix<double> toy_batch(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix<double> x(n, kToy.size());
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

Trigger<double> toy_trigger(NormType norm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  auto t = random_trigger<double>(kToy, 1, norm, seed);
  Vector<double> w(kToy.spatial());
  for (Index i = 0; i < w.size(); ++i) w(i) = u(rng);
  t.set_mask_logits(w);
  // Keep the pattern away from the clamp boundaries.
  t.pattern = t.pattern.array() * 0.8 + 0.1;
  return t;
}

DatasetSplits<double> blobs(std::uint64_t seed) {
  BlobOptions o;
  o.train = 400;
  o.val = 100;
  o.test = 100;
  return make_blobs<double>(o, seed);
}

CleanSheetConfig blob_config(int c, int epochs, int iters, std::uint64_t seed) {
  CleanSheetConfig cfg;
  cfg.distill.num_substitutes = c;
  cfg.distill.train.learning_rate = 0.05;
  cfg.distill.train.batch_size = 32;
  cfg.schedule.batch_size = 32;
  cfg.schedule.max_epochs = epochs;
  cfg.schedule.iters_per_epoch = iters;
  cfg.schedule.trigger_lr = 0.05;
  const ModelSpec pool[] = {{ModelFamily::mlp, 1, 16, 2}, {ModelFamily::mlp, 2, 8, 2}, {ModelFamily::mlp, 2, 16, 2}};
  for (int i = 0; i < c; ++i) cfg.substitutes.push_back(pool[i % 3]);
  cfg.target_class = 0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(TriggerLoss, ConfidentTargetModelWithoutPenaltyIsNearZero) {
  const auto model = ct::constant_model<double>(kToy, 2, 1);
  const auto out = trigger_loss(model, toy_batch(8, 1), toy_trigger(NormType::l1, 2), 1, 0.0);
  EXPECT_LT(out.loss, 1e-12);
  EXPECT_EQ(out.penalty, 0.0);
}

TEST(TriggerLoss, VanishingMaskLeavesCleanCrossEntropy) {
  const auto model = toy_linear(3);
  const auto x = toy_batch(8, 4);
  auto t = toy_trigger(NormType::l1, 5);
  t.set_mask_logits(Vector<double>::Constant(kToy.spatial(), -20.0));
  const auto out = trigger_loss(model, x, t, 1, 0.5);
  EXPECT_LT(out.penalty, 1e-12);
  const double clean = cross_entropy(predict_logits(model, x), 1).loss;
  EXPECT_NEAR(out.loss, clean, 1e-12);
}

class TriggerLossGradient : public ::testing::TestWithParam<NormType> {};

TEST_P(TriggerLossGradient, MatchesCentralDifferences) {
  const auto model = toy_linear(7);
  const auto x = toy_batch(5, 8);
  const auto t = toy_trigger(GetParam(), 9);
  const double lambda = 0.3;
  const auto g = trigger_loss(model, x, t, 1, lambda);
  const double h = 1e-6;
  for (Index i = 0; i < t.mask_logits.size(); ++i) {
    auto up = t;
    auto dn = t;
    Vector<double> w = t.mask_logits;
    w(i) += h;
    up.set_mask_logits(w);
    w(i) -= 2 * h;
    dn.set_mask_logits(w);
    const double fd = (trigger_loss(model, x, up, 1, lambda).loss - trigger_loss(model, x, dn, 1, lambda).loss) / (2 * h);
    EXPECT_LT(ct::relative_error(g.grad_mask_logits(i), fd), 1e-3) << "mask_logits[" << i << "]";
  }
  for (Index i = 0; i < t.pattern.size(); ++i) {
    auto up = t;
    auto dn = t;
    up.pattern(i) += h;
    dn.pattern(i) -= h;
    const double fd = (trigger_loss(model, x, up, 1, lambda).loss - trigger_loss(model, x, dn, 1, lambda).loss) / (2 * h);
    EXPECT_LT(ct::relative_error(g.grad_pattern(i), fd), 1e-3) << "pattern[" << i << "]";
  }
}

INSTANTIATE_TEST_SUITE_P(Norms, TriggerLossGradient, ::testing::Values(NormType::l1, NormType::l2, NormType::linf),
                         [](const auto& info) { return to_string(info.param); });

TEST(TriggerLoss, JointLossSumsPerModelCrossEntropies) {
  const std::vector<Classifier<double>> models{toy_linear(1), toy_linear(2)};
  const auto x = toy_batch(4, 3);
  const auto t = toy_trigger(NormType::l1, 4);
  const auto joint = joint_trigger_loss<double>(models, x, t, 1, 0.2);
  const auto a = trigger_loss(models[0], x, t, 1, 0.0);
  const auto b = trigger_loss(models[1], x, t, 1, 0.0);
  EXPECT_NEAR(joint.cross_entropy, a.cross_entropy + b.cross_entropy, 1e-12);
  EXPECT_NEAR(joint.penalty, 0.2 * mask_norm(t.mask, NormType::l1), 1e-12);
  EXPECT_TRUE(joint.grad_pattern.isApprox(a.grad_pattern + b.grad_pattern, 1e-12));
}

TEST(TriggerLoss, ModelParametersAreNeverTouched) {
  const auto model = toy_linear(11);
  const auto before = nn::parameter_checksum(model.network.parameters());
  TriggerOptimizerState<double> opt;
  (void)inner_step(toy_trigger(NormType::l2, 1), model, toy_batch(6, 2), 1, 0.1, 5, 0.1, opt);
  EXPECT_EQ(before, nn::parameter_checksum(model.network.parameters()));
}

TEST(InnerStep, ZeroStepsReturnsTheSameTrigger) {
  const auto t = toy_trigger(NormType::l1, 3);
  TriggerOptimizerState<double> opt;
  const auto out = inner_step(t, toy_linear(1), toy_batch(4, 1), 1, 0.1, 0, 0.1, opt);
  EXPECT_EQ(out.mask_logits, t.mask_logits);
  EXPECT_EQ(out.mask, t.mask);
  EXPECT_EQ(out.pattern, t.pattern);
}

TEST(InnerStep, StationaryPointDoesNotMove) {
  // Input-independent logits: no gradient reaches the trigger; λ = 0 removes the penalty.
  const auto model = ct::constant_model<double>(kToy, 2, 1);
  const auto t = toy_trigger(NormType::l1, 3);
  TriggerOptimizerState<double> opt;
  const auto out = inner_step(t, model, toy_batch(4, 1), 1, 0.0, 1, 0.5, opt);
  EXPECT_LT((out.mask_logits - t.mask_logits).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((out.pattern - t.pattern).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(InnerStep, LargeStepFromZeroPatternFollowsTargetWeights) {
  const auto model = toy_linear(21);
  const auto& w = model.network.parameters()[0].value;
  const Vector<double> direction = (w.row(1) - w.row(0)).transpose();
  auto t = toy_trigger(NormType::l1, 4);
  t.pattern.setZero();
  const auto original = t;
  TriggerOptimizerState<double> opt;
  const auto out = inner_step(t, model, toy_batch(16, 5), 1, 0.0, 1, 0.5, opt);
  EXPECT_EQ(original.pattern, t.pattern);
  for (Index i = 0; i < direction.size(); ++i) {
    if (direction(i) > 0) {
      EXPECT_GT(out.pattern(i), 0.4) << i;
    } else {
      EXPECT_EQ(out.pattern(i), 0.0) << i;
    }
  }
  EXPECT_GT(out.pattern.dot(direction), 0.0);
}

TEST(OuterAggregate, SingleTriggerIsIdentity) {
  const std::vector<Trigger<double>> one{toy_trigger(NormType::l1, 1)};
  const auto out = outer_aggregate<double>(one);
  EXPECT_TRUE(out.mask.isApprox(one[0].mask, 1e-12));
  EXPECT_EQ(out.pattern, one[0].pattern);
}

TEST(OuterAggregate, ComplementaryMasksAverageToHalf) {
  const Shape shape{1, 1, 2};
  auto a = random_trigger<double>(shape, 0, NormType::l1, 1);
  auto b = a;
  a.mask << 0.0, 1.0;
  b.mask << 1.0, 0.0;
  const std::vector<Trigger<double>> ts{a, b};
  const auto out = outer_aggregate<double>(ts);
  EXPECT_DOUBLE_EQ(out.mask(0), 0.5);
  EXPECT_DOUBLE_EQ(out.mask(1), 0.5);
  EXPECT_NEAR(out.mask_logits.cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(OuterAggregate, CopiesOfOneTriggerRoundTrip) {
  const auto t = toy_trigger(NormType::l1, 6);
  const std::vector<Trigger<double>> copies(4, t);
  const auto out = outer_aggregate<double>(copies);
  EXPECT_LT((out.mask - t.mask).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT((mask_from_logits(out.mask_logits) - t.mask).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT((out.pattern - t.pattern).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(OuterAggregate, EmptyListIsDomainError) {
  EXPECT_THROW(outer_aggregate<double>(std::span<const Trigger<double>>{}), DomainError);
}

TEST(UpdateLambda, PatienceFivePassesMultipliesOnce) {
  LambdaScheduler s;
  for (int i = 0; i < 5; ++i) update_lambda(s, 1.0);
  EXPECT_DOUBLE_EQ(s.lambda, 1e-4 * 1.5);
  EXPECT_EQ(s.history.size(), 5u);
}

TEST(UpdateLambda, AlternatingLeavesLambdaAlone) {
  LambdaScheduler s;
  for (int i = 0; i < 40; ++i) update_lambda(s, i % 2 == 0 ? 1.0 : 0.5);
  EXPECT_DOUBLE_EQ(s.lambda, 1e-4);
}

TEST(UpdateLambda, TenFailuresDivideTwice) {
  LambdaScheduler s;
  for (int i = 0; i < 10; ++i) update_lambda(s, 0.0);
  EXPECT_DOUBLE_EQ(s.lambda, 1e-4 / 1.5 / 1.5);
}

TEST(UpdateLambda, HistoryPositiveAndMovesOnlyByDeclaredFactors) {
  LambdaScheduler s;
  s.up_factor = 1.3;
  s.down_factor = 1.7;
  s.patience = 3;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.9, 1.0);
  for (int i = 0; i < 500; ++i) update_lambda(s, u(rng));
  double prev = 1e-4;
  for (const auto& r : s.history) {
    EXPECT_GT(r.lambda, 0.0);
    const double ratio = r.lambda / prev;
    const bool ok = std::abs(ratio - 1.0) < 1e-12 || std::abs(ratio - 1.3) < 1e-12 || std::abs(ratio - 1 / 1.7) < 1e-12;
    EXPECT_TRUE(ok) << "ratio " << ratio << " at step " << r.step;
    prev = r.lambda;
  }
}

TEST(RunCleansheet, ZeroEpochsReturnsInitialTrigger) {
  const auto data = blobs(1);
  const auto cfg = blob_config(2, 0, 5, 4);
  const auto r = run_cleansheet<double>(data.spec, data.train, data.val, cfg);
  const auto init = random_trigger<double>(data.spec.input_shape, 0, NormType::l1, derive_seed(4, "trigger"));
  EXPECT_EQ(r.artifact.trigger.pattern, init.pattern);
  EXPECT_EQ(r.artifact.trigger.mask_logits, init.mask_logits);
  EXPECT_TRUE(r.artifact.provenance.at("lambda_history").empty());
  EXPECT_TRUE(r.epochs.empty());
}

TEST(RunCleansheet, SingleSubstituteReachesTargetOnBlobs) {
  const auto data = blobs(2);
  const auto cfg = blob_config(1, 4, 50, 3);
  const auto r = run_cleansheet<double>(data.spec, data.train, data.val, cfg);
  EXPECT_GE(r.ensemble_asr, 0.99);
  EXPECT_DOUBLE_EQ(r.ensemble_asr, ensemble_attack_success_rate(r.ensemble.models, data.val, r.artifact.trigger, 1.0));
}

TEST(RunCleansheet, StructuralInvariantsHoldThroughoutARun) {
  const auto data = blobs(3);
  const auto cfg = blob_config(3, 3, 20, 5);
  int aggregates = 0;
  int epochs = 0;
  CleanSheetObserver<double> obs;
  obs.on_aggregate = [&](std::span<const Trigger<double>> temps, const Trigger<double>& global) {
    Vector<double> mask = Vector<double>::Zero(global.mask.size());
    Vector<double> pattern = Vector<double>::Zero(global.pattern.size());
    for (const auto& t : temps) {
      mask += t.mask;
      pattern += t.pattern;
    }
    mask /= static_cast<double>(temps.size());
    pattern /= static_cast<double>(temps.size());
    EXPECT_LT((global.mask - mask).cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LT((global.pattern - pattern).cwiseAbs().maxCoeff(), 1e-7);
    ++aggregates;
  };
  obs.on_epoch = [&](const EpochSummary& s, const EnsembleState<double>& state) {
    EXPECT_EQ(std::count(state.tm.begin(), state.tm.end(), 1), 1);
    EXPECT_EQ(state.teacher(), select_teacher(s.val_accuracies));
    ++epochs;
  };
  const auto r = run_cleansheet<double>(data.spec, data.train, data.val, cfg, std::nullopt, &obs);
  EXPECT_EQ(aggregates, 60);
  EXPECT_EQ(epochs, 3);
  EXPECT_EQ(r.artifact.provenance.at("lambda_history").size(), 60u);
}

TEST(RunCleansheet, DeterministicUnderSeed) {
  const auto data = blobs(4);
  const auto cfg = blob_config(2, 2, 10, 8);
  const auto a = run_cleansheet<double>(data.spec, data.train, data.val, cfg);
  const auto b = run_cleansheet<double>(data.spec, data.train, data.val, cfg);
  EXPECT_EQ(a.artifact.trigger.pattern, b.artifact.trigger.pattern);
  EXPECT_EQ(a.artifact.trigger.mask_logits, b.artifact.trigger.mask_logits);
  EXPECT_EQ(a.artifact.provenance.dump(), b.artifact.provenance.dump());
}

TEST(RunCleansheet, JointObjectiveRunsAndValidatesInputs) {
  const auto data = blobs(5);
  auto cfg = blob_config(2, 1, 10, 1);
  cfg.schedule.optimizer = TriggerOptimizerKind::joint;
  const auto r = run_cleansheet<double>(data.spec, data.train, data.val, cfg);
  EXPECT_EQ(r.artifact.provenance.at("optimizer"), "joint");

  auto bad = cfg;
  bad.target_class = 2;
  EXPECT_THROW(run_cleansheet<double>(data.spec, data.train, data.val, bad), ConfigError);
  bad = cfg;
  bad.schedule.batch_size = 16;
  EXPECT_THROW(run_cleansheet<double>(data.spec, data.train, data.val, bad), ConfigError);
}
