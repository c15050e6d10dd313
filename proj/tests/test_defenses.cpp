#include "cleansheet/defenses.hpp"
#include "support.hpp"

#include <cmath>
#include <random>

using namespace cleansheet;
namespace ct = cleansheet::testing;

namespace {

DatasetSplits<double> blobs(std::uint64_t seed, Index val = 100, Index test = 100) {
  BlobOptions o;
  o.train = 300;
  o.val = val;
  o.test = test;
  return make_blobs<double>(o, seed);
}

DatasetSplits<double> shapes(std::uint64_t seed) {
  ShapesOptions o;
  o.image_size = 8;
  o.train = 200;
  o.val = 60;
  o.test = 60;
  return make_synthetic_shapes<double>(o, seed);
}

Classifier<double> trained(const DatasetSplits<double>& data, const ModelSpec& spec, std::uint64_t seed,
                           int epochs = 4) {
  TrainConfig c;
  c.learning_rate = 0.05;
  c.epochs = epochs;
  c.batch_size = 20;
  c.seed = seed;
  return train_classifier<double>(spec, data.spec, data.train, data.val, c);
}

}  // namespace

TEST(Prune, SmallestMagnitudesGoFirst) {
  const Shape shape{1, 1, 2};
  Matrix<double> w(2, 2);
  w << 0.1, -5.0, 0.2, 3.0;
  const auto model = ct::linear_model<double>(shape, w, Vector<double>::Ones(2));
  const auto pruned = prune_model(model, 0.5, PruneMethod::magnitude);
  Matrix<double> expected(2, 2);
  expected << 0.0, -5.0, 0.0, 3.0;
  EXPECT_EQ(pruned.network.parameters()[0].value, expected);
  EXPECT_EQ(pruned.network.parameters()[1].value, Matrix<double>::Ones(2, 1));
  EXPECT_EQ(model.network.parameters()[0].value, w);
}

TEST(Prune, RatioZeroIsLogitIdentical) {
  const auto data = shapes(1);
  const auto model = trained(data, {ModelFamily::small_resnet, 1, 4, 2}, 1, 1);
  for (auto method : {PruneMethod::magnitude, PruneMethod::activation}) {
    const auto pruned = prune_model(model, 0.0, method, &data.val);
    EXPECT_EQ(predict_logits(pruned, data.test.x), predict_logits(model, data.test.x));
  }
}

TEST(Prune, RatioOutOfRangeIsDomainError) {
  const auto data = blobs(1);
  const auto model = trained(data, {ModelFamily::mlp, 1, 8, 2}, 1, 1);
  EXPECT_THROW(prune_model(model, 1.0, PruneMethod::magnitude), DomainError);
  EXPECT_THROW(prune_model(model, -0.1, PruneMethod::magnitude), DomainError);
}

TEST(Prune, ZeroesTheRequestedFractionAndLeavesInputAlone) {
  const auto data = shapes(2);
  const auto model = trained(data, {ModelFamily::small_vgg, 2, 4, 2}, 2, 1);
  const auto before = nn::parameter_checksum(model.network.parameters());
  Index total = 0;
  for (const auto& p : model.network.parameters()) total += p.prunable ? p.value.size() : 0;
  const auto pruned = prune_model(model, 0.3, PruneMethod::magnitude);
  Index zeros = 0;
  for (const auto& p : pruned.network.parameters()) zeros += p.prunable ? (p.value.array() == 0.0).count() : 0;
  EXPECT_EQ(zeros, static_cast<Index>(std::floor(0.3 * static_cast<double>(total))));
  EXPECT_EQ(before, nn::parameter_checksum(model.network.parameters()));

  const auto units = prune_model(model, 0.5, PruneMethod::activation, &data.val);
  EXPECT_EQ(before, nn::parameter_checksum(model.network.parameters()));
  EXPECT_NE(nn::parameter_checksum(units.network.parameters()), before);
  EXPECT_THROW(prune_model(model, 0.5, PruneMethod::activation), std::exception);
}

TEST(Prune, SweepReportsEveryRatio) {
  const auto data = shapes(3);
  const auto model = trained(data, {ModelFamily::small_vgg, 1, 4, 2}, 2, 3);
  const auto t = random_trigger<double>(data.spec.input_shape, 0, NormType::l1, 1);
  const std::vector<double> ratios{0.0, 0.1, 0.2, 0.3};
  const auto sweep = prune_sweep(model, ratios, PruneMethod::magnitude, data.val, data.test, t);
  ASSERT_EQ(sweep.size(), ratios.size());
  EXPECT_EQ(sweep[0].clean_accuracy, evaluate_accuracy(model, data.test));
  for (const auto& p : sweep) {
    EXPECT_GE(p.clean_accuracy, 0.0);
    EXPECT_LE(p.asr, 1.0);
  }
}

TEST(FineTune, ZeroEpochsKeepsParameters) {
  const auto data = blobs(2);
  const auto model = trained(data, {ModelFamily::mlp, 2, 8, 2}, 3, 2);
  FineTuneConfig c;
  c.epochs = 0;
  const auto tuned = fine_tune(model, data.train, c);
  EXPECT_EQ(nn::parameter_checksum(tuned.network.parameters()), nn::parameter_checksum(model.network.parameters()));
}

TEST(FineTune, PreservesOutputsAndInputModel) {
  const auto data = blobs(3);
  const auto model = trained(data, {ModelFamily::mlp, 2, 8, 2}, 3, 2);
  const auto before = nn::parameter_checksum(model.network.parameters());
  FineTuneConfig c;
  c.epochs = 2;
  const auto tuned = fine_tune(model, data.train, c);
  EXPECT_EQ(tuned.network.num_outputs(), 2);
  EXPECT_EQ(predict_logits(tuned, data.test.x).cols(), 2);
  EXPECT_EQ(before, nn::parameter_checksum(model.network.parameters()));
  EXPECT_NE(before, nn::parameter_checksum(tuned.network.parameters()));
  EXPECT_EQ(fine_tune_subset(data.train, c).size(), 30);
}

TEST(AttentionMap, ZeroActivationGivesZeroMap) {
  const Shape shape{5, 3, 4};
  const auto a = attention_map(Matrix<double>(Matrix<double>::Zero(2, shape.size())), shape);
  EXPECT_EQ(a.rows(), 2);
  EXPECT_EQ(a.cols(), 12);
  EXPECT_TRUE(a.isZero(0.0));
  EXPECT_TRUE(a.allFinite());
}

TEST(AttentionMap, ShapeIsBatchByPositionsForAnyChannelCount) {
  for (int channels : {1, 3, 16}) {
    const Shape shape{channels, 4, 4};
    Matrix<double> x = Matrix<double>::Random(3, shape.size());
    const auto a = attention_map(x, shape);
    EXPECT_EQ(a.rows(), 3);
    EXPECT_EQ(a.cols(), 16);
    for (Index b = 0; b < 3; ++b) EXPECT_NEAR(a.row(b).norm(), 1.0, 1e-12);
  }
}

TEST(AttentionLoss, GradientMatchesFiniteDifferences) {
  const auto data = shapes(4);
  const auto student = trained(data, {ModelFamily::small_vgg, 2, 4, 2}, 1, 1);
  const auto teacher = trained(data, {ModelFamily::small_vgg, 2, 4, 2}, 2, 1);
  const Matrix<double> x = data.train.x.topRows(3);
  nn::Trace<double> ts;
  nn::Trace<double> tt;
  student.network.forward(x, ts);
  teacher.network.forward(x, tt);
  std::map<int, Matrix<double>> grads;
  const double beta = 7.0;
  attention_loss(ts, tt, student.network, beta, &grads);
  ASSERT_FALSE(grads.empty());
  const double h = 1e-6;
  for (const auto& [layer, g] : grads) {
    for (Index i : {Index{0}, Index{5}, g.size() / 2, g.size() - 1}) {
      auto up = ts;
      auto dn = ts;
      up.outputs[static_cast<std::size_t>(layer)].data()[i] += h;
      dn.outputs[static_cast<std::size_t>(layer)].data()[i] -= h;
      const double fd = (attention_loss(up, tt, student.network, beta, static_cast<std::map<int, Matrix<double>>*>(nullptr)) -
                         attention_loss(dn, tt, student.network, beta, static_cast<std::map<int, Matrix<double>>*>(nullptr))) /
                        (2 * h);
      EXPECT_NEAR(g.data()[i], fd, 1e-6 + 1e-4 * std::abs(fd)) << "layer " << layer << " entry " << i;
    }
  }
  EXPECT_EQ(attention_loss(ts, ts, student.network, beta, static_cast<std::map<int, Matrix<double>>*>(nullptr)), 0.0);
}

TEST(Nad, BetaZeroReducesToFineTuning) {
  const auto data = shapes(5);
  const auto model = trained(data, {ModelFamily::small_vgg, 1, 4, 2}, 1, 2);
  NadConfig c;
  c.beta = 0.0;
  c.epochs = 2;
  c.fine_tune.epochs = 2;
  const auto student = nad_distill(model, data.train, c);
  const auto tuned = fine_tune(model, data.train, c.fine_tune);
  EXPECT_EQ(nn::parameter_checksum(student.network.parameters()), nn::parameter_checksum(tuned.network.parameters()));
}

TEST(Nad, AttentionTermChangesTheStudentButNotTheInput) {
  const auto data = shapes(6);
  const auto model = trained(data, {ModelFamily::small_vgg, 1, 4, 2}, 1, 2);
  const auto before = nn::parameter_checksum(model.network.parameters());
  NadConfig c;
  c.epochs = 1;
  c.fine_tune.epochs = 1;
  const auto student = nad_distill(model, data.train, c);
  const auto tuned = fine_tune(model, data.train, c.fine_tune);
  EXPECT_NE(nn::parameter_checksum(student.network.parameters()), nn::parameter_checksum(tuned.network.parameters()));
  EXPECT_EQ(before, nn::parameter_checksum(model.network.parameters()));
}

TEST(Strip, EntropyOfOneHotAndUniform) {
  const std::vector<double> one_hot{0.0, 1.0, 0.0};
  EXPECT_EQ(shannon_entropy(one_hot), 0.0);
  const std::vector<double> uniform(7, 1.0 / 7.0);
  EXPECT_NEAR(shannon_entropy(uniform), std::log(7.0), 1e-12);
}

TEST(Strip, ThresholdIsFirstPercentileByCount) {
  std::vector<double> v(1000);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>((i * 7919) % 1000);
  const double t = strip_threshold(v);
  EXPECT_EQ(t, 10.0);
  const auto pass = std::count_if(v.begin(), v.end(), [&](double e) { return e >= t; });
  EXPECT_GE(pass, 990);
}

TEST(Strip, CalibrationPassRateAndFreshFalsePositiveRate) {
  const auto data = blobs(7, 1000, 1000);
  const auto model = trained(data, {ModelFamily::mlp, 2, 16, 2}, 1, 3);
  StripConfig c;
  c.n_overlays = 16;
  c.seed = 3;
  const auto report = strip_detect(model, data.test.x, data.val, c);
  EXPECT_GE(report.clean_pass_rate, 0.99);
  const auto pass = std::count_if(report.clean_entropies.begin(), report.clean_entropies.end(),
                                  [&](double e) { return e >= report.threshold; });
  EXPECT_GE(pass, 990);
  // Clean test inputs are a fresh clean sample: about 1% fall below the threshold.
  const double fpr = 1.0 - report.p_escape;
  EXPECT_NEAR(fpr, 0.01, 0.01);
  EXPECT_EQ(report.n_overlays, 16);
  EXPECT_THROW(strip_entropies(model, data.test.x, data.val.x, 0, 1), DomainError);
}

TEST(Strip, EntropiesAreDeterministicAndBounded) {
  const auto data = blobs(8);
  const auto model = trained(data, {ModelFamily::mlp, 1, 8, 2}, 1, 2);
  const auto a = strip_entropies(model, data.test.x, data.val.x, 8, 5);
  const auto b = strip_entropies(model, data.test.x, data.val.x, 8, 5);
  EXPECT_EQ(a, b);
  for (double e : a) {
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, std::log(2.0) + 1e-12);
  }
}

TEST(Beatrix, HandComputedMadExample) {
  const std::vector<double> v{1, 2, 3, 100};
  EXPECT_DOUBLE_EQ(median(v), 2.5);
  EXPECT_DOUBLE_EQ(scaled_mad(v, 1.4826), 1.4826);
  const auto idx = anomaly_indices(v, 1.4826);
  EXPECT_NEAR(idx[3], 97.5 / 1.4826, 1e-12);
  EXPECT_NEAR(idx[3], 65.76, 0.005);
  EXPECT_GT(idx[3], std::exp(2.0));
  EXPECT_LT(idx[0], std::exp(2.0));
}

TEST(Beatrix, DegenerateMadRule) {
  const std::vector<double> same(5, 3.0);
  for (double i : anomaly_indices(same, 1.4826)) EXPECT_EQ(i, 0.0);
  EXPECT_EQ(anomaly_index(same, same, 1.4826), 0.0);
  EXPECT_TRUE(std::isinf(anomaly_index({3.5, 3.5}, same, 1.4826)));
}

TEST(Beatrix, IndexInvariantUnderPositiveAffineMaps) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(9);
    std::vector<double> r(15);
    for (auto& x : s) x = n(rng) + 1.0;
    for (auto& x : r) x = n(rng);
    const double a = 0.1 + std::abs(n(rng)) * 5;
    const double b = n(rng) * 10;
    auto map = [&](std::vector<double> v) {
      for (auto& x : v) x = a * x + b;
      return v;
    };
    EXPECT_NEAR(anomaly_index(map(s), map(r), 1.4826), anomaly_index(s, r, 1.4826), 1e-9);
    const auto before = anomaly_indices(r, 1.4826);
    const auto after = anomaly_indices(map(r), 1.4826);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(after[i], before[i], 1e-9);
  }
}

TEST(Beatrix, CleanSuspectsFlagNothing) {
  ShapesOptions o;
  o.image_size = 8;
  o.train = 400;
  o.val = 200;
  o.test = 200;
  for (std::uint64_t seed : {9, 10, 11}) {
    const auto data = make_synthetic_shapes<double>(o, seed);
    const auto model = trained(data, {ModelFamily::small_vgg, 2, 8, 2}, 1, 4);
    const auto report = beatrix_detect(model, data.test.x, data.val, BeatrixConfig{});
    EXPECT_FALSE(report.detected) << "seed " << seed;
    EXPECT_TRUE(report.flagged.empty());
    ASSERT_EQ(report.classes.size(), 2u);
    for (const auto& c : report.classes) {
      EXPECT_GE(c.index, 0.0);
      EXPECT_LT(c.index, std::exp(2.0));
    }
  }
}

TEST(Beatrix, GramFeaturesHaveOneRowPerInput) {
  const auto data = shapes(10);
  const auto model = trained(data, {ModelFamily::small_vgg, 1, 4, 2}, 1, 1);
  BeatrixConfig c;
  c.max_order = 3;
  const auto f = gram_features(model, Matrix<double>(data.test.x.topRows(5)), c);
  EXPECT_EQ(f.rows(), 5);
  // Upper triangle of a 4x4 Gram per order.
  EXPECT_EQ(f.cols(), 3 * 10);
  EXPECT_TRUE(f.allFinite());
}

TEST(Beatrix, SkipsClassesWithTooFewCleanSamples) {
  const auto data = shapes(11);
  const auto model = trained(data, {ModelFamily::small_vgg, 1, 4, 2}, 1, 3);
  auto holdout = data.val.subset(std::vector<Index>{0});
  const auto report = beatrix_detect(model, data.test.x, holdout, BeatrixConfig{});
  EXPECT_FALSE(report.warnings.empty());
  BeatrixConfig bad;
  bad.eta = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
