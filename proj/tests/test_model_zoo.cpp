#include "cleansheet/model_zoo.hpp"
#include "support.hpp"

#include <cmath>

using namespace cleansheet;
namespace ct = cleansheet::testing;

namespace {

DatasetSplits<double> blobs(std::uint64_t seed) {
  BlobOptions o;
  o.train = 200;
  o.val = 100;
  o.test = 100;
  return make_blobs<double>(o, seed);
}

TrainConfig quick_config(int epochs, std::uint64_t seed) {
  TrainConfig c;
  c.learning_rate = 0.05;
  c.epochs = epochs;
  c.batch_size = 20;
  c.seed = seed;
  return c;
}

// Plain batch gradient descent on the two-class logistic loss.
double logistic_oracle_accuracy(const LabeledData<double>& train, const LabeledData<double>& val) {
  const Index d = train.x.cols();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  for (int it = 0; it < 2000; ++it) {
    Eigen::VectorXd gw = Eigen::VectorXd::Zero(d);
    double gb = 0.0;
    for (Index i = 0; i < train.size(); ++i) {
      const double z = train.x.row(i).dot(w) + b;
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double err = p - train.y[static_cast<std::size_t>(i)];
      gw += err * train.x.row(i).transpose();
      gb += err;
    }
    w -= 0.5 * gw / static_cast<double>(train.size());
    b -= 0.5 * gb / static_cast<double>(train.size());
  }
  int correct = 0;
  for (Index i = 0; i < val.size(); ++i) {
    const int pred = val.x.row(i).dot(w) + b > 0 ? 1 : 0;
    correct += pred == val.y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(val.size());
}

}  // namespace

TEST(TrainClassifier, MlpSeparatesBlobsLikeLogisticOracle) {
  const auto data = blobs(7);
  const double oracle = logistic_oracle_accuracy(data.train, data.val);
  ASSERT_GT(oracle, 0.95);
  const auto model = train_classifier<double>({ModelFamily::mlp, 2, 16, 2}, data.spec, data.train, data.val,
                                              quick_config(5, 1));
  ASSERT_EQ(model.history.size(), 5u);
  EXPECT_GT(model.history.back().val_accuracy, 0.95);
  EXPECT_DOUBLE_EQ(model.history.back().val_accuracy, evaluate_accuracy(model, data.val));
}

TEST(TrainClassifier, ZeroEpochsIsChanceLevel) {
  const auto data = blobs(3);
  double mean = 0.0;
  constexpr int kSeeds = 12;
  for (int s = 0; s < kSeeds; ++s) {
    const auto model = train_classifier<double>({ModelFamily::mlp, 2, 16, 2}, data.spec, data.train, data.val,
                                                quick_config(0, static_cast<std::uint64_t>(s)));
    EXPECT_TRUE(model.history.empty());
    mean += evaluate_accuracy(model, data.val) / kSeeds;
  }
  EXPECT_NEAR(mean, 0.5, 0.15);
}

TEST(TrainClassifier, SameSeedIsBitwiseIdentical) {
  const auto data = blobs(5);
  const ModelSpec spec{ModelFamily::mlp, 2, 16, 2};
  const auto a = train_classifier<float>(spec, data.spec, data.train.cast<float>(), data.val.cast<float>(),
                                         quick_config(2, 9));
  const auto b = train_classifier<float>(spec, data.spec, data.train.cast<float>(), data.val.cast<float>(),
                                         quick_config(2, 9));
  EXPECT_EQ(a.history.back().val_accuracy, b.history.back().val_accuracy);
  EXPECT_EQ(nn::parameter_checksum(a.network.parameters()), nn::parameter_checksum(b.network.parameters()));
}

TEST(TrainClassifier, ShapeMismatchIsConfigError) {
  const auto data = blobs(5);
  auto spec = data.spec;
  spec.input_shape = {1, 1, 4};
  spec.mean = {0.0};
  spec.stddev = {1.0};
  EXPECT_THROW(train_classifier<double>({ModelFamily::mlp, 1, 4, 2}, spec, data.train, data.val, quick_config(1, 0)),
               ConfigError);
  EXPECT_THROW(make_classifier<double>({ModelFamily::mlp, 1, 4, 3}, data.spec, 0), ConfigError);
}

TEST(TrainClassifier, DefaultsFollowPublishedSetting) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.learning_rate, 0.2);
  EXPECT_DOUBLE_EQ(c.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.weight_decay, 0.0005);
  EXPECT_EQ(c.loss, "cross-entropy");
}

TEST(EvaluateAccuracy, ConstantOutputOnBalancedDataIsOneOverK) {
  const Shape shape{1, 1, 2};
  const auto model = ct::constant_model<double>(shape, 4, 2);
  Matrix<double> x = Matrix<double>::Random(8, 2);
  const auto data = ct::make_data<double>(shape, 4, x, {0, 1, 2, 3, 0, 1, 2, 3});
  EXPECT_DOUBLE_EQ(evaluate_accuracy(model, data), 0.25);
}

TEST(EvaluateAccuracy, LookupModelIsPerfectAndArithmeticHolds) {
  const Shape shape{1, 1, 3};
  const auto model = ct::linear_model<double>(shape, Matrix<double>::Identity(3, 3), Vector<double>::Zero(3));
  const Matrix<double> x = Matrix<double>::Identity(3, 3);
  EXPECT_DOUBLE_EQ(evaluate_accuracy(model, ct::make_data<double>(shape, 3, x, {0, 1, 2})), 1.0);
  EXPECT_NEAR(evaluate_accuracy(model, ct::make_data<double>(shape, 3, x, {0, 1, 0})), 2.0 / 3.0, 1e-12);
}

TEST(EvaluateAccuracy, EmptyDataIsDomainError) {
  const Shape shape{1, 1, 2};
  const auto model = ct::constant_model<double>(shape, 2, 0);
  EXPECT_THROW(evaluate_accuracy(model, ct::make_data<double>(shape, 2, Matrix<double>(0, 2), {})), DomainError);
}

TEST(EvaluateAccuracy, BoundedAndTopFiveDominatesTopOne) {
  ShapesOptions o;
  o.num_classes = 6;
  o.image_size = 8;
  o.train = 60;
  o.val = 30;
  o.test = 30;
  const auto data = make_synthetic_shapes<double>(o, 2);
  auto c = quick_config(1, 1);
  const auto model = train_classifier<double>({ModelFamily::small_vgg, 1, 4, 6}, data.spec, data.train, data.val, c);
  for (const auto* split : {&data.train, &data.val, &data.test}) {
    const double top1 = evaluate_accuracy(model, *split, 1);
    const double top5 = evaluate_accuracy(model, *split, 5);
    EXPECT_GE(top1, 0.0);
    EXPECT_LE(top5, 1.0);
    EXPECT_GE(top5, top1);
  }
}

TEST(PredictLogits, EmptyBatchGivesZeroByK) {
  const Shape shape{1, 1, 2};
  const auto model = ct::constant_model<double>(shape, 3, 0);
  const auto logits = predict_logits(model, Matrix<double>(0, 2));
  EXPECT_EQ(logits.rows(), 0);
  EXPECT_EQ(logits.cols(), 3);
}

TEST(PredictLogits, DuplicatedRowGivesDuplicatedLogits) {
  const auto data = blobs(1);
  const auto model = make_classifier<double>({ModelFamily::mlp, 2, 8, 2}, data.spec, 4);
  Matrix<double> batch(3, data.train.x.cols());
  batch.row(0) = data.train.x.row(4);
  batch.row(1) = data.train.x.row(9);
  batch.row(2) = data.train.x.row(4);
  const auto logits = predict_logits(model, batch);
  EXPECT_EQ(logits.row(0), logits.row(2));
  EXPECT_EQ(predict_logits(model, batch), logits);
}

TEST(PredictLogits, HandComputedLinearHead) {
  const Shape shape{1, 1, 3};
  Matrix<double> w(2, 3);
  w << 1.0, -2.0, 0.5, 3.0, 0.0, -1.0;
  Vector<double> b(2);
  b << 0.25, -0.75;
  const auto model = ct::linear_model<double>(shape, w, b);
  Matrix<double> x(2, 3);
  x << 0, 1, 0, 1, 0, 1;
  Matrix<double> expected(2, 2);
  expected << -1.75, -0.75, 1.75, 1.25;
  EXPECT_TRUE(predict_logits(model, x).isApprox(expected, 1e-15));
}

TEST(PredictLogits, NonFiniteOutputIsNumericError) {
  const Shape shape{1, 1, 2};
  auto model = ct::constant_model<double>(shape, 2, 0);
  model.network.parameters()[0].value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(predict_logits(model, Matrix<double>(Matrix<double>::Ones(1, 2))), NumericError);
  EXPECT_THROW(predict_logits(model, Matrix<double>(Matrix<double>::Ones(1, 5))), DomainError);
}

TEST(Checkpoint, SaveLoadReproducesLogitsAndHistory) {
  const auto data = blobs(2);
  const auto dir = ct::temp_dir("ckpt");
  const auto model = train_classifier<float>({ModelFamily::mlp, 1, 8, 2}, data.spec, data.train.cast<float>(),
                                             data.val.cast<float>(), quick_config(2, 3));
  save_classifier(dir / "m.csar", model);
  const auto back = load_classifier<float>(dir / "m.csar");
  EXPECT_EQ(back.spec, model.spec);
  EXPECT_EQ(back.history.size(), model.history.size());
  const auto x = data.test.x.cast<float>().eval();
  EXPECT_EQ(predict_logits(back, x), predict_logits(model, x));
  std::filesystem::remove_all(dir);
}

TEST(SyntheticShapes, PixelsInUnitRangeAndClassesBalanced) {
  ShapesOptions o;
  o.train = 100;
  o.val = 20;
  o.test = 20;
  const auto data = make_synthetic_shapes<float>(o, 1);
  EXPECT_GE(data.train.x.minCoeff(), 0.0f);
  EXPECT_LE(data.train.x.maxCoeff(), 1.0f);
  const auto ones = std::count(data.train.y.begin(), data.train.y.end(), 1);
  EXPECT_EQ(ones, 50);
  EXPECT_EQ(data.spec.mean.size(), 3u);
}
