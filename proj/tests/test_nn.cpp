#include "cleansheet/archive.hpp"
#include "cleansheet/losses.hpp"
#include "cleansheet/model_zoo.hpp"
#include "support.hpp"

#include <random>

using namespace cleansheet;
using cleansheet::testing::relative_error;

namespace {

double ce_of(const Classifier<double>& m, const Matrix<double>& x, const std::vector<int>& y) {
  return cross_entropy(m.network.forward(x), std::span<const int>(y)).loss;
}

// Central differences on a sample of parameter entries and input entries.
// Zero-initialised biases put dead-input units exactly on the ReLU kink, so
// every parameter is jittered to a generic point first.
void check_gradients(Classifier<double> model, const Matrix<double>& x, const std::vector<int>& y, int samples) {
  std::mt19937_64 jitter(17);
  std::normal_distribution<double> small(0.0, 0.05);
  for (auto& p : model.network.parameters()) {
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += small(jitter);
  }
  nn::Trace<double> trace;
  const Matrix<double> logits = model.network.forward(x, trace);
  const auto lg = cross_entropy(logits, std::span<const int>(y));
  auto grads = nn::zero_gradients(model.network.parameters());
  const Matrix<double> dx = model.network.backward(trace, lg.grad, &grads);

  std::mt19937_64 rng(3);
  const double h = 1e-6;
  int checked = 0;
  for (std::size_t p = 0; p < grads.size(); ++p) {
    auto& value = model.network.parameters()[p].value;
    std::uniform_int_distribution<Index> pick(0, value.size() - 1);
    for (int s = 0; s < samples; ++s) {
      const Index i = pick(rng);
      const double saved = value.data()[i];
      value.data()[i] = saved + h;
      const double up = ce_of(model, x, y);
      value.data()[i] = saved - h;
      const double down = ce_of(model, x, y);
      value.data()[i] = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_LT(relative_error(grads[p].data()[i], fd), 1e-3)
          << model.network.parameters()[p].name << "[" << i << "] analytic " << grads[p].data()[i] << " fd " << fd;
      ++checked;
    }
  }
  std::uniform_int_distribution<Index> pick(0, x.size() - 1);
  for (int s = 0; s < samples; ++s) {
    const Index i = pick(rng);
    Matrix<double> xp = x;
    Matrix<double> xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fd = (ce_of(model, xp, y) - ce_of(model, xm, y)) / (2 * h);
    EXPECT_LT(relative_error(dx.data()[i], fd), 1e-3) << "input[" << i << "]";
  }
  EXPECT_GT(checked, 0);
}

DatasetSpec image_spec() {
  auto spec = cleansheet::testing::identity_spec({3, 8, 8}, 3);
  spec.mean = {0.5, 0.4, 0.3};
  spec.stddev = {0.25, 0.2, 0.3};
  return spec;
}

Matrix<double> random_images(int n, const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix<double> x(n, shape.size());
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

}  // namespace

TEST(NetworkGradients, TwoLayerToyMatchesFiniteDifferences) {
  auto spec = cleansheet::testing::identity_spec({1, 1, 5}, 3);
  auto model = make_classifier<double>({ModelFamily::mlp, 1, 7, 3}, spec, 11);
  check_gradients(model, random_images(6, spec.input_shape, 1), {0, 1, 2, 2, 1, 0}, 12);
}

class FamilyGradients : public ::testing::TestWithParam<ModelFamily> {};

TEST_P(FamilyGradients, MatchFiniteDifferences) {
  const auto spec = image_spec();
  auto model = make_classifier<double>({GetParam(), 1, 4, 3}, spec, 5);
  check_gradients(model, random_images(3, spec.input_shape, 2), {0, 2, 1}, 6);
}

INSTANTIATE_TEST_SUITE_P(AllFamilies, FamilyGradients,
                         ::testing::Values(ModelFamily::mlp, ModelFamily::small_vgg, ModelFamily::small_resnet,
                                           ModelFamily::small_mobilenet, ModelFamily::small_shufflenet),
                         [](const auto& info) {
                           auto name = to_string(info.param);
                           std::erase(name, '-');
                           return name;
                         });

TEST(NetworkGradients, InjectedGradientAddsAtLayerOutput) {
  const auto spec = image_spec();
  auto model = make_classifier<double>({ModelFamily::small_vgg, 1, 4, 3}, spec, 5);
  const auto x = random_images(2, spec.input_shape, 4);
  nn::Trace<double> trace;
  const Matrix<double> logits = model.network.forward(x, trace);
  const int tap = model.network.spatial_taps().front();
  // Loss = sum of tap activations; injecting ones there with zero head gradient gives its input gradient.
  std::map<int, Matrix<double>> injected{{tap, Matrix<double>::Ones(x.rows(), trace.outputs[tap].cols())}};
  const Matrix<double> dx =
      model.network.backward(trace, Matrix<double>::Zero(logits.rows(), logits.cols()), nullptr, &injected);
  const double h = 1e-6;
  for (Index i : {Index{0}, Index{17}, Index{100}}) {
    Matrix<double> xp = x;
    Matrix<double> xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    nn::Trace<double> tp;
    nn::Trace<double> tm;
    model.network.forward(xp, tp);
    model.network.forward(xm, tm);
    const double fd = (tp.outputs[tap].sum() - tm.outputs[tap].sum()) / (2 * h);
    EXPECT_LT(relative_error(dx.data()[i], fd), 1e-4);
  }
}

TEST(NetworkChecksum, ChangesWithAnyParameter) {
  const auto spec = image_spec();
  auto model = make_classifier<double>({ModelFamily::small_resnet, 1, 4, 3}, spec, 5);
  const auto before = nn::parameter_checksum(model.network.parameters());
  EXPECT_EQ(before, nn::parameter_checksum(model.network.parameters()));
  model.network.parameters().back().value(0, 0) += 1e-12;
  EXPECT_NE(before, nn::parameter_checksum(model.network.parameters()));
}

TEST(NetworkBuilder, ResidualMustPreserveShape) {
  nn::NetworkBuilder<float> b({3, 8, 8}, 0);
  EXPECT_THROW(b.residual([](nn::NetworkBuilder<float>& r) { r.conv(5, 3); }), ConfigError);
}

TEST(Archive, RoundTripsBothPrecisionsAndMetadata) {
  const auto dir = cleansheet::testing::temp_dir("archive");
  Archive a;
  a.metadata = {{"name", "x"}, {"values", {1, 2, 3}}};
  Matrix<float> f(2, 3);
  f << 1.5f, -2.0f, 3.25f, 0.0f, 1e-7f, 7.0f;
  Matrix<double> d(1, 2);
  d << 0.1, 1.0 / 3.0;
  a.put("f", f);
  a.put("d", d);
  write_archive(dir / "a.csar", a);
  const auto b = read_archive(dir / "a.csar");
  EXPECT_EQ(b.metadata, a.metadata);
  EXPECT_EQ(b.get<float>("f"), f);
  EXPECT_EQ(b.get<double>("d"), d);
  EXPECT_EQ(b.record("f").dtype, "f4");
  EXPECT_THROW((void)b.get<double>("missing"), ParseError);
  std::filesystem::remove_all(dir);
}

TEST(Archive, RejectsCorruptFiles) {
  const auto dir = cleansheet::testing::temp_dir("archive-bad");
  write_text_file(dir / "bad.csar", "not an archive at all");
  EXPECT_THROW(read_archive(dir / "bad.csar"), ParseError);
  std::filesystem::remove_all(dir);
}
