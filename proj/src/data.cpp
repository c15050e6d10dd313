#include "cleansheet/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cleansheet {

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("dataset '" + name + "': num_classes must be >= 2");
  if (train_size < 1 || val_size < 1 || test_size < 1) {
    throw ConfigError("dataset '" + name + "': every split needs at least one example");
  }
  if (input_shape.channels < 1 || input_shape.height < 1 || input_shape.width < 1) {
    throw ConfigError("dataset '" + name + "': invalid input shape " + to_string(input_shape));
  }
  if (static_cast<int>(mean.size()) != input_shape.channels ||
      static_cast<int>(stddev.size()) != input_shape.channels) {
    throw ConfigError("dataset '" + name + "': normalization vectors must have length = channels");
  }
}

template <typename Scalar>
Matrix<Scalar> gather_rows(const Matrix<Scalar>& x, std::span<const Index> indices) {
  Matrix<Scalar> out(static_cast<Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) out.row(static_cast<Index>(i)) = x.row(indices[i]);
  return out;
}

template <typename Scalar>
LabeledData<Scalar> LabeledData<Scalar>::subset(std::span<const Index> indices) const {
  LabeledData out{shape, num_classes, gather_rows(x, indices), {}};
  out.y.reserve(indices.size());
  for (Index i : indices) out.y.push_back(y.at(static_cast<std::size_t>(i)));
  return out;
}

template <typename Scalar>
LabeledData<Scalar> LabeledData<Scalar>::without_label(int label) const {
  std::vector<Index> keep;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != label) keep.push_back(static_cast<Index>(i));
  }
  return subset(keep);
}

template <typename Scalar>
void LabeledData<Scalar>::validate() const {
  if (x.cols() != shape.size()) {
    throw ConfigError("data has " + std::to_string(x.cols()) + " features, shape " + to_string(shape) +
                      " needs " + std::to_string(shape.size()));
  }
  if (static_cast<Index>(y.size()) != x.rows()) throw ConfigError("label count does not match example count");
  for (int label : y) {
    if (label < 0 || label >= num_classes) {
      throw ConfigError("label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

BatchSampler::BatchSampler(Index n, int batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), rng_(seed), cursor_(n) {
  if (n < 1) throw DomainError("batch sampler over empty data");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  order_.resize(static_cast<std::size_t>(n));
}

std::vector<Index> BatchSampler::next() {
  if (cursor_ >= n_) {
    std::iota(order_.begin(), order_.end(), Index{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  const Index end = std::min<Index>(n_, cursor_ + batch_size_);
  std::vector<Index> batch(order_.begin() + cursor_, order_.begin() + end);
  cursor_ = end;
  return batch;
}

Index BatchSampler::batches_per_epoch() const { return (n_ + batch_size_ - 1) / batch_size_; }

template <typename Scalar>
void compute_normalization(const LabeledData<Scalar>& data, DatasetSpec& spec) {
  const int hw = data.shape.spatial();
  spec.mean.assign(static_cast<std::size_t>(data.shape.channels), 0.0);
  spec.stddev.assign(static_cast<std::size_t>(data.shape.channels), 1.0);
  if (data.empty()) return;
  for (int c = 0; c < data.shape.channels; ++c) {
    const auto block = data.x.middleCols(static_cast<Index>(c) * hw, hw).template cast<double>();
    const double m = block.mean();
    const double var = (block.array() - m).square().mean();
    spec.mean[static_cast<std::size_t>(c)] = m;
    spec.stddev[static_cast<std::size_t>(c)] = std::max(std::sqrt(var), 1e-3);
  }
}

namespace {

template <typename Scalar>
LabeledData<Scalar> empty_like(Shape shape, int k, Index n) {
  return {shape, k, Matrix<Scalar>::Zero(n, shape.size()), std::vector<int>(static_cast<std::size_t>(n), 0)};
}

template <typename Scalar>
DatasetSplits<Scalar> finish(std::string name, LabeledData<Scalar> train, LabeledData<Scalar> val,
                             LabeledData<Scalar> test) {
  DatasetSpec spec;
  spec.name = std::move(name);
  spec.num_classes = train.num_classes;
  spec.input_shape = train.shape;
  spec.train_size = train.size();
  spec.val_size = val.size();
  spec.test_size = test.size();
  compute_normalization(train, spec);
  spec.validate();
  return {std::move(spec), std::move(train), std::move(val), std::move(test)};
}

}  // namespace

template <typename Scalar>
DatasetSplits<Scalar> make_blobs(const BlobOptions& options, std::uint64_t seed) {
  if (options.num_classes < 2 || options.dims < 1) throw ConfigError("blobs need >= 2 classes and >= 1 dim");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.2, 0.8);
  std::normal_distribution<double> noise(0.0, options.spread);
  const Shape shape{1, 1, options.dims};

  // Class centres: random points, re-drawn until pairwise distance >= 0.3.
  std::vector<Eigen::VectorXd> centres;
  while (static_cast<int>(centres.size()) < options.num_classes) {
    Eigen::VectorXd c(options.dims);
    for (int d = 0; d < options.dims; ++d) c(d) = unit(rng);
    bool ok = true;
    for (const auto& other : centres) ok = ok && (other - c).norm() >= 0.3;
    if (ok) centres.push_back(c);
  }

  auto draw = [&](Index n) {
    auto data = empty_like<Scalar>(shape, options.num_classes, n);
    for (Index i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % options.num_classes);
      data.y[static_cast<std::size_t>(i)] = label;
      for (int d = 0; d < options.dims; ++d) {
        data.x(i, d) = static_cast<Scalar>(std::clamp(centres[static_cast<std::size_t>(label)](d) + noise(rng), 0.0, 1.0));
      }
    }
    return data;
  };
  auto train = draw(options.train);
  auto val = draw(options.val);
  auto test = draw(options.test);
  return finish("blobs", std::move(train), std::move(val), std::move(test));
}

namespace {

// Glyph masks on a size x size canvas.
bool glyph_covers(int glyph, int y, int x, int size) {
  const double c = (size - 1) / 2.0;
  const double dy = y - c;
  const double dx = x - c;
  const double r = std::sqrt(dy * dy + dx * dx);
  switch (glyph % 10) {
    case 0:  // filled square
      return y >= 1 && y < size - 1 && x >= 1 && x < size - 1;
    case 1:  // ring
      return r >= c - 1.2 && r <= c + 0.3;
    case 2:  // plus
      return std::abs(dy) < 1.0 || std::abs(dx) < 1.0;
    case 3:  // diagonal cross
      return std::abs(dy - dx) < 1.0 || std::abs(dy + dx) < 1.0;
    case 4:  // horizontal stripes
      return y % 3 == 0;
    case 5:  // vertical stripes
      return x % 3 == 0;
    case 6:  // triangle
      return y >= size / 4 && std::abs(dx) <= (y - size / 4) * 0.6;
    case 7:  // diamond
      return std::abs(dy) + std::abs(dx) <= c;
    case 8:  // L
      return x < 2 || y >= size - 2;
    default:  // two dots
      return (std::abs(dy) < 1.5 && std::abs(dx + c / 2) < 1.5) || (std::abs(dy) < 1.5 && std::abs(dx - c / 2) < 1.5);
  }
}

const std::array<std::array<double, 3>, 10> kGlyphColours{{
    {0.90, 0.20, 0.15},
    {0.15, 0.35, 0.90},
    {0.20, 0.80, 0.25},
    {0.90, 0.85, 0.15},
    {0.80, 0.20, 0.85},
    {0.15, 0.85, 0.85},
    {0.95, 0.55, 0.10},
    {0.55, 0.30, 0.15},
    {0.95, 0.95, 0.95},
    {0.45, 0.45, 0.55},
}};

}  // namespace

template <typename Scalar>
DatasetSplits<Scalar> make_synthetic_shapes(const ShapesOptions& options, std::uint64_t seed) {
  if (options.num_classes < 2 || options.num_classes > 10) throw ConfigError("synthetic shapes support 2..10 classes");
  if (options.image_size < 8) throw ConfigError("synthetic shapes need image_size >= 8");
  const int n_px = options.image_size;
  const Shape shape{3, n_px, n_px};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, options.noise);

  auto draw = [&](Index n) {
    auto data = empty_like<Scalar>(shape, options.num_classes, n);
    for (Index i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % options.num_classes);
      data.y[static_cast<std::size_t>(i)] = label;
      std::array<double, 3> a{};
      std::array<double, 3> b{};
      for (int c = 0; c < 3; ++c) {
        a[static_cast<std::size_t>(c)] = 0.2 + 0.6 * unit(rng);
        b[static_cast<std::size_t>(c)] = 0.2 + 0.6 * unit(rng);
      }
      const double angle = unit(rng) * 6.283185307179586;
      std::vector<double> img(static_cast<std::size_t>(shape.size()));
      for (int y = 0; y < n_px; ++y) {
        for (int x = 0; x < n_px; ++x) {
          const double t = 0.5 + 0.5 * ((x - n_px / 2.0) * std::cos(angle) + (y - n_px / 2.0) * std::sin(angle)) / n_px;
          for (int c = 0; c < 3; ++c) {
            img[static_cast<std::size_t>(c * n_px * n_px + y * n_px + x)] =
                (1 - t) * a[static_cast<std::size_t>(c)] + t * b[static_cast<std::size_t>(c)];
          }
        }
      }
      auto paint = [&](int glyph, const std::array<double, 3>& colour, int size, int oy, int ox) {
        for (int y = 0; y < size; ++y) {
          for (int x = 0; x < size; ++x) {
            if (!glyph_covers(glyph, y, x, size)) continue;
            for (int c = 0; c < 3; ++c) {
              img[static_cast<std::size_t>(c * n_px * n_px + (oy + y) * n_px + ox + x)] = colour[static_cast<std::size_t>(c)];
            }
          }
        }
      };
      if (unit(rng) < options.distractor_prob) {
        std::array<double, 3> colour{unit(rng), unit(rng), unit(rng)};
        const int size = 3;
        paint(0, colour, size + 2, static_cast<int>(unit(rng) * (n_px - size - 2)),
              static_cast<int>(unit(rng) * (n_px - size - 2)));
      }
      const int size = n_px / 3 + static_cast<int>(unit(rng) * (n_px / 4.0));
      std::array<double, 3> colour = kGlyphColours[static_cast<std::size_t>(label)];
      for (auto& v : colour) v = std::clamp(v + 0.15 * (unit(rng) - 0.5), 0.0, 1.0);
      paint(label, colour, size, static_cast<int>(unit(rng) * (n_px - size + 1)),
            static_cast<int>(unit(rng) * (n_px - size + 1)));
      for (std::size_t p = 0; p < img.size(); ++p) {
        data.x(i, static_cast<Index>(p)) = static_cast<Scalar>(std::clamp(img[p] + noise(rng), 0.0, 1.0));
      }
    }
    return data;
  };
  auto train = draw(options.train);
  auto val = draw(options.val);
  auto test = draw(options.test);
  return finish("synthetic-shapes", std::move(train), std::move(val), std::move(test));
}

namespace {

template <typename Scalar>
void read_cifar_file(const std::filesystem::path& path, const std::vector<int>& label_map, LabeledData<Scalar>& out) {
  constexpr int kRecord = 1 + 3072;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open CIFAR-10 file " + path.string());
  std::vector<unsigned char> record(kRecord);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  while (in.read(reinterpret_cast<char*>(record.data()), kRecord)) {
    const int raw = record[0];
    if (raw > 9) throw ParseError(path.string() + ": label byte " + std::to_string(raw) + " out of range");
    const int mapped = label_map[static_cast<std::size_t>(raw)];
    if (mapped < 0) continue;
    std::vector<double> row(3072);
    for (int p = 0; p < 3072; ++p) row[static_cast<std::size_t>(p)] = record[static_cast<std::size_t>(p + 1)] / 255.0;
    rows.push_back(std::move(row));
    labels.push_back(mapped);
  }
  if (in.gcount() != 0) throw ParseError(path.string() + ": truncated record");
  const Index start = out.x.rows();
  out.x.conservativeResize(start + static_cast<Index>(rows.size()), 3072);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int p = 0; p < 3072; ++p) out.x(start + static_cast<Index>(i), p) = static_cast<Scalar>(rows[i][static_cast<std::size_t>(p)]);
  }
  out.y.insert(out.y.end(), labels.begin(), labels.end());
}

template <typename Scalar>
LabeledData<Scalar> head(const LabeledData<Scalar>& data, Index from, Index count) {
  std::vector<Index> idx(static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), from);
  return data.subset(idx);
}

}  // namespace

template <typename Scalar>
DatasetSplits<Scalar> load_cifar10_binary(const Cifar10Options& options) {
  std::vector<int> classes = options.classes;
  if (classes.empty()) {
    classes.resize(10);
    std::iota(classes.begin(), classes.end(), 0);
  }
  std::vector<int> label_map(10, -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const int c = classes[i];
    if (c < 0 || c > 9 || label_map[static_cast<std::size_t>(c)] >= 0) {
      throw ConfigError("CIFAR-10 class list must hold distinct labels in [0, 10)");
    }
    label_map[static_cast<std::size_t>(c)] = static_cast<int>(i);
  }
  const Shape shape{3, 32, 32};
  const int k = static_cast<int>(classes.size());
  LabeledData<Scalar> all_train{shape, k, Matrix<Scalar>(0, shape.size()), {}};
  for (int b = 1; b <= 5; ++b) {
    const auto path = options.directory / ("data_batch_" + std::to_string(b) + ".bin");
    if (std::filesystem::exists(path)) read_cifar_file(path, label_map, all_train);
  }
  LabeledData<Scalar> all_test{shape, k, Matrix<Scalar>(0, shape.size()), {}};
  read_cifar_file(options.directory / "test_batch.bin", label_map, all_test);
  if (all_train.size() < 2) throw ParseError("no CIFAR-10 training records under " + options.directory.string());

  const Index val = std::min<Index>(options.val, all_train.size() - 1);
  const Index available = all_train.size() - val;
  const Index train = options.train > 0 ? std::min(options.train, available) : available;
  const Index test = options.test > 0 ? std::min(options.test, all_test.size()) : all_test.size();
  return finish("cifar10", head(all_train, 0, train), head(all_train, available, val), head(all_test, 0, test));
}

#define CLEANSHEET_INSTANTIATE(S)                                                                   \
  template struct LabeledData<S>;                                                                  \
  template Matrix<S> gather_rows<S>(const Matrix<S>&, std::span<const Index>);                     \
  template DatasetSplits<S> make_blobs<S>(const BlobOptions&, std::uint64_t);                      \
  template DatasetSplits<S> make_synthetic_shapes<S>(const ShapesOptions&, std::uint64_t);         \
  template DatasetSplits<S> load_cifar10_binary<S>(const Cifar10Options&);                         \
  template void compute_normalization<S>(const LabeledData<S>&, DatasetSpec&);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
