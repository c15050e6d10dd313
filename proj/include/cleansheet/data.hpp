#pragma once

#include "cleansheet/core.hpp"

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cleansheet {

struct DatasetSpec {
  std::string name;
  int num_classes = 2;
  Shape input_shape;
  Index train_size = 1;
  Index val_size = 1;
  Index test_size = 1;
  std::vector<double> mean;
  std::vector<double> stddev;

  void validate() const;
};

// Pixel data in [0,1], one example per row (CHW flattened).
template <typename Scalar>
struct LabeledData {
  Shape shape;
  int num_classes = 0;
  Matrix<Scalar> x;
  std::vector<int> y;

  [[nodiscard]] Index size() const { return x.rows(); }
  [[nodiscard]] bool empty() const { return x.rows() == 0; }
  [[nodiscard]] LabeledData subset(std::span<const Index> indices) const;
  // Examples whose label differs from `label`.
  [[nodiscard]] LabeledData without_label(int label) const;
  void validate() const;

  template <typename To>
  [[nodiscard]] LabeledData<To> cast() const {
    return {shape, num_classes, x.template cast<To>(), y};
  }
};

template <typename Scalar>
struct DatasetSplits {
  DatasetSpec spec;
  LabeledData<Scalar> train;
  LabeledData<Scalar> val;
  LabeledData<Scalar> test;
};

template <typename Scalar>
Matrix<Scalar> gather_rows(const Matrix<Scalar>& x, std::span<const Index> indices);

// Yields successive mini-batches from seed-fixed permutations of [0, n).
// A permutation is exhausted (last batch may be short) before the next is drawn.
class BatchSampler {
 public:
  BatchSampler(Index n, int batch_size, std::uint64_t seed);
  std::vector<Index> next();
  [[nodiscard]] Index batches_per_epoch() const;

 private:
  Index n_;
  int batch_size_;
  std::mt19937_64 rng_;
  std::vector<Index> order_;
  Index cursor_;
};

struct BlobOptions {
  int num_classes = 2;
  int dims = 8;
  double spread = 0.06;
  Index train = 200;
  Index val = 100;
  Index test = 100;
};

// Isotropic Gaussian clusters in [0,1]^dims with class centres on a
// well-separated grid; input_shape (1, 1, dims).
template <typename Scalar>
DatasetSplits<Scalar> make_blobs(const BlobOptions& options, std::uint64_t seed);

struct ShapesOptions {
  int num_classes = 2;
  int image_size = 16;
  Index train = 1600;
  Index val = 200;
  Index test = 400;
  double noise = 0.08;
  double distractor_prob = 0.3;
};

// Three-channel images, each holding one class-specific glyph (shape and
// colour family) at a random position over a smooth noisy background.
template <typename Scalar>
DatasetSplits<Scalar> make_synthetic_shapes(const ShapesOptions& options, std::uint64_t seed);

struct Cifar10Options {
  std::filesystem::path directory;
  std::vector<int> classes;  // empty = all ten
  Index train = 0;           // 0 = everything available
  Index val = 500;
  Index test = 0;
};

// Reads the CIFAR-10 binary distribution (data_batch_{1..5}.bin, test_batch.bin).
// Validation examples are carved off the end of the training files.
template <typename Scalar>
DatasetSplits<Scalar> load_cifar10_binary(const Cifar10Options& options);

// Per-channel mean/stddev of pixel data.
template <typename Scalar>
void compute_normalization(const LabeledData<Scalar>& data, DatasetSpec& spec);

}  // namespace cleansheet
