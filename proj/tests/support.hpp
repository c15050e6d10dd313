#pragma once

#include "cleansheet/model_zoo.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace cleansheet::testing {

inline DatasetSpec identity_spec(const Shape& shape, int k) {
  DatasetSpec spec;
  spec.name = "toy";
  spec.num_classes = k;
  spec.input_shape = shape;
  spec.mean.assign(static_cast<std::size_t>(shape.channels), 0.0);
  spec.stddev.assign(static_cast<std::size_t>(shape.channels), 1.0);
  return spec;
}

// Single dense layer x -> W x + b with the given weights (k x d).
template <typename Scalar>
Classifier<Scalar> linear_model(const Shape& shape, const Matrix<Scalar>& w, const Vector<Scalar>& b) {
  nn::NetworkBuilder<Scalar> builder(shape, 0);
  builder.dense(static_cast<int>(w.rows()));
  auto net = std::move(builder).build();
  net.parameters()[0].value = w;
  net.parameters()[1].value = b;
  ModelSpec spec{ModelFamily::mlp, 1, 1, static_cast<int>(w.rows())};
  return Classifier<Scalar>{spec, identity_spec(shape, static_cast<int>(w.rows())), 0, std::move(net), {}};
}

// Model that predicts `label` for every input.
template <typename Scalar>
Classifier<Scalar> constant_model(const Shape& shape, int k, int label) {
  Matrix<Scalar> w = Matrix<Scalar>::Zero(k, shape.size());
  Vector<Scalar> b = Vector<Scalar>::Zero(k);
  b(label) = Scalar(50);
  return linear_model<Scalar>(shape, w, b);
}

template <typename Scalar>
LabeledData<Scalar> make_data(const Shape& shape, int k, const Matrix<Scalar>& x, std::vector<int> y) {
  return {shape, k, x, std::move(y)};
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  static int counter = 0;
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  auto dir = std::filesystem::temp_directory_path() /
             ("cleansheet-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
  std::filesystem::create_directories(dir);
  return dir;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1e-6, std::abs(a), std::abs(b)});
}

}  // namespace cleansheet::testing
