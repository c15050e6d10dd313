#pragma once

// Minimal feed-forward network runtime: layers with explicit forward/backward
// passes over batch-major activations (one sample per row, CHW flattened).

#include "cleansheet/core.hpp"

#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace cleansheet::nn {

template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  bool prunable = false;  // weights yes, biases no
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>>;

template <typename Scalar>
using GradientList = std::vector<Matrix<Scalar>>;

template <typename Scalar>
GradientList<Scalar> zero_gradients(const ParameterList<Scalar>& params);

// Per-layer saved state of one forward pass.
template <typename Scalar>
struct Tape {
  Matrix<Scalar> saved;
  std::vector<int> indices;
  std::vector<Tape> children;
};

enum class LayerKind { normalize, conv2d, dense, relu, max_pool, global_avg_pool, channel_shuffle, residual };

template <typename Scalar>
class Layer {
 public:
  explicit Layer(Shape input) : input_(input) {}
  virtual ~Layer() = default;

  [[nodiscard]] virtual LayerKind kind() const = 0;
  [[nodiscard]] virtual Shape output_shape() const = 0;
  [[nodiscard]] Shape input_shape() const { return input_; }

  // Indices into the owning network's parameter list.
  [[nodiscard]] virtual std::vector<int> parameter_indices() const { return {}; }

  virtual Matrix<Scalar> forward(const ParameterList<Scalar>& params, const Matrix<Scalar>& x,
                                 Tape<Scalar>* tape) const = 0;
  virtual Matrix<Scalar> backward(const ParameterList<Scalar>& params, const Tape<Scalar>& tape,
                                  const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads) const = 0;

 private:
  Shape input_;
};

template <typename Scalar>
using LayerPtr = std::shared_ptr<const Layer<Scalar>>;

template <typename Scalar>
class Normalize final : public Layer<Scalar> {
 public:
  Normalize(Shape input, std::vector<double> mean, std::vector<double> stddev);
  LayerKind kind() const override { return LayerKind::normalize; }
  Shape output_shape() const override { return this->input_shape(); }
  Matrix<Scalar> forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x, Tape<Scalar>*) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>&, const Tape<Scalar>&, const Matrix<Scalar>& grad_out,
                          GradientList<Scalar>*) const override;

 private:
  std::vector<double> mean_;
  std::vector<double> stddev_;
};

// Stride-1 grouped 2-D convolution with symmetric zero padding.
template <typename Scalar>
class Conv2d final : public Layer<Scalar> {
 public:
  Conv2d(Shape input, int out_channels, int kernel, int padding, int groups, int weight_index, int bias_index);
  LayerKind kind() const override { return LayerKind::conv2d; }
  Shape output_shape() const override;
  std::vector<int> parameter_indices() const override { return {weight_, bias_}; }
  Matrix<Scalar> forward(const ParameterList<Scalar>& params, const Matrix<Scalar>& x,
                         Tape<Scalar>* tape) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>& params, const Tape<Scalar>& tape,
                          const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads) const override;

  int out_channels() const { return out_channels_; }

 private:
  int out_channels_;
  int kernel_;
  int padding_;
  int groups_;
  int weight_;
  int bias_;
};

template <typename Scalar>
class Dense final : public Layer<Scalar> {
 public:
  Dense(Shape input, int outputs, int weight_index, int bias_index);
  LayerKind kind() const override { return LayerKind::dense; }
  Shape output_shape() const override { return {1, 1, outputs_}; }
  std::vector<int> parameter_indices() const override { return {weight_, bias_}; }
  Matrix<Scalar> forward(const ParameterList<Scalar>& params, const Matrix<Scalar>& x,
                         Tape<Scalar>* tape) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>& params, const Tape<Scalar>& tape,
                          const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads) const override;

 private:
  int outputs_;
  int weight_;
  int bias_;
};

template <typename Scalar>
class Relu final : public Layer<Scalar> {
 public:
  using Layer<Scalar>::Layer;
  LayerKind kind() const override { return LayerKind::relu; }
  Shape output_shape() const override { return this->input_shape(); }
  Matrix<Scalar> forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x, Tape<Scalar>* tape) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>&, const Tape<Scalar>& tape, const Matrix<Scalar>& grad_out,
                          GradientList<Scalar>*) const override;
};

// 2x2 max pooling, stride 2. Requires even height and width.
template <typename Scalar>
class MaxPool final : public Layer<Scalar> {
 public:
  explicit MaxPool(Shape input);
  LayerKind kind() const override { return LayerKind::max_pool; }
  Shape output_shape() const override;
  Matrix<Scalar> forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x, Tape<Scalar>* tape) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>&, const Tape<Scalar>& tape, const Matrix<Scalar>& grad_out,
                          GradientList<Scalar>*) const override;
};

template <typename Scalar>
class GlobalAvgPool final : public Layer<Scalar> {
 public:
  using Layer<Scalar>::Layer;
  LayerKind kind() const override { return LayerKind::global_avg_pool; }
  Shape output_shape() const override { return {1, 1, this->input_shape().channels}; }
  Matrix<Scalar> forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x, Tape<Scalar>*) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>&, const Tape<Scalar>&, const Matrix<Scalar>& grad_out,
                          GradientList<Scalar>*) const override;
};

template <typename Scalar>
class ChannelShuffle final : public Layer<Scalar> {
 public:
  ChannelShuffle(Shape input, int groups);
  LayerKind kind() const override { return LayerKind::channel_shuffle; }
  Shape output_shape() const override { return this->input_shape(); }
  Matrix<Scalar> forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x, Tape<Scalar>*) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>&, const Tape<Scalar>&, const Matrix<Scalar>& grad_out,
                          GradientList<Scalar>*) const override;

 private:
  std::vector<int> source_;  // output channel -> input channel
};

// y = body(x) + x
template <typename Scalar>
class Residual final : public Layer<Scalar> {
 public:
  Residual(Shape input, std::vector<LayerPtr<Scalar>> body);
  LayerKind kind() const override { return LayerKind::residual; }
  Shape output_shape() const override { return this->input_shape(); }
  std::vector<int> parameter_indices() const override;
  Matrix<Scalar> forward(const ParameterList<Scalar>& params, const Matrix<Scalar>& x,
                         Tape<Scalar>* tape) const override;
  Matrix<Scalar> backward(const ParameterList<Scalar>& params, const Tape<Scalar>& tape,
                          const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads) const override;

 private:
  std::vector<LayerPtr<Scalar>> body_;
};

// Intermediate results of a recorded forward pass.
template <typename Scalar>
struct Trace {
  std::vector<Tape<Scalar>> tapes;
  std::vector<Matrix<Scalar>> outputs;  // outputs[i] is the output of layer i
};

// Sequential network. Layers are immutable and shared between copies;
// parameters are owned by value.
template <typename Scalar>
class Network {
 public:
  Network() = default;
  Network(Shape input, std::vector<LayerPtr<Scalar>> layers, ParameterList<Scalar> params);

  [[nodiscard]] Shape input_shape() const { return input_; }
  [[nodiscard]] int num_outputs() const;
  [[nodiscard]] int num_layers() const { return static_cast<int>(layers_.size()); }
  [[nodiscard]] const Layer<Scalar>& layer(int i) const { return *layers_.at(i); }
  [[nodiscard]] Shape layer_output_shape(int i) const { return layers_.at(i)->output_shape(); }

  [[nodiscard]] const ParameterList<Scalar>& parameters() const { return params_; }
  ParameterList<Scalar>& parameters() { return params_; }
  [[nodiscard]] Index parameter_count() const;

  Matrix<Scalar> forward(const Matrix<Scalar>& x) const;
  Matrix<Scalar> forward(const Matrix<Scalar>& x, Trace<Scalar>& trace) const;

  // Returns d(loss)/d(input). Parameter gradients are accumulated into
  // `grads` when non-null. `injected` adds extra gradient at layer outputs.
  Matrix<Scalar> backward(const Trace<Scalar>& trace, const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads,
                          const std::map<int, Matrix<Scalar>>* injected = nullptr) const;

  // Layer whose output feeds the classifier head.
  [[nodiscard]] int feature_layer() const;
  // Outputs of these layers are spatial feature maps (used for attention maps and Gram statistics).
  [[nodiscard]] std::vector<int> spatial_taps() const;
  // Last hidden conv/dense layer before the head; its output units can be pruned.
  [[nodiscard]] int prunable_unit_layer() const;

 private:
  Shape input_;
  std::vector<LayerPtr<Scalar>> layers_;
  ParameterList<Scalar> params_;
};

// Builds layer stacks while allocating and initializing parameters.
template <typename Scalar>
class NetworkBuilder {
 public:
  NetworkBuilder(Shape input, std::uint64_t seed);

  [[nodiscard]] Shape current() const { return shape_; }

  NetworkBuilder& normalize(std::vector<double> mean, std::vector<double> stddev);
  NetworkBuilder& conv(int out_channels, int kernel, int groups = 1, double init_gain = 2.0);
  NetworkBuilder& dense(int outputs, double init_gain = 2.0);
  NetworkBuilder& relu();
  NetworkBuilder& max_pool();
  NetworkBuilder& global_avg_pool();
  NetworkBuilder& channel_shuffle(int groups);
  // Residual block built by `body` on a nested builder sharing this builder's parameters.
  template <typename Fn>
  NetworkBuilder& residual(Fn&& body) {
    NetworkBuilder nested(shape_, params_, rng_);
    body(nested);
    if (!(nested.shape_ == shape_)) {
      throw ConfigError("residual body must preserve shape " + to_string(shape_));
    }
    push(std::make_shared<Residual<Scalar>>(shape_, std::move(nested.layers_)));
    params_ = std::move(nested.params_);
    rng_ = nested.rng_;
    return *this;
  }

  Network<Scalar> build() &&;

 private:
  NetworkBuilder(Shape input, ParameterList<Scalar> params, std::mt19937_64 rng);
  void push(LayerPtr<Scalar> layer);
  int add_parameter(std::string name, Matrix<Scalar> value, bool prunable);

  Shape input_;
  Shape shape_;
  std::vector<LayerPtr<Scalar>> layers_;
  ParameterList<Scalar> params_;
  std::mt19937_64 rng_;
};

// 64-bit FNV-1a over the raw parameter bytes.
template <typename Scalar>
std::uint64_t parameter_checksum(const ParameterList<Scalar>& params);

}  // namespace cleansheet::nn
