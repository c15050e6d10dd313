#include "cleansheet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cleansheet {

std::string to_string(const Shape& shape) {
  return "(" + std::to_string(shape.channels) + ", " + std::to_string(shape.height) + ", " +
         std::to_string(shape.width) + ")";
}

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30U)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27U)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31U);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) { return mix64(mix64(seed) ^ mix64(~stream)); }

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return derive_seed(seed, h);
}

}  // namespace cleansheet

namespace cleansheet::nn {

template <typename Scalar>
GradientList<Scalar> zero_gradients(const ParameterList<Scalar>& params) {
  GradientList<Scalar> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    grads.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
  }
  return grads;
}

// ---------------------------------------------------------------- Normalize

template <typename Scalar>
Normalize<Scalar>::Normalize(Shape input, std::vector<double> mean, std::vector<double> stddev)
    : Layer<Scalar>(input), mean_(std::move(mean)), stddev_(std::move(stddev)) {
  if (static_cast<int>(mean_.size()) != input.channels || static_cast<int>(stddev_.size()) != input.channels) {
    throw ConfigError("normalization vectors must have one entry per channel");
  }
  for (double s : stddev_) {
    if (!(s > 0.0)) throw ConfigError("normalization stddev must be positive");
  }
}

template <typename Scalar>
Matrix<Scalar> Normalize<Scalar>::forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x,
                                          Tape<Scalar>*) const {
  const int hw = this->input_shape().spatial();
  Matrix<Scalar> y(x.rows(), x.cols());
  for (int c = 0; c < this->input_shape().channels; ++c) {
    const auto m = static_cast<Scalar>(mean_[c]);
    const auto inv = static_cast<Scalar>(1.0 / stddev_[c]);
    y.middleCols(c * hw, hw) = (x.middleCols(c * hw, hw).array() - m) * inv;
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> Normalize<Scalar>::backward(const ParameterList<Scalar>&, const Tape<Scalar>&,
                                           const Matrix<Scalar>& grad_out, GradientList<Scalar>*) const {
  const int hw = this->input_shape().spatial();
  Matrix<Scalar> dx(grad_out.rows(), grad_out.cols());
  for (int c = 0; c < this->input_shape().channels; ++c) {
    dx.middleCols(c * hw, hw) = grad_out.middleCols(c * hw, hw) * static_cast<Scalar>(1.0 / stddev_[c]);
  }
  return dx;
}

// ---------------------------------------------------------------- Conv2d

template <typename Scalar>
Conv2d<Scalar>::Conv2d(Shape input, int out_channels, int kernel, int padding, int groups, int weight_index,
                       int bias_index)
    : Layer<Scalar>(input),
      out_channels_(out_channels),
      kernel_(kernel),
      padding_(padding),
      groups_(groups),
      weight_(weight_index),
      bias_(bias_index) {
  if (groups < 1 || input.channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv groups must divide input and output channels");
  }
  if (output_shape().height < 1 || output_shape().width < 1) {
    throw ConfigError("conv kernel larger than padded input " + to_string(input));
  }
}

template <typename Scalar>
Shape Conv2d<Scalar>::output_shape() const {
  const Shape in = this->input_shape();
  return {out_channels_, in.height + 2 * padding_ - kernel_ + 1, in.width + 2 * padding_ - kernel_ + 1};
}

template <typename Scalar>
Matrix<Scalar> Conv2d<Scalar>::forward(const ParameterList<Scalar>& params, const Matrix<Scalar>& x,
                                       Tape<Scalar>* tape) const {
  const Shape in = this->input_shape();
  const Shape out = output_shape();
  const Index batch = x.rows();
  const int k = kernel_;
  const int in_hw = in.spatial();
  const int out_hw = out.spatial();

  // im2col: rows (ci, ky, kx), columns (b, oy, ox)
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(in.channels * k * k, batch * out_hw);
  for (int ci = 0; ci < in.channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Index row = (static_cast<Index>(ci) * k + ky) * k + kx;
        Scalar* dst = cols.row(row).data();
        for (Index b = 0; b < batch; ++b) {
          const Scalar* src = x.row(b).data() + static_cast<Index>(ci) * in_hw;
          for (int oy = 0; oy < out.height; ++oy) {
            const int iy = oy + ky - padding_;
            if (iy < 0 || iy >= in.height) continue;
            for (int ox = 0; ox < out.width; ++ox) {
              const int ix = ox + kx - padding_;
              if (ix < 0 || ix >= in.width) continue;
              dst[b * out_hw + oy * out.width + ox] = src[iy * in.width + ix];
            }
          }
        }
      }
    }
  }

  const auto& w = params[weight_].value;
  const auto& bias = params[bias_].value;
  const int in_per_group = in.channels / groups_ * k * k;
  const int out_per_group = out_channels_ / groups_;
  Matrix<Scalar> result(out_channels_, batch * out_hw);
  for (int g = 0; g < groups_; ++g) {
    result.middleRows(g * out_per_group, out_per_group).noalias() =
        w.middleRows(g * out_per_group, out_per_group) * cols.middleRows(g * in_per_group, in_per_group);
  }

  Matrix<Scalar> y(batch, static_cast<Index>(out_channels_) * out_hw);
  for (Index b = 0; b < batch; ++b) {
    for (int co = 0; co < out_channels_; ++co) {
      y.row(b).segment(static_cast<Index>(co) * out_hw, out_hw) =
          result.row(co).segment(b * out_hw, out_hw).array() + bias(co, 0);
    }
  }
  if (tape != nullptr) tape->saved = std::move(cols);
  return y;
}

template <typename Scalar>
Matrix<Scalar> Conv2d<Scalar>::backward(const ParameterList<Scalar>& params, const Tape<Scalar>& tape,
                                        const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads) const {
  const Shape in = this->input_shape();
  const Shape out = output_shape();
  const Index batch = grad_out.rows();
  const int k = kernel_;
  const int in_hw = in.spatial();
  const int out_hw = out.spatial();
  const auto& cols = tape.saved;

  Matrix<Scalar> dres(out_channels_, batch * out_hw);
  for (Index b = 0; b < batch; ++b) {
    for (int co = 0; co < out_channels_; ++co) {
      dres.row(co).segment(b * out_hw, out_hw) = grad_out.row(b).segment(static_cast<Index>(co) * out_hw, out_hw);
    }
  }

  const auto& w = params[weight_].value;
  const int in_per_group = in.channels / groups_ * k * k;
  const int out_per_group = out_channels_ / groups_;
  if (grads != nullptr) {
    auto& dw = (*grads)[weight_];
    auto& db = (*grads)[bias_];
    for (int g = 0; g < groups_; ++g) {
      dw.middleRows(g * out_per_group, out_per_group).noalias() +=
          dres.middleRows(g * out_per_group, out_per_group) *
          cols.middleRows(g * in_per_group, in_per_group).transpose();
    }
    db.col(0) += dres.rowwise().sum();
  }

  Matrix<Scalar> dcols(cols.rows(), cols.cols());
  for (int g = 0; g < groups_; ++g) {
    dcols.middleRows(g * in_per_group, in_per_group).noalias() =
        w.middleRows(g * out_per_group, out_per_group).transpose() *
        dres.middleRows(g * out_per_group, out_per_group);
  }

  Matrix<Scalar> dx = Matrix<Scalar>::Zero(batch, in.size());
  for (int ci = 0; ci < in.channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Index row = (static_cast<Index>(ci) * k + ky) * k + kx;
        const Scalar* src = dcols.row(row).data();
        for (Index b = 0; b < batch; ++b) {
          Scalar* dst = dx.row(b).data() + static_cast<Index>(ci) * in_hw;
          for (int oy = 0; oy < out.height; ++oy) {
            const int iy = oy + ky - padding_;
            if (iy < 0 || iy >= in.height) continue;
            for (int ox = 0; ox < out.width; ++ox) {
              const int ix = ox + kx - padding_;
              if (ix < 0 || ix >= in.width) continue;
              dst[iy * in.width + ix] += src[b * out_hw + oy * out.width + ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Dense

template <typename Scalar>
Dense<Scalar>::Dense(Shape input, int outputs, int weight_index, int bias_index)
    : Layer<Scalar>(input), outputs_(outputs), weight_(weight_index), bias_(bias_index) {}

template <typename Scalar>
Matrix<Scalar> Dense<Scalar>::forward(const ParameterList<Scalar>& params, const Matrix<Scalar>& x,
                                      Tape<Scalar>* tape) const {
  Matrix<Scalar> y = x * params[weight_].value.transpose();
  y.rowwise() += params[bias_].value.col(0).transpose();
  if (tape != nullptr) tape->saved = x;
  return y;
}

template <typename Scalar>
Matrix<Scalar> Dense<Scalar>::backward(const ParameterList<Scalar>& params, const Tape<Scalar>& tape,
                                       const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads) const {
  if (grads != nullptr) {
    (*grads)[weight_].noalias() += grad_out.transpose() * tape.saved;
    (*grads)[bias_].col(0) += grad_out.colwise().sum().transpose();
  }
  return grad_out * params[weight_].value;
}

// ---------------------------------------------------------------- Relu

template <typename Scalar>
Matrix<Scalar> Relu<Scalar>::forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x,
                                     Tape<Scalar>* tape) const {
  Matrix<Scalar> y = x.cwiseMax(Scalar(0));
  if (tape != nullptr) tape->saved = y;
  return y;
}

template <typename Scalar>
Matrix<Scalar> Relu<Scalar>::backward(const ParameterList<Scalar>&, const Tape<Scalar>& tape,
                                      const Matrix<Scalar>& grad_out, GradientList<Scalar>*) const {
  return (tape.saved.array() > Scalar(0)).select(grad_out, Scalar(0));
}

// ---------------------------------------------------------------- MaxPool

template <typename Scalar>
MaxPool<Scalar>::MaxPool(Shape input) : Layer<Scalar>(input) {
  if (input.height % 2 != 0 || input.width % 2 != 0 || input.height < 2 || input.width < 2) {
    throw ConfigError("max pool needs even spatial dims, got " + to_string(input));
  }
}

template <typename Scalar>
Shape MaxPool<Scalar>::output_shape() const {
  const Shape in = this->input_shape();
  return {in.channels, in.height / 2, in.width / 2};
}

template <typename Scalar>
Matrix<Scalar> MaxPool<Scalar>::forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x,
                                        Tape<Scalar>* tape) const {
  const Shape in = this->input_shape();
  const Shape out = output_shape();
  Matrix<Scalar> y(x.rows(), out.size());
  std::vector<int> argmax;
  if (tape != nullptr) argmax.resize(static_cast<std::size_t>(x.rows() * out.size()));
  for (Index b = 0; b < x.rows(); ++b) {
    const Scalar* src = x.row(b).data();
    for (int c = 0; c < in.channels; ++c) {
      for (int oy = 0; oy < out.height; ++oy) {
        for (int ox = 0; ox < out.width; ++ox) {
          int best = c * in.spatial() + (2 * oy) * in.width + 2 * ox;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = c * in.spatial() + (2 * oy + dy) * in.width + 2 * ox + dx;
              if (src[idx] > src[best]) best = idx;
            }
          }
          const int o = c * out.spatial() + oy * out.width + ox;
          y(b, o) = src[best];
          if (tape != nullptr) argmax[static_cast<std::size_t>(b * out.size() + o)] = best;
        }
      }
    }
  }
  if (tape != nullptr) tape->indices = std::move(argmax);
  return y;
}

template <typename Scalar>
Matrix<Scalar> MaxPool<Scalar>::backward(const ParameterList<Scalar>&, const Tape<Scalar>& tape,
                                         const Matrix<Scalar>& grad_out, GradientList<Scalar>*) const {
  const int out_size = output_shape().size();
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(grad_out.rows(), this->input_shape().size());
  for (Index b = 0; b < grad_out.rows(); ++b) {
    for (int o = 0; o < out_size; ++o) {
      dx(b, tape.indices[static_cast<std::size_t>(b * out_size + o)]) += grad_out(b, o);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- GlobalAvgPool

template <typename Scalar>
Matrix<Scalar> GlobalAvgPool<Scalar>::forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x,
                                              Tape<Scalar>*) const {
  const Shape in = this->input_shape();
  Matrix<Scalar> y(x.rows(), in.channels);
  for (int c = 0; c < in.channels; ++c) {
    y.col(c) = x.middleCols(static_cast<Index>(c) * in.spatial(), in.spatial()).rowwise().mean();
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> GlobalAvgPool<Scalar>::backward(const ParameterList<Scalar>&, const Tape<Scalar>&,
                                               const Matrix<Scalar>& grad_out, GradientList<Scalar>*) const {
  const Shape in = this->input_shape();
  Matrix<Scalar> dx(grad_out.rows(), in.size());
  const auto scale = Scalar(1) / static_cast<Scalar>(in.spatial());
  for (int c = 0; c < in.channels; ++c) {
    dx.middleCols(static_cast<Index>(c) * in.spatial(), in.spatial()) =
        (grad_out.col(c) * scale).replicate(1, in.spatial());
  }
  return dx;
}

// ---------------------------------------------------------------- ChannelShuffle

template <typename Scalar>
ChannelShuffle<Scalar>::ChannelShuffle(Shape input, int groups) : Layer<Scalar>(input) {
  if (groups < 1 || input.channels % groups != 0) throw ConfigError("shuffle groups must divide channels");
  const int per_group = input.channels / groups;
  source_.resize(static_cast<std::size_t>(input.channels));
  for (int g = 0; g < groups; ++g) {
    for (int j = 0; j < per_group; ++j) {
      source_[static_cast<std::size_t>(j * groups + g)] = g * per_group + j;
    }
  }
}

template <typename Scalar>
Matrix<Scalar> ChannelShuffle<Scalar>::forward(const ParameterList<Scalar>&, const Matrix<Scalar>& x,
                                               Tape<Scalar>*) const {
  const int hw = this->input_shape().spatial();
  Matrix<Scalar> y(x.rows(), x.cols());
  for (std::size_t c = 0; c < source_.size(); ++c) {
    y.middleCols(static_cast<Index>(c) * hw, hw) = x.middleCols(static_cast<Index>(source_[c]) * hw, hw);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> ChannelShuffle<Scalar>::backward(const ParameterList<Scalar>&, const Tape<Scalar>&,
                                                const Matrix<Scalar>& grad_out, GradientList<Scalar>*) const {
  const int hw = this->input_shape().spatial();
  Matrix<Scalar> dx(grad_out.rows(), grad_out.cols());
  for (std::size_t c = 0; c < source_.size(); ++c) {
    dx.middleCols(static_cast<Index>(source_[c]) * hw, hw) = grad_out.middleCols(static_cast<Index>(c) * hw, hw);
  }
  return dx;
}

// ---------------------------------------------------------------- Residual

template <typename Scalar>
Residual<Scalar>::Residual(Shape input, std::vector<LayerPtr<Scalar>> body)
    : Layer<Scalar>(input), body_(std::move(body)) {}

template <typename Scalar>
std::vector<int> Residual<Scalar>::parameter_indices() const {
  std::vector<int> out;
  for (const auto& l : body_) {
    auto idx = l->parameter_indices();
    out.insert(out.end(), idx.begin(), idx.end());
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> Residual<Scalar>::forward(const ParameterList<Scalar>& params, const Matrix<Scalar>& x,
                                         Tape<Scalar>* tape) const {
  if (tape != nullptr) tape->children.assign(body_.size(), Tape<Scalar>{});
  Matrix<Scalar> h = x;
  for (std::size_t i = 0; i < body_.size(); ++i) {
    h = body_[i]->forward(params, h, tape != nullptr ? &tape->children[i] : nullptr);
  }
  return h + x;
}

template <typename Scalar>
Matrix<Scalar> Residual<Scalar>::backward(const ParameterList<Scalar>& params, const Tape<Scalar>& tape,
                                          const Matrix<Scalar>& grad_out, GradientList<Scalar>* grads) const {
  Matrix<Scalar> g = grad_out;
  for (std::size_t i = body_.size(); i-- > 0;) {
    g = body_[i]->backward(params, tape.children[i], g, grads);
  }
  return g + grad_out;
}

// ---------------------------------------------------------------- Network

template <typename Scalar>
Network<Scalar>::Network(Shape input, std::vector<LayerPtr<Scalar>> layers, ParameterList<Scalar> params)
    : input_(input), layers_(std::move(layers)), params_(std::move(params)) {}

template <typename Scalar>
int Network<Scalar>::num_outputs() const {
  return layers_.empty() ? input_.size() : layers_.back()->output_shape().size();
}

template <typename Scalar>
Index Network<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename Scalar>
Matrix<Scalar> Network<Scalar>::forward(const Matrix<Scalar>& x) const {
  Matrix<Scalar> h = x;
  for (const auto& l : layers_) h = l->forward(params_, h, nullptr);
  return h;
}

template <typename Scalar>
Matrix<Scalar> Network<Scalar>::forward(const Matrix<Scalar>& x, Trace<Scalar>& trace) const {
  trace.tapes.assign(layers_.size(), Tape<Scalar>{});
  trace.outputs.clear();
  trace.outputs.reserve(layers_.size());
  const Matrix<Scalar>* h = &x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    trace.outputs.push_back(layers_[i]->forward(params_, *h, &trace.tapes[i]));
    h = &trace.outputs.back();
  }
  return layers_.empty() ? x : trace.outputs.back();
}

template <typename Scalar>
Matrix<Scalar> Network<Scalar>::backward(const Trace<Scalar>& trace, const Matrix<Scalar>& grad_out,
                                         GradientList<Scalar>* grads,
                                         const std::map<int, Matrix<Scalar>>* injected) const {
  Matrix<Scalar> g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (injected != nullptr) {
      if (auto it = injected->find(static_cast<int>(i)); it != injected->end()) g += it->second;
    }
    g = layers_[i]->backward(params_, trace.tapes[i], g, grads);
  }
  return g;
}

template <typename Scalar>
int Network<Scalar>::feature_layer() const {
  return num_layers() - 2;
}

template <typename Scalar>
std::vector<int> Network<Scalar>::spatial_taps() const {
  // The last layer of each spatial stage: a spatial output followed by a
  // change of resolution or by the end of the convolutional trunk.
  std::vector<int> taps;
  for (int i = 0; i < num_layers(); ++i) {
    const Shape s = layers_[i]->output_shape();
    if (s.spatial() <= 1) continue;
    const LayerKind k = layers_[i]->kind();
    if (k != LayerKind::relu && k != LayerKind::max_pool && k != LayerKind::residual) continue;
    const bool last = i + 1 == num_layers();
    const bool stage_end = last || layers_[i + 1]->output_shape().spatial() != s.spatial() ||
                           layers_[i + 1]->kind() == LayerKind::global_avg_pool;
    if (stage_end) taps.push_back(i);
  }
  return taps;
}

template <typename Scalar>
int Network<Scalar>::prunable_unit_layer() const {
  for (int i = num_layers() - 2; i >= 0; --i) {
    const LayerKind k = layers_[i]->kind();
    if (k == LayerKind::conv2d || k == LayerKind::dense) return i;
  }
  return -1;
}

// ---------------------------------------------------------------- NetworkBuilder

template <typename Scalar>
NetworkBuilder<Scalar>::NetworkBuilder(Shape input, std::uint64_t seed)
    : input_(input), shape_(input), rng_(seed) {}

template <typename Scalar>
NetworkBuilder<Scalar>::NetworkBuilder(Shape input, ParameterList<Scalar> params, std::mt19937_64 rng)
    : input_(input), shape_(input), params_(std::move(params)), rng_(rng) {}

template <typename Scalar>
void NetworkBuilder<Scalar>::push(LayerPtr<Scalar> layer) {
  shape_ = layer->output_shape();
  layers_.push_back(std::move(layer));
}

template <typename Scalar>
int NetworkBuilder<Scalar>::add_parameter(std::string name, Matrix<Scalar> value, bool prunable) {
  params_.push_back({std::move(name), std::move(value), prunable});
  return static_cast<int>(params_.size()) - 1;
}

template <typename Scalar>
NetworkBuilder<Scalar>& NetworkBuilder<Scalar>::normalize(std::vector<double> mean, std::vector<double> stddev) {
  push(std::make_shared<Normalize<Scalar>>(shape_, std::move(mean), std::move(stddev)));
  return *this;
}

template <typename Scalar>
NetworkBuilder<Scalar>& NetworkBuilder<Scalar>::conv(int out_channels, int kernel, int groups, double init_gain) {
  const int fan_in = shape_.channels / groups * kernel * kernel;
  std::normal_distribution<double> dist(0.0, std::sqrt(init_gain / fan_in));
  Matrix<Scalar> w(out_channels, fan_in);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng_));
  const std::string prefix = "p" + std::to_string(params_.size() / 2) + ".conv";
  const int wi = add_parameter(prefix + ".weight", std::move(w), true);
  const int bi = add_parameter(prefix + ".bias", Matrix<Scalar>::Zero(out_channels, 1), false);
  push(std::make_shared<Conv2d<Scalar>>(shape_, out_channels, kernel, kernel / 2, groups, wi, bi));
  return *this;
}

template <typename Scalar>
NetworkBuilder<Scalar>& NetworkBuilder<Scalar>::dense(int outputs, double init_gain) {
  const int fan_in = shape_.size();
  std::normal_distribution<double> dist(0.0, std::sqrt(init_gain / fan_in));
  Matrix<Scalar> w(outputs, fan_in);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng_));
  const std::string prefix = "p" + std::to_string(params_.size() / 2) + ".dense";
  const int wi = add_parameter(prefix + ".weight", std::move(w), true);
  const int bi = add_parameter(prefix + ".bias", Matrix<Scalar>::Zero(outputs, 1), false);
  push(std::make_shared<Dense<Scalar>>(shape_, outputs, wi, bi));
  return *this;
}

template <typename Scalar>
NetworkBuilder<Scalar>& NetworkBuilder<Scalar>::relu() {
  push(std::make_shared<Relu<Scalar>>(shape_));
  return *this;
}

template <typename Scalar>
NetworkBuilder<Scalar>& NetworkBuilder<Scalar>::max_pool() {
  push(std::make_shared<MaxPool<Scalar>>(shape_));
  return *this;
}

template <typename Scalar>
NetworkBuilder<Scalar>& NetworkBuilder<Scalar>::global_avg_pool() {
  push(std::make_shared<GlobalAvgPool<Scalar>>(shape_));
  return *this;
}

template <typename Scalar>
NetworkBuilder<Scalar>& NetworkBuilder<Scalar>::channel_shuffle(int groups) {
  push(std::make_shared<ChannelShuffle<Scalar>>(shape_, groups));
  return *this;
}

template <typename Scalar>
Network<Scalar> NetworkBuilder<Scalar>::build() && {
  return Network<Scalar>(input_, std::move(layers_), std::move(params_));
}

template <typename Scalar>
std::uint64_t parameter_checksum(const ParameterList<Scalar>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
    const std::size_t n = static_cast<std::size_t>(p.value.size()) * sizeof(Scalar);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

#define CLEANSHEET_INSTANTIATE(S)                                                 \
  template GradientList<S> zero_gradients<S>(const ParameterList<S>&);          \
  template class Normalize<S>;                                                  \
  template class Conv2d<S>;                                                     \
  template class Dense<S>;                                                      \
  template class Relu<S>;                                                       \
  template class MaxPool<S>;                                                    \
  template class GlobalAvgPool<S>;                                              \
  template class ChannelShuffle<S>;                                             \
  template class Residual<S>;                                                   \
  template class Network<S>;                                                    \
  template class NetworkBuilder<S>;                                             \
  template std::uint64_t parameter_checksum<S>(const ParameterList<S>&);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet::nn
