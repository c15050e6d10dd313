#include "cleansheet/model_zoo.hpp"

#include <algorithm>
#include <cmath>

namespace cleansheet {

std::string to_string(ModelFamily family) {
  switch (family) {
    case ModelFamily::mlp: return "mlp";
    case ModelFamily::small_vgg: return "small-vgg";
    case ModelFamily::small_resnet: return "small-resnet";
    case ModelFamily::small_mobilenet: return "small-mobilenet";
    case ModelFamily::small_shufflenet: return "small-shufflenet";
  }
  return "unknown";
}

ModelFamily parse_model_family(const std::string& name) {
  for (auto f : {ModelFamily::mlp, ModelFamily::small_vgg, ModelFamily::small_resnet, ModelFamily::small_mobilenet,
                 ModelFamily::small_shufflenet}) {
    if (to_string(f) == name) return f;
  }
  throw ConfigError("unknown model family '" + name + "'");
}

void ModelSpec::validate() const {
  if (depth < 1 || width < 1) throw ConfigError("model depth and width must be positive");
  if (num_classes < 2) throw ConfigError("model num_classes must be >= 2");
  if (family == ModelFamily::small_shufflenet && width % 2 != 0) throw ConfigError("small-shufflenet width must be even");
}

std::string ModelSpec::id() const {
  return to_string(family) + "-d" + std::to_string(depth) + "-w" + std::to_string(width);
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (loss != "cross-entropy") throw ConfigError("unsupported loss '" + loss + "'");
}

std::uint64_t init_seed(std::uint64_t seed, int index) {
  return derive_seed(derive_seed(seed, "init"), static_cast<std::uint64_t>(index));
}

std::uint64_t order_seed(std::uint64_t seed, int index) {
  return derive_seed(derive_seed(seed, "order"), static_cast<std::uint64_t>(index));
}

namespace {

template <typename Scalar>
void require_spatial(const nn::NetworkBuilder<Scalar>& b, int min_side, const ModelSpec& spec) {
  const Shape s = b.current();
  if (s.height < min_side || s.width < min_side) {
    throw ConfigError(spec.id() + " needs spatial inputs of at least " + std::to_string(min_side) + "x" +
                      std::to_string(min_side) + ", got " + to_string(s));
  }
}

template <typename Scalar>
bool can_pool(const nn::NetworkBuilder<Scalar>& b) {
  const Shape s = b.current();
  return s.height >= 4 && s.width >= 4 && s.height % 2 == 0 && s.width % 2 == 0;
}

}  // namespace

template <typename Scalar>
Classifier<Scalar> make_classifier(const ModelSpec& spec, const DatasetSpec& dataset, std::uint64_t seed) {
  spec.validate();
  dataset.validate();
  if (spec.num_classes != dataset.num_classes) {
    throw ConfigError("model has " + std::to_string(spec.num_classes) + " outputs, dataset has " +
                      std::to_string(dataset.num_classes) + " classes");
  }
  nn::NetworkBuilder<Scalar> b(dataset.input_shape, seed);
  b.normalize(dataset.mean, dataset.stddev);
  const int w = spec.width;
  switch (spec.family) {
    case ModelFamily::mlp:
      for (int d = 0; d < spec.depth; ++d) b.dense(w).relu();
      break;
    case ModelFamily::small_vgg: {
      require_spatial(b, 1 << spec.depth, spec);
      int ch = w;
      for (int d = 0; d < spec.depth; ++d, ch *= 2) {
        b.conv(ch, 3).relu();
        if (!can_pool(b)) throw ConfigError(spec.id() + ": input too small for " + std::to_string(spec.depth) + " pooling stages");
        b.max_pool();
      }
      break;
    }
    case ModelFamily::small_resnet:
      require_spatial(b, 4, spec);
      b.conv(w, 3).relu();
      if (can_pool(b) && b.current().height >= 8) b.max_pool();
      for (int d = 0; d < spec.depth; ++d) {
        b.residual([&](nn::NetworkBuilder<Scalar>& r) { r.conv(w, 3).relu().conv(w, 3, 1, 0.5); }).relu();
      }
      b.conv(2 * w, 1).relu().global_avg_pool();
      break;
    case ModelFamily::small_mobilenet: {
      require_spatial(b, 4, spec);
      b.conv(w, 3).relu();
      int ch = w;
      for (int d = 0; d < spec.depth; ++d) {
        b.conv(ch, 3, ch).relu();
        ch *= 2;
        b.conv(ch, 1).relu();
        if (can_pool(b)) b.max_pool();
      }
      b.global_avg_pool();
      break;
    }
    case ModelFamily::small_shufflenet:
      require_spatial(b, 4, spec);
      b.conv(w, 3).relu();
      for (int d = 0; d < spec.depth; ++d) {
        b.residual([&](nn::NetworkBuilder<Scalar>& r) {
           r.conv(w, 1, 2).relu().channel_shuffle(2).conv(w, 3, w).conv(w, 1, 2, 0.5);
         }).relu();
        if (can_pool(b)) b.max_pool();
      }
      b.conv(2 * w, 1).relu().global_avg_pool();
      break;
  }
  b.dense(spec.num_classes, 1.0);
  return Classifier<Scalar>{spec, dataset, seed, std::move(b).build(), {}};
}

template <typename Scalar>
Matrix<Scalar> predict_logits(const Classifier<Scalar>& model, const Matrix<Scalar>& batch) {
  const int k = model.spec.num_classes;
  if (batch.rows() == 0) return Matrix<Scalar>(0, k);
  if (batch.cols() != model.dataset.input_shape.size()) {
    throw DomainError("batch has " + std::to_string(batch.cols()) + " features, model expects " +
                      std::to_string(model.dataset.input_shape.size()));
  }
  constexpr Index kChunk = 256;
  Matrix<Scalar> out(batch.rows(), k);
  for (Index start = 0; start < batch.rows(); start += kChunk) {
    const Index n = std::min(kChunk, batch.rows() - start);
    out.middleRows(start, n) = model.network.forward(batch.middleRows(start, n));
  }
  if (!out.allFinite()) throw NumericError("non-finite logits from " + model.spec.id());
  return out;
}

template <typename Scalar>
std::vector<int> predict_labels(const Classifier<Scalar>& model, const Matrix<Scalar>& batch) {
  const Matrix<Scalar> logits = predict_logits(model, batch);
  std::vector<int> labels(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    labels[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return labels;
}

template <typename Scalar>
double evaluate_accuracy(const Classifier<Scalar>& model, const LabeledData<Scalar>& data, int top_n) {
  if (data.empty()) throw DomainError("accuracy of empty data is undefined");
  if (top_n < 1) throw DomainError("top_n must be >= 1");
  const Matrix<Scalar> logits = predict_logits(model, data.x);
  Index correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int y = data.y[static_cast<std::size_t>(r)];
    const Scalar zy = logits(r, y);
    int rank = 0;
    for (Index j = 0; j < logits.cols(); ++j) {
      if (logits(r, j) > zy || (logits(r, j) == zy && j < y)) ++rank;
    }
    if (rank < top_n) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename Scalar>
void apply_sgd_update(Classifier<Scalar>& model, SgdState<Scalar>& state, const TrainConfig& config,
                      const nn::GradientList<Scalar>& grads) {
  auto& params = model.network.parameters();
  if (state.velocity.size() != params.size()) state.velocity = nn::zero_gradients(params);
  const auto lr = static_cast<Scalar>(config.learning_rate);
  const auto mu = static_cast<Scalar>(config.momentum);
  const auto wd = static_cast<Scalar>(config.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = state.velocity[i];
    v = mu * v + grads[i] + wd * params[i].value;
    params[i].value -= lr * v;
  }
}

template <typename Scalar>
double sgd_step(Classifier<Scalar>& model, SgdState<Scalar>& state, const TrainConfig& config,
                const Matrix<Scalar>& batch, const LogitLoss<Scalar>& loss) {
  auto& params = model.network.parameters();
  if (state.velocity.size() != params.size()) state.velocity = nn::zero_gradients(params);
  nn::Trace<Scalar> trace;
  const Matrix<Scalar> logits = model.network.forward(batch, trace);
  LossAndGrad<Scalar> lg = loss(logits);
  if (!std::isfinite(lg.loss)) throw NumericError("non-finite training loss for " + model.spec.id());
  auto grads = nn::zero_gradients(params);
  model.network.backward(trace, lg.grad, &grads);
  apply_sgd_update(model, state, config, grads);
  return lg.loss;
}

template <typename Scalar>
void continue_training(Classifier<Scalar>& model, const LabeledData<Scalar>& train, const LabeledData<Scalar>* val,
                       const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  train.validate();
  if (!(train.shape == model.dataset.input_shape) || train.num_classes != model.spec.num_classes) {
    throw ConfigError("training data " + to_string(train.shape) + " does not match model input " +
                      to_string(model.dataset.input_shape));
  }
  if (config.epochs == 0) return;
  BatchSampler sampler(train.size(), config.batch_size, seed);
  SgdState<Scalar> state;
  const Index steps = sampler.batches_per_epoch();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    for (Index s = 0; s < steps; ++s) {
      const auto idx = sampler.next();
      const Matrix<Scalar> x = gather_rows(train.x, idx);
      std::vector<int> y;
      y.reserve(idx.size());
      for (Index i : idx) y.push_back(train.y[static_cast<std::size_t>(i)]);
      total += sgd_step<Scalar>(model, state, config, x,
                                [&](const Matrix<Scalar>& logits) { return cross_entropy(logits, std::span<const int>(y)); });
    }
    const double acc = (val != nullptr && !val->empty()) ? evaluate_accuracy(model, *val) : 0.0;
    model.history.push_back({total / static_cast<double>(steps), acc});
  }
}

template <typename Scalar>
Classifier<Scalar> train_classifier(const ModelSpec& spec, const DatasetSpec& dataset,
                                    const LabeledData<Scalar>& train, const LabeledData<Scalar>& val,
                                    const TrainConfig& config) {
  config.validate();
  auto model = make_classifier<Scalar>(spec, dataset, init_seed(config.seed, 0));
  continue_training(model, train, &val, config, order_seed(config.seed, 0));
  return model;
}

Json to_json(const ModelSpec& spec) {
  return {{"family", to_string(spec.family)}, {"depth", spec.depth}, {"width", spec.width}, {"num_classes", spec.num_classes}};
}

ModelSpec model_spec_from_json(const Json& j) {
  ModelSpec s;
  s.family = parse_model_family(j.at("family").get<std::string>());
  s.depth = j.at("depth").get<int>();
  s.width = j.at("width").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.validate();
  return s;
}

Json to_json(const DatasetSpec& spec) {
  return {{"name", spec.name},
          {"num_classes", spec.num_classes},
          {"input_shape", {spec.input_shape.channels, spec.input_shape.height, spec.input_shape.width}},
          {"split_sizes", {spec.train_size, spec.val_size, spec.test_size}},
          {"mean", spec.mean},
          {"stddev", spec.stddev}};
}

DatasetSpec dataset_spec_from_json(const Json& j) {
  DatasetSpec s;
  s.name = j.at("name").get<std::string>();
  s.num_classes = j.at("num_classes").get<int>();
  const auto& shape = j.at("input_shape");
  s.input_shape = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
  const auto& sizes = j.at("split_sizes");
  s.train_size = sizes.at(0).get<Index>();
  s.val_size = sizes.at(1).get<Index>();
  s.test_size = sizes.at(2).get<Index>();
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  s.validate();
  return s;
}

Json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},               {"batch_size", c.batch_size}, {"seed", c.seed},
          {"loss", c.loss}};
}

template <typename Scalar>
void save_classifier(const std::filesystem::path& path, const Classifier<Scalar>& model) {
  Archive archive;
  Json history = Json::array();
  for (const auto& h : model.history) history.push_back({{"train_loss", h.train_loss}, {"val_accuracy", h.val_accuracy}});
  archive.metadata = {{"kind", "classifier"},
                      {"spec", to_json(model.spec)},
                      {"dataset", to_json(model.dataset)},
                      {"seed", model.seed},
                      {"history", history}};
  for (const auto& p : model.network.parameters()) archive.put(p.name, p.value);
  write_archive(path, archive);
}

template <typename Scalar>
Classifier<Scalar> load_classifier(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  const Json& meta = archive.metadata;
  Classifier<Scalar> model;
  try {
    model = make_classifier<Scalar>(model_spec_from_json(meta.at("spec")), dataset_spec_from_json(meta.at("dataset")),
                                    meta.at("seed").get<std::uint64_t>());
    for (const auto& h : meta.at("history")) {
      model.history.push_back({h.at("train_loss").get<double>(), h.at("val_accuracy").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed classifier metadata: " + e.what());
  }
  for (auto& p : model.network.parameters()) {
    Matrix<Scalar> value = archive.get<Scalar>(p.name);
    if (value.rows() != p.value.rows() || value.cols() != p.value.cols()) {
      throw ParseError(path.string() + ": array '" + p.name + "' has the wrong shape");
    }
    p.value = std::move(value);
  }
  return model;
}

#define CLEANSHEET_INSTANTIATE(S)                                                                                  \
  template Classifier<S> make_classifier<S>(const ModelSpec&, const DatasetSpec&, std::uint64_t);                 \
  template Matrix<S> predict_logits<S>(const Classifier<S>&, const Matrix<S>&);                                   \
  template std::vector<int> predict_labels<S>(const Classifier<S>&, const Matrix<S>&);                            \
  template double evaluate_accuracy<S>(const Classifier<S>&, const LabeledData<S>&, int);                         \
  template void apply_sgd_update<S>(Classifier<S>&, SgdState<S>&, const TrainConfig&,                            \
                                    const nn::GradientList<S>&);                                                  \
  template double sgd_step<S>(Classifier<S>&, SgdState<S>&, const TrainConfig&, const Matrix<S>&,                 \
                              const LogitLoss<S>&);                                                               \
  template void continue_training<S>(Classifier<S>&, const LabeledData<S>&, const LabeledData<S>*,                \
                                     const TrainConfig&, std::uint64_t);                                          \
  template Classifier<S> train_classifier<S>(const ModelSpec&, const DatasetSpec&, const LabeledData<S>&,         \
                                             const LabeledData<S>&, const TrainConfig&);                          \
  template void save_classifier<S>(const std::filesystem::path&, const Classifier<S>&);                           \
  template Classifier<S> load_classifier<S>(const std::filesystem::path&);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
