#pragma once

#include "cleansheet/archive.hpp"
#include "cleansheet/data.hpp"
#include "cleansheet/losses.hpp"
#include "cleansheet/nn.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cleansheet {

enum class ModelFamily { mlp, small_vgg, small_resnet, small_mobilenet, small_shufflenet };

std::string to_string(ModelFamily family);
ModelFamily parse_model_family(const std::string& name);

struct ModelSpec {
  ModelFamily family = ModelFamily::mlp;
  int depth = 2;
  int width = 16;
  int num_classes = 2;

  void validate() const;
  [[nodiscard]] std::string id() const;
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct TrainConfig {
  double learning_rate = 0.2;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int epochs = 1;
  int batch_size = 64;
  std::uint64_t seed = 0;
  std::string loss = "cross-entropy";

  void validate() const;
};

struct EpochRecord {
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

template <typename Scalar>
struct Classifier {
  ModelSpec spec;
  DatasetSpec dataset;
  std::uint64_t seed = 0;
  nn::Network<Scalar> network;
  std::vector<EpochRecord> history;
};

// Fresh classifier with seed-derived initial parameters.
template <typename Scalar>
Classifier<Scalar> make_classifier(const ModelSpec& spec, const DatasetSpec& dataset, std::uint64_t seed);

// Raw logits (batch x k). Throws NumericError if any output is non-finite.
template <typename Scalar>
Matrix<Scalar> predict_logits(const Classifier<Scalar>& model, const Matrix<Scalar>& batch);

template <typename Scalar>
std::vector<int> predict_labels(const Classifier<Scalar>& model, const Matrix<Scalar>& batch);

// Top-n accuracy, evaluated in chunks of `chunk` rows.
template <typename Scalar>
double evaluate_accuracy(const Classifier<Scalar>& model, const LabeledData<Scalar>& data, int top_n = 1);

// SGD with momentum and L2 weight decay (decay added to the gradient).
template <typename Scalar>
struct SgdState {
  nn::GradientList<Scalar> velocity;
};

template <typename Scalar>
using LogitLoss = std::function<LossAndGrad<Scalar>(const Matrix<Scalar>& logits)>;

// v = momentum * v + g + weight_decay * w;  w -= lr * v
template <typename Scalar>
void apply_sgd_update(Classifier<Scalar>& model, SgdState<Scalar>& state, const TrainConfig& config,
                      const nn::GradientList<Scalar>& grads);

// One optimizer step on `batch` with the given loss; returns the loss value.
// Throws NumericError on a non-finite loss.
template <typename Scalar>
double sgd_step(Classifier<Scalar>& model, SgdState<Scalar>& state, const TrainConfig& config,
                const Matrix<Scalar>& batch, const LogitLoss<Scalar>& loss);

// Stream ids used to derive the initialisation and data-order seeds of member `index`.
std::uint64_t init_seed(std::uint64_t seed, int index);
std::uint64_t order_seed(std::uint64_t seed, int index);

template <typename Scalar>
Classifier<Scalar> train_classifier(const ModelSpec& spec, const DatasetSpec& dataset,
                                    const LabeledData<Scalar>& train, const LabeledData<Scalar>& val,
                                    const TrainConfig& config);

// Continues training an existing classifier (used by fine-tuning).
template <typename Scalar>
void continue_training(Classifier<Scalar>& model, const LabeledData<Scalar>& train, const LabeledData<Scalar>* val,
                       const TrainConfig& config, std::uint64_t order_seed);

Json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const Json& j);
Json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const Json& j);
Json to_json(const TrainConfig& config);

template <typename Scalar>
void save_classifier(const std::filesystem::path& path, const Classifier<Scalar>& model);

template <typename Scalar>
Classifier<Scalar> load_classifier(const std::filesystem::path& path);

}  // namespace cleansheet
