#pragma once

// Defense battery run against a target model: weight/unit pruning,
// fine-tuning, attention distillation (NAD), and two input-level detectors
// (entropy under superposition, Gram-statistic anomaly index).

#include "cleansheet/metrics.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace cleansheet {

enum class PruneMethod { magnitude, activation };

std::string to_string(PruneMethod method);
PruneMethod parse_prune_method(const std::string& name);

// magnitude: zero the floor(ratio * N) smallest |w| over all conv/dense
// weights (ties by position). activation: zero the floor(ratio * units)
// output units of the last hidden conv/dense layer with the lowest mean
// activation on `clean`. The input model is not modified.
template <typename Scalar>
Classifier<Scalar> prune_model(const Classifier<Scalar>& model, double ratio, PruneMethod method,
                               const LabeledData<Scalar>* clean = nullptr);

struct PrunePoint {
  double ratio = 0.0;
  double clean_accuracy = 0.0;
  double asr = 0.0;
};

template <typename Scalar>
std::vector<PrunePoint> prune_sweep(const Classifier<Scalar>& model, const std::vector<double>& ratios,
                                    PruneMethod method, const LabeledData<Scalar>& clean,
                                    const LabeledData<Scalar>& test, const Trigger<Scalar>& trigger);

struct FineTuneConfig {
  double clean_fraction = 0.1;
  int epochs = 5;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] TrainConfig train_config() const;
};

Json to_json(const FineTuneConfig& config);

// Seeded subset of round(clean_fraction * n) training examples (at least one).
template <typename Scalar>
LabeledData<Scalar> fine_tune_subset(const LabeledData<Scalar>& train, const FineTuneConfig& config);

template <typename Scalar>
Classifier<Scalar> fine_tune(const Classifier<Scalar>& model, const LabeledData<Scalar>& train,
                             const FineTuneConfig& config);

// Channel-wise sum of squared activations per position, L2-normalised per
// sample (left unnormalised when the norm is below 1e-12). Result: batch x (H*W).
template <typename Scalar>
Matrix<Scalar> attention_map(const Matrix<Scalar>& activation, const Shape& shape);

struct NadConfig {
  FineTuneConfig fine_tune;  // teacher recipe; the student reuses its subset and optimiser settings
  double beta = 500.0;       // split evenly over the attention layers
  int epochs = 5;

  void validate() const;
};

Json to_json(const NadConfig& config);

// Mean over the batch of sum_l (beta / L) * ||A_s^l - A_t^l||_2 and its
// gradient w.r.t. the student activations at each tap.
template <typename Scalar>
double attention_loss(const nn::Trace<Scalar>& student, const nn::Trace<Scalar>& teacher,
                      const nn::Network<Scalar>& network, double beta, std::map<int, Matrix<Scalar>>* grads);

template <typename Scalar>
Classifier<Scalar> nad_distill(const Classifier<Scalar>& model, const LabeledData<Scalar>& train,
                               const NadConfig& config);

struct StripConfig {
  int n_overlays = 64;
  std::uint64_t seed = 0;
};

struct StripReport {
  double mean_clean = 0.0;
  double std_clean = 0.0;
  double threshold = 0.0;
  double p_escape = 0.0;         // inputs whose entropy reaches the threshold
  double clean_pass_rate = 0.0;  // calibration examples whose entropy reaches the threshold
  int n_overlays = 0;
  std::vector<double> clean_entropies;
  std::vector<double> input_entropies;
};

Json to_json(const StripReport& report, bool include_entropies);

// Mean softmax entropy of each input blended (pixel-wise mean) with
// n_overlays images drawn from `pool`.
template <typename Scalar>
std::vector<double> strip_entropies(const Classifier<Scalar>& model, const Matrix<Scalar>& inputs,
                                    const Matrix<Scalar>& pool, int n_overlays, std::uint64_t seed);

// floor(0.01 n)-th smallest clean entropy: at least 99% of calibration
// entropies are >= the threshold.
double strip_threshold(std::vector<double> clean_entropies);

template <typename Scalar>
StripReport strip_detect(const Classifier<Scalar>& model, const Matrix<Scalar>& inputs,
                         const LabeledData<Scalar>& clean_holdout, const StripConfig& config);

struct BeatrixConfig {
  int min_order = 1;
  int max_order = 9;
  double eta = 1.4826;
  double anomaly_threshold = std::exp(2.0);
  int tap_layer = -1;  // -1: last spatial tap, or the feature layer when there is none

  void validate() const;
};

Json to_json(const BeatrixConfig& config);

// Median of a non-empty sample (mean of the two middle values for even n).
double median(std::vector<double> values);
// eta * median(|v - median(v)|)
double scaled_mad(const std::vector<double>& values, double eta);
// |v - median| / MAD for each value, with the degenerate-MAD rule.
std::vector<double> anomaly_indices(const std::vector<double>& values, double eta);
// |median(suspect) - median(reference)| / MAD(reference), with the degenerate-MAD rule.
double anomaly_index(const std::vector<double>& suspect, const std::vector<double>& reference, double eta);

// Upper triangles of sign-preserving r-th roots of order-r Gram matrices, one row per input.
template <typename Scalar>
Matrix<double> gram_features(const Classifier<Scalar>& model, const Matrix<Scalar>& inputs,
                             const BeatrixConfig& config);

struct ClassDetection {
  int label = 0;
  Index suspects = 0;
  Index reference = 0;
  double index = 0.0;
  bool flagged = false;
};

struct DetectionReport {
  std::vector<ClassDetection> classes;
  std::vector<int> flagged;
  std::vector<std::string> warnings;
  bool detected = false;
};

Json to_json(const DetectionReport& report);

template <typename Scalar>
DetectionReport beatrix_detect(const Classifier<Scalar>& model, const Matrix<Scalar>& suspects,
                               const LabeledData<Scalar>& clean_holdout, const BeatrixConfig& config);

}  // namespace cleansheet
