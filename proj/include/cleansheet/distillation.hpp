#pragma once

// Competitive distillation: c substitutes trained side by side. Each epoch
// the member with the best validation accuracy is the teacher; it learns
// from hard labels only while every other member distils its tempered
// soft labels.

#include "cleansheet/model_zoo.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace cleansheet {

struct DistillConfig {
  int num_substitutes = 1;
  double temperature = 1.0;
  double alpha = 0.5;
  bool scale_kl_by_temperature_squared = false;
  TrainConfig train;

  void validate() const;
};

Json to_json(const DistillConfig& config);

// Row-wise softmax(z / h).
template <typename Scalar>
Matrix<Scalar> soft_labels(const Matrix<Scalar>& logits, double temperature);

// Row-wise KL(softmax(student) || softmax(teacher / h)) and its gradient
// w.r.t. the student logits (batch mean).
template <typename Scalar>
LossAndGrad<Scalar> kl_to_teacher(const Matrix<Scalar>& student_logits, const Matrix<Scalar>& teacher_logits,
                                  double temperature);

// alpha * KL(softmax(student) || softmax(teacher / h)) + (1 - alpha) * CE(student, label),
// averaged over the batch. The student is untempered.
template <typename Scalar>
LossAndGrad<Scalar> kd_loss(const Matrix<Scalar>& student_logits, const Matrix<Scalar>& teacher_logits,
                            std::span<const int> labels, double alpha, double temperature,
                            bool scale_by_temperature_squared = false);

template <typename Scalar>
struct EnsembleState {
  std::vector<Classifier<Scalar>> models;
  std::vector<SgdState<Scalar>> optimizers;
  std::vector<int> tm;  // one-hot teacher indicator
  int epoch = 0;
  std::vector<double> val_accuracies;
  std::vector<int> teacher_history;                  // teacher at the start of each epoch
  std::vector<std::vector<double>> val_history;      // per completed epoch
  std::optional<BatchSampler> sampler;               // shared batch order

  [[nodiscard]] int teacher() const;
  [[nodiscard]] int size() const { return static_cast<int>(models.size()); }
};

// Member i starts from init_seed(seed, i); the shared batch order uses
// order_seed(seed, 0); the first teacher is drawn uniformly at random.
template <typename Scalar>
EnsembleState<Scalar> init_ensemble(const std::vector<ModelSpec>& specs, const DatasetSpec& dataset,
                                    const DistillConfig& config, Index train_size, std::uint64_t seed);

// Argmax of validation accuracy (ties to the lowest index); updates tm.
int select_teacher(const std::vector<double>& val_accuracies);

template <typename Scalar>
int select_teacher(EnsembleState<Scalar>& state, const LabeledData<Scalar>& val);

// Teacher logits for a batch, computed once per iteration before any member moves.
template <typename Scalar>
Matrix<Scalar> teacher_logits(const EnsembleState<Scalar>& state, const Matrix<Scalar>& batch);

// One SGD step of member `index`: hard-label loss if it is the teacher, kd_loss otherwise.
template <typename Scalar>
double train_member_step(EnsembleState<Scalar>& state, int index, const DistillConfig& config,
                         const Matrix<Scalar>& batch, std::span<const int> labels,
                         const Matrix<Scalar>& teacher_batch_logits);

// Records a finished epoch: per-member history, teacher re-election, epoch counter.
template <typename Scalar>
void finish_ensemble_epoch(EnsembleState<Scalar>& state, const LabeledData<Scalar>& val,
                           const std::vector<double>& mean_losses);

template <typename Scalar>
EnsembleState<Scalar>& train_ensemble_epoch(EnsembleState<Scalar>& state, const LabeledData<Scalar>& train,
                                            const LabeledData<Scalar>& val, const DistillConfig& config);

template <typename Scalar>
void save_ensemble(const std::filesystem::path& directory, const EnsembleState<Scalar>& state,
                   const DistillConfig& config);

template <typename Scalar>
EnsembleState<Scalar> load_ensemble(const std::filesystem::path& directory, Index train_size, std::uint64_t seed);

}  // namespace cleansheet
