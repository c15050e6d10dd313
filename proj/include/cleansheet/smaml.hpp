#pragma once

// Sequential model-agnostic meta-learning (SMAML) trigger optimisation.
//
// Each iteration draws one clean batch. Substitute i takes one training
// step, then the running trigger is adapted against it (inner loop) and
// handed on to substitute i+1. The c adapted triggers are averaged into the
// next global trigger (outer loop) and the mask-size weight λ is retuned
// from the batch attack success rate.

#include "cleansheet/distillation.hpp"
#include "cleansheet/metrics.hpp"
#include "cleansheet/trigger.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace cleansheet {

enum class TriggerOptimizerKind { smaml, joint };

std::string to_string(TriggerOptimizerKind kind);
TriggerOptimizerKind parse_trigger_optimizer(const std::string& name);

struct OptimizerSchedule {
  int max_epochs = 1;
  int iters_per_epoch = 1;
  int inner_steps = 1;
  double trigger_lr = 0.1;
  int batch_size = 64;
  TriggerOptimizerKind optimizer = TriggerOptimizerKind::smaml;

  void validate() const;
};

Json to_json(const OptimizerSchedule& schedule);

struct LambdaRecord {
  int step = 0;
  double lambda = 0.0;
  double batch_asr = 0.0;
};

struct LambdaScheduler {
  double lambda = 1e-4;
  double target_asr = 0.99;
  double up_factor = 1.5;
  double down_factor = 1.5;
  int patience = 5;
  int pass_streak = 0;
  int fail_streak = 0;
  int step = 0;
  std::vector<LambdaRecord> history;

  void validate() const;
};

Json to_json(const LambdaScheduler& scheduler, bool include_history);

// λ ← λ·up after `patience` consecutive batches at or above target_asr,
// λ ← λ/down after `patience` consecutive batches below it.
LambdaScheduler& update_lambda(LambdaScheduler& scheduler, double batch_asr);

template <typename Scalar>
struct TriggerLoss {
  double loss = 0.0;
  double cross_entropy = 0.0;
  double penalty = 0.0;
  Vector<Scalar> grad_mask_logits;
  Vector<Scalar> grad_pattern;
};

// CE(f(T(x)), y_t) + λ·‖M‖ and its gradient w.r.t. (mask logits, pattern).
// The model is only read.
template <typename Scalar>
TriggerLoss<Scalar> trigger_loss(const Classifier<Scalar>& model, const Matrix<Scalar>& batch,
                                 const Trigger<Scalar>& trigger, int target_class, double lambda);

// Sum of per-model cross-entropies plus one λ·‖M‖ term (joint objective over the ensemble).
template <typename Scalar>
TriggerLoss<Scalar> joint_trigger_loss(std::span<const Classifier<Scalar>> models, const Matrix<Scalar>& batch,
                                       const Trigger<Scalar>& trigger, int target_class, double lambda);

// Momentum-free adaptive step (RMS-normalised, bias-corrected) on the trigger variables.
template <typename Scalar>
struct TriggerOptimizerState {
  Vector<Scalar> sq_logits;
  Vector<Scalar> sq_pattern;
  int steps = 0;
  double decay = 0.99;
  double epsilon = 1e-8;
};

template <typename Scalar>
void apply_trigger_update(Trigger<Scalar>& trigger, const TriggerLoss<Scalar>& grads,
                          TriggerOptimizerState<Scalar>& state, double learning_rate);

// `steps` updates of a copy of `trigger` against `model`. The input trigger is untouched.
template <typename Scalar>
Trigger<Scalar> inner_step(const Trigger<Scalar>& trigger, const Classifier<Scalar>& model,
                           const Matrix<Scalar>& batch, int target_class, double lambda, int steps,
                           double learning_rate, TriggerOptimizerState<Scalar>& state);

// Elementwise mean of patterns and masks; logits recomputed from the mean mask.
template <typename Scalar>
Trigger<Scalar> outer_aggregate(std::span<const Trigger<Scalar>> temporaries);

struct CleanSheetConfig {
  DistillConfig distill;
  OptimizerSchedule schedule;
  LambdaScheduler lambda;
  std::vector<ModelSpec> substitutes;
  int target_class = 0;
  NormType norm_type = NormType::l1;
  std::uint64_t seed = 0;

  void validate(int num_classes) const;
};

struct EpochSummary {
  int epoch = 0;
  int teacher = 0;
  std::vector<double> val_accuracies;
  double ensemble_asr = 0.0;
  double mask_l1 = 0.0;
  double lambda = 0.0;
};

template <typename Scalar>
struct CleanSheetResult {
  TriggerArtifact<Scalar> artifact;
  EnsembleState<Scalar> ensemble;
  std::vector<EpochSummary> epochs;
  double ensemble_asr = 0.0;  // final trigger vs final substitutes on validation data
  int selected_epoch = -1;     // -1: the initial trigger
};

// Observer hook for progress reporting and invariant checks.
template <typename Scalar>
struct CleanSheetObserver {
  // After each outer aggregation: (temporaries, new global trigger).
  std::function<void(std::span<const Trigger<Scalar>>, const Trigger<Scalar>&)> on_aggregate;
  std::function<void(const EpochSummary&, const EnsembleState<Scalar>&)> on_epoch;
};

// Full trigger synthesis: substitutes trained by competitive distillation,
// trigger optimised by SMAML (or the joint objective), λ scheduled.
//
// The returned trigger is the most recent end-of-epoch global trigger whose
// ensemble ASR on `val` against the final substitutes reaches target_asr,
// falling back to the last global trigger.
template <typename Scalar>
CleanSheetResult<Scalar> run_cleansheet(const DatasetSpec& dataset, const LabeledData<Scalar>& train,
                                        const LabeledData<Scalar>& val, const CleanSheetConfig& config,
                                        std::optional<EnsembleState<Scalar>> initial_ensemble = std::nullopt,
                                        const CleanSheetObserver<Scalar>* observer = nullptr);

}  // namespace cleansheet
