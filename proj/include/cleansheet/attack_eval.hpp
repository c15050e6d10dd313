#pragma once

// Attack evaluation against target models: clean accuracy, attack success
// rate, transparency sweeps, multi-class campaigns and a universal
// adversarial perturbation baseline.

#include "cleansheet/metrics.hpp"
#include "cleansheet/smaml.hpp"

#include <optional>
#include <string>
#include <vector>

namespace cleansheet {

struct SweepPoint {
  double transparency = 0.0;
  double asr = 0.0;
};

std::vector<double> default_transparency_grid();

template <typename Scalar>
std::vector<SweepPoint> transparency_sweep(const Classifier<Scalar>& target, const LabeledData<Scalar>& data,
                                           const Trigger<Scalar>& trigger, const std::vector<double>& grid);

struct AttackRow {
  std::string model_id;
  double clean_accuracy = 0.0;  // untriggered test data
  double asr = 0.0;             // t = 1
  double baseline = 0.0;        // clean y_t prediction rate on non-y_t data
  std::vector<SweepPoint> sweep;
};

struct AttackReport {
  int target_class = 0;
  NormType norm_type = NormType::l1;
  std::vector<double> grid;
  std::vector<AttackRow> rows;
  Json seeds = Json::object();
};

template <typename Scalar>
AttackReport evaluate_attack(const std::vector<Classifier<Scalar>>& targets, const LabeledData<Scalar>& test,
                             const Trigger<Scalar>& trigger, const std::vector<double>& grid, Json seeds);

Json to_json(const AttackReport& report);
// model,CA,ASR,baseline,then one ASR@t column per grid point
std::string to_csv(const AttackReport& report);

template <typename Scalar>
struct CampaignEntry {
  int target_class = 0;
  std::optional<TriggerArtifact<Scalar>> artifact;
  double ensemble_asr = 0.0;
  std::string error;  // empty on success
};

// One independent trigger synthesis per class. A pretrained ensemble, when
// given, is copied into each run. A failing class is recorded and skipped.
template <typename Scalar>
std::vector<CampaignEntry<Scalar>> multi_trigger_campaign(const DatasetSpec& dataset, const LabeledData<Scalar>& train,
                                                          const LabeledData<Scalar>& val, const CleanSheetConfig& config,
                                                          const std::vector<int>& targets,
                                                          const std::optional<EnsembleState<Scalar>>& pretrained = {});

struct UapConfig {
  double epsilon = 0.1;
  int steps = 100;
  double step_size = 0.01;
  int target_class = 0;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

Json to_json(const UapConfig& config);

// Iterative targeted universal perturbation: signed steps down the batch-mean
// target cross-entropy, projected to the l-inf ball of radius epsilon.
// Returned as a CHW vector.
template <typename Scalar>
Vector<Scalar> uap_baseline(const Classifier<Scalar>& substitute, const LabeledData<Scalar>& data,
                            const UapConfig& config);

// clamp(x + delta) row-wise.
template <typename Scalar>
Matrix<Scalar> apply_perturbation(const Matrix<Scalar>& batch, const Vector<Scalar>& delta);

// Fraction of perturbed non-y_t inputs classified as y_t.
template <typename Scalar>
double perturbation_success_rate(const Classifier<Scalar>& target, const LabeledData<Scalar>& data,
                                 const Vector<Scalar>& delta, int target_class);

}  // namespace cleansheet
