#pragma once

#include "cleansheet/model_zoo.hpp"
#include "cleansheet/trigger.hpp"

#include <vector>

namespace cleansheet {

// Fraction of triggered inputs classified as the trigger's target class.
// Examples whose true label already is the target are excluded first.
template <typename Scalar>
double attack_success_rate(const Classifier<Scalar>& target, const LabeledData<Scalar>& data,
                           const Trigger<Scalar>& trigger, double transparency = 1.0);

// Mean attack success rate over a set of models.
template <typename Scalar>
double ensemble_attack_success_rate(const std::vector<Classifier<Scalar>>& models, const LabeledData<Scalar>& data,
                                    const Trigger<Scalar>& trigger, double transparency = 1.0);

// Rate at which the model predicts `label` on clean inputs whose true label differs.
template <typename Scalar>
double label_prediction_rate(const Classifier<Scalar>& model, const LabeledData<Scalar>& data, int label);

// Fraction of rows of `logits` whose argmax (lowest index on ties) equals `label`.
template <typename Scalar>
double argmax_rate(const Matrix<Scalar>& logits, int label);

}  // namespace cleansheet
