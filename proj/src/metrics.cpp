#include "cleansheet/metrics.hpp"

namespace cleansheet {

template <typename Scalar>
double argmax_rate(const Matrix<Scalar>& logits, int label) {
  if (logits.rows() == 0) throw DomainError("rate over an empty batch is undefined");
  Index hits = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    if (arg == label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

template <typename Scalar>
double attack_success_rate(const Classifier<Scalar>& target, const LabeledData<Scalar>& data,
                           const Trigger<Scalar>& trigger, double transparency) {
  const LabeledData<Scalar> others = data.without_label(trigger.target_class);
  if (others.empty()) throw DomainError("no examples outside the target class to attack");
  return argmax_rate(predict_logits(target, apply_trigger(others.x, trigger, transparency)), trigger.target_class);
}

template <typename Scalar>
double ensemble_attack_success_rate(const std::vector<Classifier<Scalar>>& models, const LabeledData<Scalar>& data,
                                    const Trigger<Scalar>& trigger, double transparency) {
  if (models.empty()) throw DomainError("ensemble is empty");
  const LabeledData<Scalar> others = data.without_label(trigger.target_class);
  if (others.empty()) throw DomainError("no examples outside the target class to attack");
  const Matrix<Scalar> triggered = apply_trigger(others.x, trigger, transparency);
  double total = 0.0;
  for (const auto& m : models) total += argmax_rate(predict_logits(m, triggered), trigger.target_class);
  return total / static_cast<double>(models.size());
}

template <typename Scalar>
double label_prediction_rate(const Classifier<Scalar>& model, const LabeledData<Scalar>& data, int label) {
  const LabeledData<Scalar> others = data.without_label(label);
  if (others.empty()) throw DomainError("no examples outside the target class");
  return argmax_rate(predict_logits(model, others.x), label);
}

#define CLEANSHEET_INSTANTIATE(S)                                                                                 \
  template double argmax_rate<S>(const Matrix<S>&, int);                                                         \
  template double attack_success_rate<S>(const Classifier<S>&, const LabeledData<S>&, const Trigger<S>&, double); \
  template double ensemble_attack_success_rate<S>(const std::vector<Classifier<S>>&, const LabeledData<S>&,      \
                                                  const Trigger<S>&, double);                                    \
  template double label_prediction_rate<S>(const Classifier<S>&, const LabeledData<S>&, int);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
