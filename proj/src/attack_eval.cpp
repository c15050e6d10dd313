#include "cleansheet/attack_eval.hpp"

#include <cmath>
#include <sstream>

namespace cleansheet {

std::vector<double> default_transparency_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

template <typename Scalar>
std::vector<SweepPoint> transparency_sweep(const Classifier<Scalar>& target, const LabeledData<Scalar>& data,
                                           const Trigger<Scalar>& trigger, const std::vector<double>& grid) {
  std::vector<SweepPoint> curve;
  curve.reserve(grid.size());
  for (double t : grid) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("transparency grid values must lie in [0, 1]");
    curve.push_back({t, attack_success_rate(target, data, trigger, t)});
  }
  return curve;
}

template <typename Scalar>
AttackReport evaluate_attack(const std::vector<Classifier<Scalar>>& targets, const LabeledData<Scalar>& test,
                             const Trigger<Scalar>& trigger, const std::vector<double>& grid, Json seeds) {
  AttackReport report;
  report.target_class = trigger.target_class;
  report.norm_type = trigger.norm_type;
  report.grid = grid;
  report.seeds = std::move(seeds);
  for (const auto& target : targets) {
    AttackRow row;
    row.model_id = target.spec.id();
    row.clean_accuracy = evaluate_accuracy(target, test);
    row.asr = attack_success_rate(target, test, trigger, 1.0);
    row.baseline = label_prediction_rate(target, test, trigger.target_class);
    row.sweep = transparency_sweep(target, test, trigger, grid);
    report.rows.push_back(std::move(row));
  }
  return report;
}

Json to_json(const AttackReport& report) {
  Json rows = Json::array();
  for (const auto& r : report.rows) {
    Json sweep = Json::array();
    for (const auto& p : r.sweep) sweep.push_back({{"t", p.transparency}, {"asr", p.asr}});
    rows.push_back({{"model", r.model_id},
                    {"CA", r.clean_accuracy},
                    {"ASR", r.asr},
                    {"baseline", r.baseline},
                    {"transparency", sweep}});
  }
  return {{"target_class", report.target_class},
          {"norm_type", to_string(report.norm_type)},
          {"grid", report.grid},
          {"seeds", report.seeds},
          {"rows", rows}};
}

std::string to_csv(const AttackReport& report) {
  std::ostringstream out;
  out.precision(6);
  out << "model,CA,ASR,baseline";
  for (double t : report.grid) out << ",ASR@" << t;
  out << '\n';
  for (const auto& r : report.rows) {
    out << r.model_id << ',' << r.clean_accuracy << ',' << r.asr << ',' << r.baseline;
    for (const auto& p : r.sweep) out << ',' << p.asr;
    out << '\n';
  }
  return out.str();
}

template <typename Scalar>
std::vector<CampaignEntry<Scalar>> multi_trigger_campaign(const DatasetSpec& dataset, const LabeledData<Scalar>& train,
                                                          const LabeledData<Scalar>& val, const CleanSheetConfig& config,
                                                          const std::vector<int>& targets,
                                                          const std::optional<EnsembleState<Scalar>>& pretrained) {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= dataset.num_classes) {
      throw ConfigError("campaign target " + std::to_string(targets[i]) + " is not a valid class");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (targets[i] == targets[j]) throw ConfigError("campaign targets must be distinct");
    }
  }
  std::vector<CampaignEntry<Scalar>> entries;
  for (int y_t : targets) {
    CampaignEntry<Scalar> entry;
    entry.target_class = y_t;
    CleanSheetConfig c = config;
    c.target_class = y_t;
    try {
      auto result = run_cleansheet<Scalar>(dataset, train, val, c, pretrained);
      entry.ensemble_asr = result.ensemble_asr;
      entry.artifact = std::move(result.artifact);
    } catch (const std::exception& e) {
      entry.error = e.what();
    }
    entries.push_back(std::move(entry));
  }
  return entries;
}

void UapConfig::validate() const {
  if (!(epsilon > 0.0)) throw DomainError("UAP epsilon must be positive");
  if (steps < 0) throw ConfigError("UAP steps must be nonnegative");
  if (!(step_size > 0.0)) throw ConfigError("UAP step_size must be positive");
  if (step_size > epsilon) throw ConfigError("UAP step_size must not exceed epsilon");
  if (batch_size < 1) throw ConfigError("UAP batch_size must be positive");
}

Json to_json(const UapConfig& c) {
  return {{"epsilon", c.epsilon},         {"steps", c.steps},           {"step_size", c.step_size},
          {"target_class", c.target_class}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

template <typename Scalar>
Matrix<Scalar> apply_perturbation(const Matrix<Scalar>& batch, const Vector<Scalar>& delta) {
  if (batch.cols() != delta.size()) throw DomainError("perturbation size does not match the input width");
  return (batch.rowwise() + delta.transpose()).cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
}

template <typename Scalar>
Vector<Scalar> uap_baseline(const Classifier<Scalar>& substitute, const LabeledData<Scalar>& data,
                            const UapConfig& config) {
  config.validate();
  if (config.target_class < 0 || config.target_class >= substitute.spec.num_classes) {
    throw ConfigError("UAP target class out of range");
  }
  const LabeledData<Scalar> pool = data.without_label(config.target_class);
  Vector<Scalar> delta = Vector<Scalar>::Zero(substitute.dataset.input_shape.size());
  if (config.steps == 0) return delta;
  if (pool.empty()) throw DomainError("no examples outside the target class for the UAP");
  BatchSampler sampler(pool.size(), config.batch_size, config.seed);
  const auto eps = static_cast<Scalar>(config.epsilon);
  const auto step = static_cast<Scalar>(config.step_size);
  for (int s = 0; s < config.steps; ++s) {
    const auto idx = sampler.next();
    const Matrix<Scalar> x = apply_perturbation(gather_rows(pool.x, idx), delta);
    nn::Trace<Scalar> trace;
    const Matrix<Scalar> logits = substitute.network.forward(x, trace);
    const LossAndGrad<Scalar> ce = cross_entropy(logits, config.target_class);
    const Matrix<Scalar> g = substitute.network.backward(trace, ce.grad, nullptr);
    const Vector<Scalar> mean_grad = g.colwise().mean().transpose();
    delta -= step * mean_grad.unaryExpr([](Scalar v) { return Scalar((v > 0) - (v < 0)); });
    delta = delta.cwiseMax(-eps).cwiseMin(eps);
  }
  return delta;
}

template <typename Scalar>
double perturbation_success_rate(const Classifier<Scalar>& target, const LabeledData<Scalar>& data,
                                 const Vector<Scalar>& delta, int target_class) {
  const LabeledData<Scalar> others = data.without_label(target_class);
  if (others.empty()) throw DomainError("no examples outside the target class to attack");
  return argmax_rate(predict_logits(target, apply_perturbation(others.x, delta)), target_class);
}

#define CLEANSHEET_INSTANTIATE(S)                                                                                     \
  template std::vector<SweepPoint> transparency_sweep<S>(const Classifier<S>&, const LabeledData<S>&,                \
                                                         const Trigger<S>&, const std::vector<double>&);             \
  template AttackReport evaluate_attack<S>(const std::vector<Classifier<S>>&, const LabeledData<S>&,                 \
                                           const Trigger<S>&, const std::vector<double>&, Json);                     \
  template std::vector<CampaignEntry<S>> multi_trigger_campaign<S>(                                                  \
      const DatasetSpec&, const LabeledData<S>&, const LabeledData<S>&, const CleanSheetConfig&,                     \
      const std::vector<int>&, const std::optional<EnsembleState<S>>&);                                              \
  template Matrix<S> apply_perturbation<S>(const Matrix<S>&, const Vector<S>&);                                      \
  template Vector<S> uap_baseline<S>(const Classifier<S>&, const LabeledData<S>&, const UapConfig&);                 \
  template double perturbation_success_rate<S>(const Classifier<S>&, const LabeledData<S>&, const Vector<S>&, int);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
