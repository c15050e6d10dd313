#include "cleansheet/smaml.hpp"

#include <algorithm>
#include <cmath>

namespace cleansheet {

std::string to_string(TriggerOptimizerKind kind) { return kind == TriggerOptimizerKind::smaml ? "smaml" : "joint"; }

TriggerOptimizerKind parse_trigger_optimizer(const std::string& name) {
  if (name == "smaml") return TriggerOptimizerKind::smaml;
  if (name == "joint") return TriggerOptimizerKind::joint;
  throw ConfigError("unknown trigger optimizer '" + name + "' (expected smaml or joint)");
}

void OptimizerSchedule::validate() const {
  if (max_epochs < 0) throw ConfigError("max_epochs must be nonnegative");
  if (iters_per_epoch < 1) throw ConfigError("iters_per_epoch must be positive");
  if (inner_steps < 0) throw ConfigError("inner_steps must be nonnegative");
  if (!(trigger_lr > 0.0)) throw ConfigError("trigger_lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
}

Json to_json(const OptimizerSchedule& s) {
  return {{"max_epochs", s.max_epochs},   {"iters_per_epoch", s.iters_per_epoch}, {"inner_steps", s.inner_steps},
          {"trigger_lr", s.trigger_lr},   {"batch_size", s.batch_size},           {"optimizer", to_string(s.optimizer)}};
}

void LambdaScheduler::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (!(target_asr > 0.0 && target_asr <= 1.0)) throw ConfigError("target_asr must lie in (0, 1]");
  if (!(up_factor > 1.0) || !(down_factor > 1.0)) throw ConfigError("lambda up/down factors must exceed 1");
  if (patience < 1) throw ConfigError("lambda patience must be positive");
}

Json to_json(const LambdaScheduler& s, bool include_history) {
  Json j = {{"initial", s.history.empty() ? s.lambda : s.history.front().lambda},
            {"target_asr", s.target_asr},
            {"up_factor", s.up_factor},
            {"down_factor", s.down_factor},
            {"patience", s.patience}};
  if (include_history) {
    Json h = Json::array();
    for (const auto& r : s.history) h.push_back({r.step, r.lambda, r.batch_asr});
    j["history"] = std::move(h);
  }
  return j;
}

LambdaScheduler& update_lambda(LambdaScheduler& s, double batch_asr) {
  if (batch_asr >= s.target_asr) {
    s.fail_streak = 0;
    if (++s.pass_streak >= s.patience) {
      s.lambda *= s.up_factor;
      s.pass_streak = 0;
    }
  } else {
    s.pass_streak = 0;
    if (++s.fail_streak >= s.patience) {
      s.lambda /= s.down_factor;
      s.fail_streak = 0;
    }
  }
  s.history.push_back({s.step++, s.lambda, batch_asr});
  return s;
}

namespace {

// Accumulates d(CE)/d(trigger) given the gradient w.r.t. the triggered batch.
template <typename Scalar>
void chain_to_trigger(const Matrix<Scalar>& grad_input, const Matrix<Scalar>& batch, const Trigger<Scalar>& trigger,
                      Vector<Scalar>& grad_mask, Vector<Scalar>& grad_pattern) {
  const int hw = trigger.shape.spatial();
  for (int c = 0; c < trigger.shape.channels; ++c) {
    const auto g = grad_input.middleCols(static_cast<Index>(c) * hw, hw);
    const auto x = batch.middleCols(static_cast<Index>(c) * hw, hw);
    const auto delta = trigger.pattern.segment(static_cast<Index>(c) * hw, hw);
    const Vector<Scalar> g_sum = g.colwise().sum().transpose();
    grad_pattern.segment(static_cast<Index>(c) * hw, hw).array() += g_sum.array() * trigger.mask.array();
    // Σ_b g·(Δ − x) = Δ·Σ_b g − Σ_b g·x
    const Vector<Scalar> gx = g.cwiseProduct(x).colwise().sum().transpose();
    grad_mask.array() += delta.array() * g_sum.array() - gx.array();
  }
}

template <typename Scalar>
void accumulate_model(const Classifier<Scalar>& model, const Matrix<Scalar>& batch, const Matrix<Scalar>& triggered,
                      const Trigger<Scalar>& trigger, int target_class, TriggerLoss<Scalar>& out,
                      Vector<Scalar>& grad_mask) {
  nn::Trace<Scalar> trace;
  const Matrix<Scalar> logits = model.network.forward(triggered, trace);
  if (!logits.allFinite()) throw NumericError("non-finite logits in trigger loss (" + model.spec.id() + ")");
  const LossAndGrad<Scalar> ce = cross_entropy(logits, target_class);
  const Matrix<Scalar> grad_input = model.network.backward(trace, ce.grad, nullptr);
  chain_to_trigger(grad_input, batch, trigger, grad_mask, out.grad_pattern);
  out.cross_entropy += ce.loss;
}

template <typename Scalar>
TriggerLoss<Scalar> finish_loss(TriggerLoss<Scalar> out, const Trigger<Scalar>& trigger, Vector<Scalar> grad_mask,
                                double lambda) {
  out.penalty = lambda * mask_norm(trigger.mask, trigger.norm_type);
  out.loss = out.cross_entropy + out.penalty;
  if (!std::isfinite(out.loss)) throw NumericError("non-finite trigger loss");
  grad_mask += static_cast<Scalar>(lambda) * mask_norm_gradient(trigger.mask, trigger.norm_type);
  out.grad_mask_logits = grad_mask.cwiseProduct(mask_derivative(trigger.mask_logits));
  return out;
}

}  // namespace

template <typename Scalar>
TriggerLoss<Scalar> trigger_loss(const Classifier<Scalar>& model, const Matrix<Scalar>& batch,
                                 const Trigger<Scalar>& trigger, int target_class, double lambda) {
  trigger.validate(model.dataset.input_shape);
  TriggerLoss<Scalar> out;
  out.grad_pattern = Vector<Scalar>::Zero(trigger.pattern.size());
  Vector<Scalar> grad_mask = Vector<Scalar>::Zero(trigger.mask.size());
  const Matrix<Scalar> triggered = apply_trigger(batch, trigger, 1.0);
  accumulate_model(model, batch, triggered, trigger, target_class, out, grad_mask);
  return finish_loss(std::move(out), trigger, std::move(grad_mask), lambda);
}

template <typename Scalar>
TriggerLoss<Scalar> joint_trigger_loss(std::span<const Classifier<Scalar>> models, const Matrix<Scalar>& batch,
                                       const Trigger<Scalar>& trigger, int target_class, double lambda) {
  if (models.empty()) throw DomainError("joint trigger loss needs at least one model");
  trigger.validate(models.front().dataset.input_shape);
  TriggerLoss<Scalar> out;
  out.grad_pattern = Vector<Scalar>::Zero(trigger.pattern.size());
  Vector<Scalar> grad_mask = Vector<Scalar>::Zero(trigger.mask.size());
  const Matrix<Scalar> triggered = apply_trigger(batch, trigger, 1.0);
  for (const auto& m : models) accumulate_model(m, batch, triggered, trigger, target_class, out, grad_mask);
  return finish_loss(std::move(out), trigger, std::move(grad_mask), lambda);
}

template <typename Scalar>
void apply_trigger_update(Trigger<Scalar>& trigger, const TriggerLoss<Scalar>& grads,
                          TriggerOptimizerState<Scalar>& state, double learning_rate) {
  if (state.sq_logits.size() != trigger.mask_logits.size()) {
    state.sq_logits = Vector<Scalar>::Zero(trigger.mask_logits.size());
    state.sq_pattern = Vector<Scalar>::Zero(trigger.pattern.size());
    state.steps = 0;
  }
  ++state.steps;
  const auto rho = static_cast<Scalar>(state.decay);
  const auto correction = static_cast<Scalar>(1.0 - std::pow(state.decay, state.steps));
  const auto eps = static_cast<Scalar>(state.epsilon);
  const auto lr = static_cast<Scalar>(learning_rate);
  state.sq_logits = rho * state.sq_logits + (Scalar(1) - rho) * grads.grad_mask_logits.cwiseAbs2();
  state.sq_pattern = rho * state.sq_pattern + (Scalar(1) - rho) * grads.grad_pattern.cwiseAbs2();
  const Vector<Scalar> step_logits =
      (lr * grads.grad_mask_logits.array() / ((state.sq_logits.array() / correction).sqrt() + eps)).matrix();
  const Vector<Scalar> step_pattern =
      (lr * grads.grad_pattern.array() / ((state.sq_pattern.array() / correction).sqrt() + eps)).matrix();
  trigger.set_mask_logits(trigger.mask_logits - step_logits);
  trigger.pattern -= step_pattern;
  trigger.clamp_pattern();
}

template <typename Scalar>
Trigger<Scalar> inner_step(const Trigger<Scalar>& trigger, const Classifier<Scalar>& model,
                           const Matrix<Scalar>& batch, int target_class, double lambda, int steps,
                           double learning_rate, TriggerOptimizerState<Scalar>& state) {
  Trigger<Scalar> adapted = trigger;
  for (int s = 0; s < steps; ++s) {
    const TriggerLoss<Scalar> g = trigger_loss(model, batch, adapted, target_class, lambda);
    apply_trigger_update(adapted, g, state, learning_rate);
  }
  return adapted;
}

template <typename Scalar>
Trigger<Scalar> outer_aggregate(std::span<const Trigger<Scalar>> temporaries) {
  if (temporaries.empty()) throw DomainError("cannot aggregate an empty trigger list");
  const Trigger<Scalar>& first = temporaries.front();
  Vector<Scalar> mask = Vector<Scalar>::Zero(first.mask.size());
  Vector<Scalar> pattern = Vector<Scalar>::Zero(first.pattern.size());
  for (const auto& t : temporaries) {
    t.validate(first.shape);
    mask += t.mask;
    pattern += t.pattern;
  }
  const auto inv = Scalar(1) / static_cast<Scalar>(temporaries.size());
  Trigger<Scalar> out = first;
  out.mask = mask * inv;
  out.pattern = pattern * inv;
  out.mask_logits = logits_from_mask(out.mask);
  return out;
}

void CleanSheetConfig::validate(int num_classes) const {
  distill.validate();
  schedule.validate();
  lambda.validate();
  if (static_cast<int>(substitutes.size()) != distill.num_substitutes) {
    throw ConfigError("substitute list length must equal num_substitutes");
  }
  for (const auto& s : substitutes) s.validate();
  if (target_class < 0 || target_class >= num_classes) {
    throw ConfigError("target class " + std::to_string(target_class) + " outside [0, " + std::to_string(num_classes) + ")");
  }
  if (schedule.batch_size != distill.train.batch_size) {
    throw ConfigError("schedule.batch_size must equal the substitute training batch size (one batch feeds both)");
  }
}

template <typename Scalar>
CleanSheetResult<Scalar> run_cleansheet(const DatasetSpec& dataset, const LabeledData<Scalar>& train,
                                        const LabeledData<Scalar>& val, const CleanSheetConfig& config,
                                        std::optional<EnsembleState<Scalar>> initial_ensemble,
                                        const CleanSheetObserver<Scalar>* observer) {
  config.validate(dataset.num_classes);
  train.validate();
  val.validate();
  const int y_t = config.target_class;
  if (std::find(train.y.begin(), train.y.end(), y_t) == train.y.end()) {
    throw ConfigError("training data holds no example of target class " + std::to_string(y_t));
  }

  CleanSheetResult<Scalar> result;
  EnsembleState<Scalar>& state = result.ensemble;
  if (initial_ensemble) {
    state = std::move(*initial_ensemble);
    if (state.size() != config.distill.num_substitutes) throw ConfigError("initial ensemble has the wrong size");
    if (!state.sampler) state.sampler.emplace(train.size(), config.distill.train.batch_size, order_seed(config.seed, 0));
  } else {
    state = init_ensemble<Scalar>(config.substitutes, dataset, config.distill, train.size(), config.seed);
  }

  Trigger<Scalar> global =
      random_trigger<Scalar>(dataset.input_shape, y_t, config.norm_type, derive_seed(config.seed, "trigger"));
  LambdaScheduler lambda = config.lambda;
  const bool smaml = config.schedule.optimizer == TriggerOptimizerKind::smaml;
  std::vector<TriggerOptimizerState<Scalar>> opt(smaml ? static_cast<std::size_t>(state.size()) : 1U);
  std::vector<Trigger<Scalar>> snapshots;

  for (int epoch = 0; epoch < config.schedule.max_epochs; ++epoch) {
    std::vector<double> totals(static_cast<std::size_t>(state.size()), 0.0);
    for (int it = 0; it < config.schedule.iters_per_epoch; ++it) {
      const auto idx = state.sampler->next();
      const Matrix<Scalar> x = gather_rows(train.x, idx);
      std::vector<int> y;
      y.reserve(idx.size());
      for (Index i : idx) y.push_back(train.y[static_cast<std::size_t>(i)]);
      const Matrix<Scalar> z_teacher = teacher_logits(state, x);

      if (smaml) {
        std::vector<Trigger<Scalar>> temporaries;
        temporaries.reserve(static_cast<std::size_t>(state.size()));
        const Trigger<Scalar>* current = &global;
        for (int m = 0; m < state.size(); ++m) {
          totals[static_cast<std::size_t>(m)] += train_member_step(state, m, config.distill, x, y, z_teacher);
          temporaries.push_back(inner_step(*current, state.models[static_cast<std::size_t>(m)], x, y_t, lambda.lambda,
                                           config.schedule.inner_steps, config.schedule.trigger_lr,
                                           opt[static_cast<std::size_t>(m)]));
          current = &temporaries.back();
        }
        global = outer_aggregate<Scalar>(temporaries);
        if (observer != nullptr && observer->on_aggregate) observer->on_aggregate(temporaries, global);
      } else {
        for (int m = 0; m < state.size(); ++m) {
          totals[static_cast<std::size_t>(m)] += train_member_step(state, m, config.distill, x, y, z_teacher);
        }
        const auto g = joint_trigger_loss<Scalar>(state.models, x, global, y_t, lambda.lambda);
        apply_trigger_update(global, g, opt.front(), config.schedule.trigger_lr);
      }

      std::vector<Index> others;
      for (std::size_t r = 0; r < y.size(); ++r) {
        if (y[r] != y_t) others.push_back(static_cast<Index>(r));
      }
      if (!others.empty()) {
        const Matrix<Scalar> triggered = apply_trigger(gather_rows(x, others), global, 1.0);
        double asr = 0.0;
        for (const auto& model : state.models) asr += argmax_rate(predict_logits(model, triggered), y_t);
        update_lambda(lambda, asr / static_cast<double>(state.size()));
      }
    }
    for (auto& t : totals) t /= static_cast<double>(config.schedule.iters_per_epoch);
    const int teacher = state.teacher();
    finish_ensemble_epoch(state, val, totals);
    EpochSummary summary{epoch, teacher, state.val_accuracies,
                         ensemble_attack_success_rate(state.models, val, global, 1.0),
                         mask_norm(global.mask, NormType::l1), lambda.lambda};
    if (observer != nullptr && observer->on_epoch) observer->on_epoch(summary, state);
    result.epochs.push_back(std::move(summary));
    snapshots.push_back(global);
  }

  // Latest snapshot that still meets the target against the final substitutes.
  result.selected_epoch = config.schedule.max_epochs - 1;
  Trigger<Scalar> chosen = global;
  double chosen_asr = ensemble_attack_success_rate(state.models, val, global, 1.0);
  if (chosen_asr < lambda.target_asr) {
    for (int e = static_cast<int>(snapshots.size()) - 2; e >= 0; --e) {
      const double asr = ensemble_attack_success_rate(state.models, val, snapshots[static_cast<std::size_t>(e)], 1.0);
      if (asr >= lambda.target_asr) {
        chosen = snapshots[static_cast<std::size_t>(e)];
        chosen_asr = asr;
        result.selected_epoch = e;
        break;
      }
    }
  }
  result.ensemble_asr = chosen_asr;

  Json substitutes = Json::array();
  for (const auto& s : config.substitutes) substitutes.push_back(to_json(s));
  Json epochs = Json::array();
  for (const auto& e : result.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"teacher", e.teacher},
                      {"val_accuracies", e.val_accuracies},
                      {"ensemble_asr", e.ensemble_asr},
                      {"mask_l1", e.mask_l1},
                      {"lambda", e.lambda}});
  }
  result.artifact.trigger = std::move(chosen);
  result.artifact.provenance = {{"dataset", dataset.name},
                                {"substitutes", substitutes},
                                {"seeds", {{"run", config.seed}}},
                                {"optimizer", to_string(config.schedule.optimizer)},
                                {"lambda_history", to_json(lambda, true).at("history")},
                                {"epochs", epochs},
                                {"selected_epoch", result.selected_epoch},
                                {"ensemble_asr", result.ensemble_asr}};
  return result;
}

#define CLEANSHEET_INSTANTIATE(S)                                                                                   \
  template TriggerLoss<S> trigger_loss<S>(const Classifier<S>&, const Matrix<S>&, const Trigger<S>&, int, double); \
  template TriggerLoss<S> joint_trigger_loss<S>(std::span<const Classifier<S>>, const Matrix<S>&,                  \
                                                const Trigger<S>&, int, double);                                   \
  template void apply_trigger_update<S>(Trigger<S>&, const TriggerLoss<S>&, TriggerOptimizerState<S>&, double);    \
  template Trigger<S> inner_step<S>(const Trigger<S>&, const Classifier<S>&, const Matrix<S>&, int, double, int,   \
                                    double, TriggerOptimizerState<S>&);                                            \
  template Trigger<S> outer_aggregate<S>(std::span<const Trigger<S>>);                                             \
  template CleanSheetResult<S> run_cleansheet<S>(const DatasetSpec&, const LabeledData<S>&, const LabeledData<S>&, \
                                                 const CleanSheetConfig&, std::optional<EnsembleState<S>>,         \
                                                 const CleanSheetObserver<S>*);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
