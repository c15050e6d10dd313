#include "cleansheet/distillation.hpp"

#include <cmath>
#include <random>

namespace cleansheet {

void DistillConfig::validate() const {
  if (num_substitutes < 1) throw ConfigError("num_substitutes must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  train.validate();
}

Json to_json(const DistillConfig& c) {
  return {{"num_substitutes", c.num_substitutes},
          {"temperature", c.temperature},
          {"alpha", c.alpha},
          {"scale_kl_by_temperature_squared", c.scale_kl_by_temperature_squared},
          {"train", to_json(c.train)}};
}

template <typename Scalar>
Matrix<Scalar> soft_labels(const Matrix<Scalar>& logits, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  return softmax_rows(logits, temperature);
}

template <typename Scalar>
LossAndGrad<Scalar> kl_to_teacher(const Matrix<Scalar>& student_logits, const Matrix<Scalar>& teacher_logits,
                                  double temperature) {
  if (student_logits.rows() != teacher_logits.rows() || student_logits.cols() != teacher_logits.cols()) {
    throw DomainError("student and teacher logits differ in shape");
  }
  const Matrix<Scalar> log_ps = log_softmax_rows(student_logits);
  const Matrix<Scalar> log_pt = log_softmax_rows(teacher_logits, temperature);
  const Matrix<Scalar> ps = log_ps.array().exp().matrix();
  LossAndGrad<Scalar> out{0.0, Matrix<Scalar>(student_logits.rows(), student_logits.cols())};
  if (student_logits.rows() == 0) return out;
  const auto inv_n = Scalar(1) / static_cast<Scalar>(student_logits.rows());
  double total = 0.0;
  for (Index r = 0; r < student_logits.rows(); ++r) {
    const auto diff = (log_ps.row(r) - log_pt.row(r)).array();
    const Scalar kl = (ps.row(r).array() * diff).sum();
    total += static_cast<double>(kl);
    // d KL / d z_j = p_j (log p_j - log q_j - KL)
    out.grad.row(r) = (ps.row(r).array() * (diff - kl)).matrix() * inv_n;
  }
  out.loss = total / static_cast<double>(student_logits.rows());
  return out;
}

template <typename Scalar>
LossAndGrad<Scalar> kd_loss(const Matrix<Scalar>& student_logits, const Matrix<Scalar>& teacher_logits,
                            std::span<const int> labels, double alpha, double temperature,
                            bool scale_by_temperature_squared) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("alpha must lie in [0, 1]");
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  LossAndGrad<Scalar> ce = cross_entropy(student_logits, labels);
  LossAndGrad<Scalar> kl = kl_to_teacher(student_logits, teacher_logits, temperature);
  const double kl_weight = alpha * (scale_by_temperature_squared ? temperature * temperature : 1.0);
  return {kl_weight * kl.loss + (1.0 - alpha) * ce.loss,
          static_cast<Scalar>(kl_weight) * kl.grad + static_cast<Scalar>(1.0 - alpha) * ce.grad};
}

template <typename Scalar>
int EnsembleState<Scalar>::teacher() const {
  for (std::size_t i = 0; i < tm.size(); ++i) {
    if (tm[i] == 1) return static_cast<int>(i);
  }
  return 0;
}

template <typename Scalar>
EnsembleState<Scalar> init_ensemble(const std::vector<ModelSpec>& specs, const DatasetSpec& dataset,
                                    const DistillConfig& config, Index train_size, std::uint64_t seed) {
  config.validate();
  if (static_cast<int>(specs.size()) != config.num_substitutes) {
    throw ConfigError("num_substitutes = " + std::to_string(config.num_substitutes) + " but " +
                      std::to_string(specs.size()) + " substitute specs given");
  }
  EnsembleState<Scalar> state;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    state.models.push_back(make_classifier<Scalar>(specs[i], dataset, init_seed(seed, static_cast<int>(i))));
  }
  state.optimizers.resize(specs.size());
  std::mt19937_64 rng(derive_seed(seed, "teacher"));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(specs.size()) - 1);
  state.tm.assign(specs.size(), 0);
  state.tm[static_cast<std::size_t>(pick(rng))] = 1;
  state.val_accuracies.assign(specs.size(), 0.0);
  state.sampler.emplace(train_size, config.train.batch_size, order_seed(seed, 0));
  return state;
}

int select_teacher(const std::vector<double>& val_accuracies) {
  if (val_accuracies.empty()) throw DomainError("cannot select a teacher from an empty ensemble");
  int best = 0;
  for (std::size_t i = 1; i < val_accuracies.size(); ++i) {
    if (val_accuracies[i] > val_accuracies[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

template <typename Scalar>
int select_teacher(EnsembleState<Scalar>& state, const LabeledData<Scalar>& val) {
  if (val.empty()) throw DomainError("teacher selection needs validation data");
  state.val_accuracies.clear();
  for (const auto& m : state.models) state.val_accuracies.push_back(evaluate_accuracy(m, val));
  const int best = select_teacher(state.val_accuracies);
  state.tm.assign(state.models.size(), 0);
  state.tm[static_cast<std::size_t>(best)] = 1;
  return best;
}

template <typename Scalar>
Matrix<Scalar> teacher_logits(const EnsembleState<Scalar>& state, const Matrix<Scalar>& batch) {
  if (state.size() < 2) return Matrix<Scalar>(0, 0);
  return predict_logits(state.models[static_cast<std::size_t>(state.teacher())], batch);
}

template <typename Scalar>
double train_member_step(EnsembleState<Scalar>& state, int index, const DistillConfig& config,
                         const Matrix<Scalar>& batch, std::span<const int> labels,
                         const Matrix<Scalar>& teacher_batch_logits) {
  auto& model = state.models.at(static_cast<std::size_t>(index));
  auto& opt = state.optimizers.at(static_cast<std::size_t>(index));
  if (index == state.teacher()) {
    return sgd_step<Scalar>(model, opt, config.train, batch,
                            [&](const Matrix<Scalar>& logits) { return cross_entropy(logits, labels); });
  }
  return sgd_step<Scalar>(model, opt, config.train, batch, [&](const Matrix<Scalar>& logits) {
    return kd_loss(logits, teacher_batch_logits, labels, config.alpha, config.temperature,
                   config.scale_kl_by_temperature_squared);
  });
}

template <typename Scalar>
void finish_ensemble_epoch(EnsembleState<Scalar>& state, const LabeledData<Scalar>& val,
                           const std::vector<double>& mean_losses) {
  state.teacher_history.push_back(state.teacher());
  select_teacher(state, val);
  for (std::size_t i = 0; i < state.models.size(); ++i) {
    state.models[i].history.push_back({mean_losses.at(i), state.val_accuracies[i]});
  }
  state.val_history.push_back(state.val_accuracies);
  ++state.epoch;
}

template <typename Scalar>
EnsembleState<Scalar>& train_ensemble_epoch(EnsembleState<Scalar>& state, const LabeledData<Scalar>& train,
                                            const LabeledData<Scalar>& val, const DistillConfig& config) {
  config.validate();
  if (!state.sampler) state.sampler.emplace(train.size(), config.train.batch_size, order_seed(0, 0));
  const Index steps = state.sampler->batches_per_epoch();
  std::vector<double> totals(state.models.size(), 0.0);
  for (Index s = 0; s < steps; ++s) {
    const auto idx = state.sampler->next();
    const Matrix<Scalar> x = gather_rows(train.x, idx);
    std::vector<int> y;
    y.reserve(idx.size());
    for (Index i : idx) y.push_back(train.y[static_cast<std::size_t>(i)]);
    const Matrix<Scalar> z_teacher = teacher_logits(state, x);
    for (int m = 0; m < state.size(); ++m) {
      try {
        totals[static_cast<std::size_t>(m)] += train_member_step(state, m, config, x, y, z_teacher);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(state.epoch) + ", member " + std::to_string(m) +
                           " diverged: " + e.what());
      }
    }
  }
  for (auto& t : totals) t /= static_cast<double>(steps);
  finish_ensemble_epoch(state, val, totals);
  return state;
}

template <typename Scalar>
void save_ensemble(const std::filesystem::path& directory, const EnsembleState<Scalar>& state,
                   const DistillConfig& config) {
  std::filesystem::create_directories(directory);
  Json members = Json::array();
  for (std::size_t i = 0; i < state.models.size(); ++i) {
    const std::string file = "member_" + std::to_string(i) + ".csar";
    save_classifier(directory / file, state.models[i]);
    members.push_back(file);
  }
  Json manifest = {{"members", members},
                   {"tm", state.tm},
                   {"epoch", state.epoch},
                   {"tm_history", state.teacher_history},
                   {"val_accuracy_history", state.val_history},
                   {"config", to_json(config)}};
  write_text_file(directory / "manifest.json", manifest.dump(2) + "\n");
}

template <typename Scalar>
EnsembleState<Scalar> load_ensemble(const std::filesystem::path& directory, Index train_size, std::uint64_t seed) {
  Json manifest;
  try {
    manifest = Json::parse(read_text_file(directory / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((directory / "manifest.json").string() + ": " + e.what());
  }
  EnsembleState<Scalar> state;
  try {
    for (const auto& file : manifest.at("members")) {
      state.models.push_back(load_classifier<Scalar>(directory / file.get<std::string>()));
    }
    state.tm = manifest.at("tm").get<std::vector<int>>();
    state.epoch = manifest.at("epoch").get<int>();
    state.teacher_history = manifest.at("tm_history").get<std::vector<int>>();
    state.val_history = manifest.at("val_accuracy_history").get<std::vector<std::vector<double>>>();
    const int batch = manifest.at("config").at("train").at("batch_size").get<int>();
    state.sampler.emplace(train_size, batch, order_seed(seed, 0));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((directory / "manifest.json").string() + ": " + e.what());
  }
  state.optimizers.resize(state.models.size());
  state.val_accuracies = state.val_history.empty() ? std::vector<double>(state.models.size(), 0.0) : state.val_history.back();
  return state;
}

#define CLEANSHEET_INSTANTIATE(S)                                                                                    \
  template Matrix<S> soft_labels<S>(const Matrix<S>&, double);                                                      \
  template LossAndGrad<S> kl_to_teacher<S>(const Matrix<S>&, const Matrix<S>&, double);                             \
  template LossAndGrad<S> kd_loss<S>(const Matrix<S>&, const Matrix<S>&, std::span<const int>, double, double,      \
                                     bool);                                                                         \
  template struct EnsembleState<S>;                                                                                 \
  template EnsembleState<S> init_ensemble<S>(const std::vector<ModelSpec>&, const DatasetSpec&,                     \
                                             const DistillConfig&, Index, std::uint64_t);                           \
  template int select_teacher<S>(EnsembleState<S>&, const LabeledData<S>&);                                         \
  template Matrix<S> teacher_logits<S>(const EnsembleState<S>&, const Matrix<S>&);                                  \
  template double train_member_step<S>(EnsembleState<S>&, int, const DistillConfig&, const Matrix<S>&,              \
                                       std::span<const int>, const Matrix<S>&);                                     \
  template void finish_ensemble_epoch<S>(EnsembleState<S>&, const LabeledData<S>&, const std::vector<double>&);     \
  template EnsembleState<S>& train_ensemble_epoch<S>(EnsembleState<S>&, const LabeledData<S>&,                      \
                                                     const LabeledData<S>&, const DistillConfig&);                  \
  template void save_ensemble<S>(const std::filesystem::path&, const EnsembleState<S>&, const DistillConfig&);      \
  template EnsembleState<S> load_ensemble<S>(const std::filesystem::path&, Index, std::uint64_t);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
