#include "cleansheet/defenses.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace cleansheet {

std::string to_string(PruneMethod method) { return method == PruneMethod::magnitude ? "magnitude" : "activation"; }

PruneMethod parse_prune_method(const std::string& name) {
  if (name == "magnitude") return PruneMethod::magnitude;
  if (name == "activation") return PruneMethod::activation;
  throw ConfigError("unknown prune method '" + name + "' (expected magnitude or activation)");
}

namespace {

template <typename Scalar>
void prune_magnitude(nn::ParameterList<Scalar>& params, double ratio) {
  struct Entry {
    double magnitude;
    std::size_t param;
    Index offset;
  };
  std::vector<Entry> entries;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].prunable) continue;
    const auto& v = params[p].value;
    for (Index i = 0; i < v.size(); ++i) entries.push_back({std::abs(static_cast<double>(v.data()[i])), p, i});
  }
  const auto count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(entries.size())));
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.magnitude < b.magnitude; });
  for (std::size_t i = 0; i < count; ++i) params[entries[i].param].value.data()[entries[i].offset] = Scalar(0);
}

template <typename Scalar>
void prune_activation(Classifier<Scalar>& model, double ratio, const LabeledData<Scalar>& clean) {
  const auto& net = model.network;
  const int layer = net.prunable_unit_layer();
  if (layer < 0) throw DomainError("model has no prunable hidden layer");
  // Read units after the following ReLU when there is one.
  const int read = (layer + 1 < net.num_layers() && net.layer(layer + 1).kind() == nn::LayerKind::relu) ? layer + 1 : layer;
  const Shape shape = net.layer_output_shape(read);
  const int units = shape.channels;
  std::vector<double> mean(static_cast<std::size_t>(units), 0.0);
  constexpr Index kChunk = 256;
  for (Index start = 0; start < clean.size(); start += kChunk) {
    const Index n = std::min(kChunk, clean.size() - start);
    nn::Trace<Scalar> trace;
    net.forward(clean.x.middleRows(start, n), trace);
    const Matrix<Scalar>& a = trace.outputs[static_cast<std::size_t>(read)];
    for (int c = 0; c < units; ++c) {
      mean[static_cast<std::size_t>(c)] +=
          static_cast<double>(a.middleCols(static_cast<Index>(c) * shape.spatial(), shape.spatial()).sum());
    }
  }
  std::vector<int> order(static_cast<std::size_t>(units));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return mean[static_cast<std::size_t>(a)] < mean[static_cast<std::size_t>(b)]; });
  const auto count = static_cast<std::size_t>(std::floor(ratio * units));
  const auto idx = net.layer(layer).parameter_indices();
  auto& params = model.network.parameters();
  for (std::size_t i = 0; i < count; ++i) {
    params[static_cast<std::size_t>(idx[0])].value.row(order[i]).setZero();
    params[static_cast<std::size_t>(idx[1])].value.row(order[i]).setZero();
  }
}

}  // namespace

template <typename Scalar>
Classifier<Scalar> prune_model(const Classifier<Scalar>& model, double ratio, PruneMethod method,
                               const LabeledData<Scalar>* clean) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw DomainError("prune ratio must lie in [0, 1)");
  Classifier<Scalar> pruned = model;
  if (ratio == 0.0) return pruned;
  if (method == PruneMethod::magnitude) {
    prune_magnitude(pruned.network.parameters(), ratio);
  } else {
    if (clean == nullptr || clean->empty()) throw DomainError("activation pruning needs clean data");
    prune_activation(pruned, ratio, *clean);
  }
  return pruned;
}

template <typename Scalar>
std::vector<PrunePoint> prune_sweep(const Classifier<Scalar>& model, const std::vector<double>& ratios,
                                    PruneMethod method, const LabeledData<Scalar>& clean,
                                    const LabeledData<Scalar>& test, const Trigger<Scalar>& trigger) {
  std::vector<PrunePoint> points;
  for (double r : ratios) {
    const auto pruned = prune_model(model, r, method, &clean);
    points.push_back({r, evaluate_accuracy(pruned, test), attack_success_rate(pruned, test, trigger)});
  }
  return points;
}

void FineTuneConfig::validate() const {
  if (!(clean_fraction > 0.0 && clean_fraction <= 1.0)) throw ConfigError("clean_fraction must lie in (0, 1]");
  train_config().validate();
}

TrainConfig FineTuneConfig::train_config() const {
  TrainConfig c;
  c.learning_rate = learning_rate;
  c.momentum = momentum;
  c.weight_decay = weight_decay;
  c.epochs = epochs;
  c.batch_size = batch_size;
  c.seed = seed;
  return c;
}

Json to_json(const FineTuneConfig& c) {
  return {{"clean_fraction", c.clean_fraction}, {"epochs", c.epochs},         {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},             {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
          {"seed", c.seed}};
}

template <typename Scalar>
LabeledData<Scalar> fine_tune_subset(const LabeledData<Scalar>& train, const FineTuneConfig& config) {
  if (train.empty()) throw DomainError("fine-tuning needs training data");
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(derive_seed(config.seed, "fine-tune-subset"));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = std::max<Index>(1, static_cast<Index>(std::llround(config.clean_fraction * static_cast<double>(train.size()))));
  order.resize(static_cast<std::size_t>(n));
  return train.subset(order);
}

template <typename Scalar>
Classifier<Scalar> fine_tune(const Classifier<Scalar>& model, const LabeledData<Scalar>& train,
                             const FineTuneConfig& config) {
  config.validate();
  Classifier<Scalar> tuned = model;
  if (config.epochs == 0) return tuned;
  continue_training<Scalar>(tuned, fine_tune_subset(train, config), nullptr, config.train_config(),
                    derive_seed(config.seed, "fine-tune-order"));
  return tuned;
}

template <typename Scalar>
Matrix<Scalar> attention_map(const Matrix<Scalar>& activation, const Shape& shape) {
  if (activation.cols() != shape.size()) throw DomainError("activation width does not match " + to_string(shape));
  const int hw = shape.spatial();
  Matrix<Scalar> a = Matrix<Scalar>::Zero(activation.rows(), hw);
  for (int c = 0; c < shape.channels; ++c) a += activation.middleCols(static_cast<Index>(c) * hw, hw).cwiseAbs2();
  for (Index b = 0; b < a.rows(); ++b) {
    const Scalar norm = a.row(b).norm();
    if (norm >= Scalar(1e-12)) a.row(b) /= norm;
  }
  return a;
}

void NadConfig::validate() const {
  fine_tune.validate();
  if (!(beta >= 0.0)) throw ConfigError("NAD beta must be nonnegative");
  if (epochs < 0) throw ConfigError("NAD epochs must be nonnegative");
}

Json to_json(const NadConfig& c) { return {{"fine_tune", to_json(c.fine_tune)}, {"beta", c.beta}, {"epochs", c.epochs}}; }

template <typename Scalar>
double attention_loss(const nn::Trace<Scalar>& student, const nn::Trace<Scalar>& teacher,
                      const nn::Network<Scalar>& network, double beta, std::map<int, Matrix<Scalar>>* grads) {
  const auto taps = network.spatial_taps();
  if (taps.empty() || beta == 0.0) return 0.0;
  const double weight = beta / static_cast<double>(taps.size());
  double total = 0.0;
  for (int l : taps) {
    const Shape shape = network.layer_output_shape(l);
    const int hw = shape.spatial();
    const Matrix<Scalar>& a = student.outputs[static_cast<std::size_t>(l)];
    const Index batch = a.rows();
    Matrix<Scalar> raw = Matrix<Scalar>::Zero(batch, hw);
    for (int c = 0; c < shape.channels; ++c) raw += a.middleCols(static_cast<Index>(c) * hw, hw).cwiseAbs2();
    const Matrix<Scalar> vt = attention_map(teacher.outputs[static_cast<std::size_t>(l)], shape);
    Matrix<Scalar> g_raw = Matrix<Scalar>::Zero(batch, hw);
    for (Index b = 0; b < batch; ++b) {
      const Scalar norm = raw.row(b).norm();
      const bool normalised = norm >= Scalar(1e-12);
      const Matrix<Scalar> vs = normalised ? Matrix<Scalar>(raw.row(b) / norm) : Matrix<Scalar>(raw.row(b));
      const Matrix<Scalar> diff = vs - vt.row(b);
      const Scalar dist = diff.norm();
      total += weight * static_cast<double>(dist) / static_cast<double>(batch);
      if (dist < Scalar(1e-12)) continue;
      const Matrix<Scalar> gv = diff * static_cast<Scalar>(weight / static_cast<double>(batch)) / dist;
      if (normalised) {
        g_raw.row(b) = (gv - vs * (vs.cwiseProduct(gv).sum())) / norm;
      } else {
        g_raw.row(b) = gv;
      }
    }
    if (grads != nullptr) {
      Matrix<Scalar> ga(batch, a.cols());
      for (int c = 0; c < shape.channels; ++c) {
        ga.middleCols(static_cast<Index>(c) * hw, hw) =
            Scalar(2) * a.middleCols(static_cast<Index>(c) * hw, hw).cwiseProduct(g_raw);
      }
      auto [it, inserted] = grads->try_emplace(l, ga);
      if (!inserted) it->second += ga;
    }
  }
  return total;
}

template <typename Scalar>
Classifier<Scalar> nad_distill(const Classifier<Scalar>& model, const LabeledData<Scalar>& train,
                               const NadConfig& config) {
  config.validate();
  const Classifier<Scalar> teacher = fine_tune(model, train, config.fine_tune);
  Classifier<Scalar> student = model;
  if (config.epochs == 0) return student;
  const LabeledData<Scalar> subset = fine_tune_subset(train, config.fine_tune);
  TrainConfig tc = config.fine_tune.train_config();
  tc.epochs = config.epochs;
  // Same batch order as fine_tune, so beta = 0 is plain fine-tuning.
  BatchSampler sampler(subset.size(), tc.batch_size, derive_seed(config.fine_tune.seed, "fine-tune-order"));
  SgdState<Scalar> state;
  const Index steps = sampler.batches_per_epoch();
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    double total = 0.0;
    for (Index s = 0; s < steps; ++s) {
      const auto idx = sampler.next();
      const Matrix<Scalar> x = gather_rows(subset.x, idx);
      std::vector<int> y;
      y.reserve(idx.size());
      for (Index i : idx) y.push_back(subset.y[static_cast<std::size_t>(i)]);
      nn::Trace<Scalar> trace;
      const Matrix<Scalar> logits = student.network.forward(x, trace);
      const LossAndGrad<Scalar> ce = cross_entropy(logits, std::span<const int>(y));
      double loss = ce.loss;
      std::map<int, Matrix<Scalar>> injected;
      if (config.beta > 0.0) {
        nn::Trace<Scalar> teacher_trace;
        teacher.network.forward(x, teacher_trace);
        loss += attention_loss(trace, teacher_trace, student.network, config.beta, &injected);
      }
      if (!std::isfinite(loss)) throw NumericError("non-finite NAD loss for " + student.spec.id());
      auto grads = nn::zero_gradients(student.network.parameters());
      student.network.backward(trace, ce.grad, &grads, injected.empty() ? nullptr : &injected);
      apply_sgd_update(student, state, tc, grads);
      total += loss;
    }
    student.history.push_back({total / static_cast<double>(steps), 0.0});
  }
  return student;
}

Json to_json(const StripReport& r, bool include_entropies) {
  Json j = {{"mean_clean", r.mean_clean}, {"std_clean", r.std_clean},           {"threshold", r.threshold},
            {"p_escape", r.p_escape},     {"clean_pass_rate", r.clean_pass_rate}, {"n_overlays", r.n_overlays}};
  if (include_entropies) {
    j["clean_entropies"] = r.clean_entropies;
    j["input_entropies"] = r.input_entropies;
  }
  return j;
}

template <typename Scalar>
std::vector<double> strip_entropies(const Classifier<Scalar>& model, const Matrix<Scalar>& inputs,
                                    const Matrix<Scalar>& pool, int n_overlays, std::uint64_t seed) {
  if (n_overlays < 1) throw DomainError("n_overlays must be at least 1");
  if (pool.rows() == 0) throw DomainError("overlay pool is empty");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, pool.rows() - 1);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(inputs.rows()));
  Matrix<Scalar> blended(n_overlays, inputs.cols());
  for (Index i = 0; i < inputs.rows(); ++i) {
    for (int k = 0; k < n_overlays; ++k) blended.row(k) = (inputs.row(i) + pool.row(pick(rng))) * Scalar(0.5);
    const Matrix<Scalar> p = softmax_rows(predict_logits(model, blended), 1.0);
    double h = 0.0;
    for (int k = 0; k < n_overlays; ++k) {
      for (Index c = 0; c < p.cols(); ++c) {
        const double v = static_cast<double>(p(k, c));
        if (v > 0.0) h -= v * std::log(v);
      }
    }
    out.push_back(h / n_overlays);
  }
  return out;
}

double strip_threshold(std::vector<double> clean_entropies) {
  if (clean_entropies.empty()) throw DomainError("strip calibration needs clean entropies");
  std::sort(clean_entropies.begin(), clean_entropies.end());
  return clean_entropies[static_cast<std::size_t>(std::floor(0.01 * static_cast<double>(clean_entropies.size())))];
}

namespace {

double fraction_at_least(const std::vector<double>& values, double threshold) {
  if (values.empty()) return 0.0;
  const auto n = std::count_if(values.begin(), values.end(), [&](double v) { return v >= threshold; });
  return static_cast<double>(n) / static_cast<double>(values.size());
}

}  // namespace

template <typename Scalar>
StripReport strip_detect(const Classifier<Scalar>& model, const Matrix<Scalar>& inputs,
                         const LabeledData<Scalar>& clean_holdout, const StripConfig& config) {
  if (config.n_overlays < 1) throw DomainError("n_overlays must be at least 1");
  StripReport r;
  r.n_overlays = config.n_overlays;
  r.clean_entropies = strip_entropies(model, clean_holdout.x, clean_holdout.x, config.n_overlays,
                                      derive_seed(config.seed, "strip-clean"));
  r.input_entropies =
      strip_entropies(model, inputs, clean_holdout.x, config.n_overlays, derive_seed(config.seed, "strip-input"));
  const auto n = static_cast<double>(r.clean_entropies.size());
  r.mean_clean = std::accumulate(r.clean_entropies.begin(), r.clean_entropies.end(), 0.0) / n;
  double var = 0.0;
  for (double h : r.clean_entropies) var += (h - r.mean_clean) * (h - r.mean_clean);
  r.std_clean = std::sqrt(var / n);
  r.threshold = strip_threshold(r.clean_entropies);
  r.clean_pass_rate = fraction_at_least(r.clean_entropies, r.threshold);
  r.p_escape = fraction_at_least(r.input_entropies, r.threshold);
  return r;
}

void BeatrixConfig::validate() const {
  if (min_order < 1 || max_order < min_order) throw ConfigError("Gram orders must satisfy 1 <= min <= max");
  if (!(eta > 0.0)) throw ConfigError("eta must be positive");
  if (!(anomaly_threshold > 0.0)) throw ConfigError("anomaly threshold must be positive");
}

Json to_json(const BeatrixConfig& c) {
  return {{"gram_orders", {c.min_order, c.max_order}},
          {"eta", c.eta},
          {"anomaly_threshold", c.anomaly_threshold},
          {"tap_layer", c.tap_layer}};
}

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double scaled_mad(const std::vector<double>& values, double eta) {
  const double m = median(values);
  std::vector<double> dev;
  dev.reserve(values.size());
  for (double v : values) dev.push_back(std::abs(v - m));
  return eta * median(dev);
}

namespace {

double guarded_ratio(double diff, double mad) {
  if (mad < 1e-12) return diff < 1e-12 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / mad;
}

}  // namespace

std::vector<double> anomaly_indices(const std::vector<double>& values, double eta) {
  const double m = median(values);
  const double mad = scaled_mad(values, eta);
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(guarded_ratio(std::abs(v - m), mad));
  return out;
}

double anomaly_index(const std::vector<double>& suspect, const std::vector<double>& reference, double eta) {
  return guarded_ratio(std::abs(median(suspect) - median(reference)), scaled_mad(reference, eta));
}

template <typename Scalar>
Matrix<double> gram_features(const Classifier<Scalar>& model, const Matrix<Scalar>& inputs,
                             const BeatrixConfig& config) {
  config.validate();
  const auto& net = model.network;
  int tap = config.tap_layer;
  if (tap < 0) {
    const auto taps = net.spatial_taps();
    tap = taps.empty() ? net.feature_layer() : taps.back();
  }
  if (tap >= net.num_layers()) throw ConfigError("Beatrix tap layer out of range");
  const Shape shape = net.layer_output_shape(tap);
  const int ch = shape.channels;
  const int hw = shape.spatial();
  const int orders = config.max_order - config.min_order + 1;
  const Index tri = static_cast<Index>(ch) * (ch + 1) / 2;
  Matrix<double> features(inputs.rows(), tri * orders);
  constexpr Index kChunk = 256;
  for (Index start = 0; start < inputs.rows(); start += kChunk) {
    const Index n = std::min(kChunk, inputs.rows() - start);
    nn::Trace<Scalar> trace;
    net.forward(inputs.middleRows(start, n), trace);
    const Matrix<Scalar>& a = trace.outputs[static_cast<std::size_t>(tap)];
    for (Index b = 0; b < n; ++b) {
      // channels x positions
      const Matrix<double> f = Eigen::Map<const Matrix<Scalar>>(a.row(b).data(), ch, hw).template cast<double>();
      Index col = 0;
      for (int r = config.min_order; r <= config.max_order; ++r) {
        const Matrix<double> p = f.array().pow(static_cast<double>(r)).matrix();
        const Matrix<double> g = p * p.transpose();
        for (int i = 0; i < ch; ++i) {
          for (int j = i; j < ch; ++j) {
            const double v = g(i, j);
            features(start + b, col++) = std::copysign(std::pow(std::abs(v), 1.0 / r), v);
          }
        }
      }
    }
  }
  return features;
}

Json to_json(const DetectionReport& r) {
  Json classes = Json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"label", c.label},
                       {"suspects", c.suspects},
                       {"reference", c.reference},
                       {"anomaly_index", std::isfinite(c.index) ? Json(c.index) : Json("inf")},
                       {"flagged", c.flagged}});
  }
  return {{"classes", classes}, {"flagged", r.flagged}, {"warnings", r.warnings}, {"detected", r.detected}};
}

namespace {

// Mean absolute z-score of each row against per-feature statistics.
std::vector<double> deviations(const Matrix<double>& f, const Eigen::RowVectorXd& mu, const Eigen::RowVectorXd& sigma) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(f.rows()));
  for (Index i = 0; i < f.rows(); ++i) out.push_back(((f.row(i) - mu).array().abs() / sigma.array()).mean());
  return out;
}

}  // namespace

template <typename Scalar>
DetectionReport beatrix_detect(const Classifier<Scalar>& model, const Matrix<Scalar>& suspects,
                               const LabeledData<Scalar>& clean_holdout, const BeatrixConfig& config) {
  config.validate();
  DetectionReport report;
  const std::vector<int> suspect_pred = predict_labels(model, suspects);
  const std::vector<int> clean_pred = predict_labels(model, clean_holdout.x);
  const Matrix<double> sf = gram_features(model, suspects, config);
  const Matrix<double> cf = gram_features(model, clean_holdout.x, config);
  for (int k = 0; k < model.spec.num_classes; ++k) {
    std::vector<Index> s_rows;
    std::vector<Index> c_rows;
    for (std::size_t i = 0; i < suspect_pred.size(); ++i) {
      if (suspect_pred[i] == k) s_rows.push_back(static_cast<Index>(i));
    }
    for (std::size_t i = 0; i < clean_pred.size(); ++i) {
      if (clean_pred[i] == k) c_rows.push_back(static_cast<Index>(i));
    }
    if (s_rows.empty()) continue;
    if (c_rows.size() < 2) {
      report.warnings.push_back("class " + std::to_string(k) + " skipped: fewer than 2 clean holdout samples");
      continue;
    }
    // Fit statistics on alternate samples and score the rest as the reference;
    // very small classes use every sample for both.
    std::vector<Index> fit;
    std::vector<Index> ref;
    if (c_rows.size() >= 4) {
      for (std::size_t i = 0; i < c_rows.size(); ++i) (i % 2 == 0 ? fit : ref).push_back(c_rows[i]);
    } else {
      fit = c_rows;
      ref = c_rows;
    }
    const Matrix<double> ff = gather_rows(cf, fit);
    const Eigen::RowVectorXd mu = ff.colwise().mean();
    // Dead channels have zero spread on the fit half; floor relative to the typical spread.
    Eigen::RowVectorXd sigma = (ff.rowwise() - mu).cwiseAbs2().colwise().mean().cwiseSqrt();
    sigma = sigma.cwiseMax(1e-2 * sigma.mean() + 1e-12);
    ClassDetection d;
    d.label = k;
    d.suspects = static_cast<Index>(s_rows.size());
    d.reference = static_cast<Index>(ref.size());
    d.index = anomaly_index(deviations(gather_rows(sf, s_rows), mu, sigma),
                            deviations(gather_rows(cf, ref), mu, sigma), config.eta);
    d.flagged = d.index > config.anomaly_threshold;
    if (d.flagged) report.flagged.push_back(k);
    report.classes.push_back(d);
  }
  report.detected = !report.flagged.empty();
  return report;
}

#define CLEANSHEET_INSTANTIATE(S)                                                                                   \
  template Classifier<S> prune_model<S>(const Classifier<S>&, double, PruneMethod, const LabeledData<S>*);        \
  template std::vector<PrunePoint> prune_sweep<S>(const Classifier<S>&, const std::vector<double>&, PruneMethod,   \
                                                  const LabeledData<S>&, const LabeledData<S>&, const Trigger<S>&); \
  template LabeledData<S> fine_tune_subset<S>(const LabeledData<S>&, const FineTuneConfig&);                       \
  template Classifier<S> fine_tune<S>(const Classifier<S>&, const LabeledData<S>&, const FineTuneConfig&);         \
  template Matrix<S> attention_map<S>(const Matrix<S>&, const Shape&);                                             \
  template double attention_loss<S>(const nn::Trace<S>&, const nn::Trace<S>&, const nn::Network<S>&, double,       \
                                    std::map<int, Matrix<S>>*);                                                    \
  template Classifier<S> nad_distill<S>(const Classifier<S>&, const LabeledData<S>&, const NadConfig&);            \
  template std::vector<double> strip_entropies<S>(const Classifier<S>&, const Matrix<S>&, const Matrix<S>&, int,   \
                                                  std::uint64_t);                                                  \
  template StripReport strip_detect<S>(const Classifier<S>&, const Matrix<S>&, const LabeledData<S>&,              \
                                       const StripConfig&);                                                        \
  template Matrix<double> gram_features<S>(const Classifier<S>&, const Matrix<S>&, const BeatrixConfig&);          \
  template DetectionReport beatrix_detect<S>(const Classifier<S>&, const Matrix<S>&, const LabeledData<S>&,        \
                                             const BeatrixConfig&);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
