#include "cleansheet/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cleansheet {

std::string to_string(NormType norm) {
  switch (norm) {
    case NormType::l1: return "L1";
    case NormType::l2: return "L2";
    case NormType::linf: return "Linf";
  }
  return "L1";
}

NormType parse_norm_type(const std::string& name) {
  if (name == "L1" || name == "l1") return NormType::l1;
  if (name == "L2" || name == "l2") return NormType::l2;
  if (name == "Linf" || name == "linf" || name == "LINF") return NormType::linf;
  throw ConfigError("unknown norm type '" + name + "' (expected L1, L2 or Linf)");
}

template <typename Scalar>
Vector<Scalar> mask_from_logits(const Vector<Scalar>& logits) {
  return ((logits.array().tanh() + Scalar(1)) * Scalar(0.5)).matrix();
}

template <typename Scalar>
Vector<Scalar> mask_derivative(const Vector<Scalar>& logits) {
  return ((Scalar(1) - logits.array().tanh().square()) * Scalar(0.5)).matrix();
}

template <typename Scalar>
Vector<Scalar> logits_from_mask(const Vector<Scalar>& mask, double eps) {
  Vector<Scalar> out(mask.size());
  for (Index i = 0; i < mask.size(); ++i) {
    const double m = std::clamp(static_cast<double>(mask(i)), eps, 1.0 - eps);
    out(i) = static_cast<Scalar>(std::atanh(2.0 * m - 1.0));
  }
  return out;
}

template <typename Scalar>
void Trigger<Scalar>::set_mask_logits(Vector<Scalar> logits) {
  mask_logits = std::move(logits);
  mask = mask_from_logits(mask_logits);
}

template <typename Scalar>
void Trigger<Scalar>::clamp_pattern() {
  pattern = pattern.cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
}

template <typename Scalar>
void Trigger<Scalar>::validate(const Shape& expected) const {
  if (!(shape == expected)) {
    throw DomainError("trigger shape " + to_string(shape) + " does not match input shape " + to_string(expected));
  }
  if (mask.size() != shape.spatial() || mask_logits.size() != shape.spatial() || pattern.size() != shape.size()) {
    throw DomainError("trigger arrays do not match trigger shape " + to_string(shape));
  }
}

template <typename Scalar>
Trigger<Scalar> make_trigger(const Shape& shape, const Vector<Scalar>& mask_logits, const Vector<Scalar>& pattern,
                             int target_class, NormType norm) {
  Trigger<Scalar> t;
  t.shape = shape;
  t.set_mask_logits(mask_logits);
  t.pattern = pattern;
  t.clamp_pattern();
  t.target_class = target_class;
  t.norm_type = norm;
  t.validate(shape);
  return t;
}

template <typename Scalar>
Trigger<Scalar> random_trigger(const Shape& shape, int target_class, NormType norm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> logit(-2.0, 0.1);
  Vector<Scalar> pattern(shape.size());
  for (Index i = 0; i < pattern.size(); ++i) pattern(i) = static_cast<Scalar>(unit(rng));
  Vector<Scalar> w(shape.spatial());
  for (Index i = 0; i < w.size(); ++i) w(i) = static_cast<Scalar>(logit(rng));
  return make_trigger<Scalar>(shape, w, pattern, target_class, norm);
}

template <typename Scalar>
Trigger<Scalar> binarize(const Trigger<Scalar>& trigger, double threshold) {
  Trigger<Scalar> out = trigger;
  for (Index i = 0; i < out.mask.size(); ++i) {
    out.mask(i) = trigger.mask(i) >= static_cast<Scalar>(threshold) ? Scalar(1) : Scalar(0);
  }
  out.mask_logits = logits_from_mask(out.mask);
  return out;
}

template <typename Scalar>
Matrix<Scalar> apply_trigger(const Matrix<Scalar>& batch, const Trigger<Scalar>& trigger, double transparency) {
  if (!(transparency >= 0.0 && transparency <= 1.0)) throw DomainError("transparency must lie in [0, 1]");
  if (batch.cols() != trigger.shape.size()) {
    throw DomainError("batch has " + std::to_string(batch.cols()) + " features, trigger covers " +
                      std::to_string(trigger.shape.size()));
  }
  const int hw = trigger.shape.spatial();
  const auto t = static_cast<Scalar>(transparency);
  Matrix<Scalar> out(batch.rows(), batch.cols());
  for (int c = 0; c < trigger.shape.channels; ++c) {
    const auto m = (t * trigger.mask.transpose()).array();
    const auto blend = (m * trigger.pattern.segment(static_cast<Index>(c) * hw, hw).transpose().array()).eval();
    const auto keep = (Scalar(1) - m).eval();
    for (Index r = 0; r < batch.rows(); ++r) {
      out.row(r).segment(static_cast<Index>(c) * hw, hw) =
          (keep * batch.row(r).segment(static_cast<Index>(c) * hw, hw).array() + blend)
              .cwiseMax(Scalar(0))
              .cwiseMin(Scalar(1))
              .matrix();
    }
  }
  return out;
}

template <typename Scalar>
double mask_norm(const Vector<Scalar>& mask, NormType norm) {
  if (mask.size() == 0) return 0.0;
  const auto m = mask.template cast<double>();
  switch (norm) {
    case NormType::l1: return m.cwiseAbs().sum();
    case NormType::l2: return m.norm();
    case NormType::linf: return m.cwiseAbs().maxCoeff();
  }
  return 0.0;
}

template <typename Scalar>
Vector<Scalar> mask_norm_gradient(const Vector<Scalar>& mask, NormType norm) {
  Vector<Scalar> g = Vector<Scalar>::Zero(mask.size());
  if (mask.size() == 0) return g;
  switch (norm) {
    case NormType::l1:
      for (Index i = 0; i < mask.size(); ++i) g(i) = mask(i) > 0 ? Scalar(1) : (mask(i) < 0 ? Scalar(-1) : Scalar(0));
      break;
    case NormType::l2: {
      const Scalar n = mask.norm();
      if (n > Scalar(0)) g = mask / n;
      break;
    }
    case NormType::linf: {
      Index arg = 0;
      mask.cwiseAbs().maxCoeff(&arg);
      g(arg) = mask(arg) >= 0 ? Scalar(1) : Scalar(-1);
      break;
    }
  }
  return g;
}

template <typename Scalar>
void save_trigger(const std::filesystem::path& path, const TriggerArtifact<Scalar>& artifact) {
  const Trigger<Scalar>& t = artifact.trigger;
  t.validate(t.shape);
  Archive archive;
  archive.metadata = {{"kind", "trigger"},
                      {"target_class", t.target_class},
                      {"norm_type", to_string(t.norm_type)},
                      {"shape", {t.shape.channels, t.shape.height, t.shape.width}}};
  for (const auto& [key, value] : artifact.provenance.items()) archive.metadata[key] = value;
  archive.put<Scalar>("mask", Eigen::Map<const Matrix<Scalar>>(t.mask.data(), t.shape.height, t.shape.width));
  archive.put<Scalar>("pattern", Eigen::Map<const Matrix<Scalar>>(t.pattern.data(), t.shape.channels, t.shape.spatial()));
  archive.put<Scalar>("mask_logits",
                      Eigen::Map<const Matrix<Scalar>>(t.mask_logits.data(), t.shape.height, t.shape.width));
  write_archive(path, archive);
}

template <typename Scalar>
TriggerArtifact<Scalar> load_trigger(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  const Json& meta = archive.metadata;
  for (const char* field : {"target_class", "norm_type", "shape"}) {
    if (!meta.contains(field)) throw ParseError(path.string() + ": trigger metadata missing field '" + field + "'");
  }
  TriggerArtifact<Scalar> artifact;
  Trigger<Scalar>& t = artifact.trigger;
  try {
    t.target_class = meta.at("target_class").get<int>();
    t.norm_type = parse_norm_type(meta.at("norm_type").get<std::string>());
    const auto& s = meta.at("shape");
    t.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed trigger metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": field 'norm_type': " + e.what());
  }
  auto flat = [&](const char* name, Index expected) {
    const Matrix<Scalar> m = archive.get<Scalar>(name);
    if (m.size() != expected) throw ParseError(path.string() + ": array '" + std::string(name) + "' has the wrong size");
    return Vector<Scalar>(Eigen::Map<const Vector<Scalar>>(m.data(), m.size()));
  };
  t.pattern = flat("pattern", t.shape.size());
  t.mask = flat("mask", t.shape.spatial());
  t.mask_logits = flat("mask_logits", t.shape.spatial());
  for (const auto& [key, value] : meta.items()) {
    if (key != "kind" && key != "target_class" && key != "norm_type" && key != "shape") artifact.provenance[key] = value;
  }
  return artifact;
}

#define CLEANSHEET_INSTANTIATE(S)                                                                               \
  template struct Trigger<S>;                                                                                  \
  template Vector<S> mask_from_logits<S>(const Vector<S>&);                                                    \
  template Vector<S> mask_derivative<S>(const Vector<S>&);                                                     \
  template Vector<S> logits_from_mask<S>(const Vector<S>&, double);                                            \
  template Trigger<S> make_trigger<S>(const Shape&, const Vector<S>&, const Vector<S>&, int, NormType);        \
  template Trigger<S> random_trigger<S>(const Shape&, int, NormType, std::uint64_t);                           \
  template Trigger<S> binarize<S>(const Trigger<S>&, double);                                                  \
  template Matrix<S> apply_trigger<S>(const Matrix<S>&, const Trigger<S>&, double);                            \
  template double mask_norm<S>(const Vector<S>&, NormType);                                                    \
  template Vector<S> mask_norm_gradient<S>(const Vector<S>&, NormType);                                        \
  template void save_trigger<S>(const std::filesystem::path&, const TriggerArtifact<S>&);                      \
  template TriggerArtifact<S> load_trigger<S>(const std::filesystem::path&);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
