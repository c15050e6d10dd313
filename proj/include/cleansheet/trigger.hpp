#pragma once

#include "cleansheet/archive.hpp"
#include "cleansheet/core.hpp"

#include <filesystem>
#include <string>

namespace cleansheet {

enum class NormType { l1, l2, linf };

std::string to_string(NormType norm);
NormType parse_norm_type(const std::string& name);

// A (mask, pattern) trigger in [0,1] pixel space.
//
// The mask is shared across channels and parameterised by unconstrained
// logits w: M = (tanh(w) + 1) / 2, so M stays in [0,1] for any w.
template <typename Scalar>
struct Trigger {
  Shape shape;
  Vector<Scalar> mask_logits;  // height*width
  Vector<Scalar> mask;         // height*width, derived from mask_logits
  Vector<Scalar> pattern;      // channels*height*width, clamped to [0,1]
  int target_class = 0;
  NormType norm_type = NormType::l1;

  void set_mask_logits(Vector<Scalar> logits);
  void clamp_pattern();
  void validate(const Shape& expected) const;
};

template <typename Scalar>
Vector<Scalar> mask_from_logits(const Vector<Scalar>& logits);

// Elementwise dM/dw = (1 - tanh(w)^2) / 2.
template <typename Scalar>
Vector<Scalar> mask_derivative(const Vector<Scalar>& logits);

// atanh(2M - 1) with M clipped to (eps, 1 - eps).
template <typename Scalar>
Vector<Scalar> logits_from_mask(const Vector<Scalar>& mask, double eps = 1e-6);

template <typename Scalar>
Trigger<Scalar> make_trigger(const Shape& shape, const Vector<Scalar>& mask_logits, const Vector<Scalar>& pattern,
                             int target_class, NormType norm);

// Pattern ~ U[0,1], mask logits ~ N(-2, 0.1).
template <typename Scalar>
Trigger<Scalar> random_trigger(const Shape& shape, int target_class, NormType norm, std::uint64_t seed);

// Hard-binary export: mask entries >= threshold become 1, others 0.
template <typename Scalar>
Trigger<Scalar> binarize(const Trigger<Scalar>& trigger, double threshold = 0.5);

// (1 - t·M) ⊙ x + t·M ⊙ Δ, clamped to [0,1]. The mask broadcasts over channels.
template <typename Scalar>
Matrix<Scalar> apply_trigger(const Matrix<Scalar>& batch, const Trigger<Scalar>& trigger, double transparency = 1.0);

template <typename Scalar>
double mask_norm(const Vector<Scalar>& mask, NormType norm);

// (Sub)gradient of mask_norm w.r.t. the mask. L1 uses sign(m), L2 m/|m|
// (zero at the origin), Linf a unit vector at the first maximal |m|.
template <typename Scalar>
Vector<Scalar> mask_norm_gradient(const Vector<Scalar>& mask, NormType norm);

template <typename Scalar>
struct TriggerArtifact {
  Trigger<Scalar> trigger;
  Json provenance = Json::object();  // dataset, substitutes, seeds, lambda_history, ensemble_asr
};

template <typename Scalar>
void save_trigger(const std::filesystem::path& path, const TriggerArtifact<Scalar>& artifact);

template <typename Scalar>
TriggerArtifact<Scalar> load_trigger(const std::filesystem::path& path);

}  // namespace cleansheet
