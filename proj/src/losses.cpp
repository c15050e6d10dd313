#include "cleansheet/losses.hpp"

#include <cmath>
#include <string>

namespace cleansheet {

template <typename Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar>& logits, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("softmax temperature must be positive");
  Matrix<Scalar> z = logits / static_cast<Scalar>(temperature);
  for (Index r = 0; r < z.rows(); ++r) {
    const Scalar m = z.row(r).maxCoeff();
    z.row(r).array() -= m;
    const Scalar lse = std::log(z.row(r).array().exp().sum());
    z.row(r).array() -= lse;
  }
  return z;
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits, double temperature) {
  return log_softmax_rows(logits, temperature).array().exp().matrix();
}

template <typename Scalar>
LossAndGrad<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) throw DomainError("label count does not match batch");
  LossAndGrad<Scalar> out{0.0, softmax_rows(logits)};
  if (logits.rows() == 0) return out;
  const Matrix<Scalar> logp = log_softmax_rows(logits);
  const auto inv_n = Scalar(1) / static_cast<Scalar>(logits.rows());
  double total = 0.0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) {
      throw DomainError("label " + std::to_string(y) + " outside [0, " + std::to_string(logits.cols()) + ")");
    }
    total -= static_cast<double>(logp(r, y));
    out.grad(r, y) -= Scalar(1);
  }
  out.grad *= inv_n;
  out.loss = total / static_cast<double>(logits.rows());
  return out;
}

template <typename Scalar>
LossAndGrad<Scalar> cross_entropy(const Matrix<Scalar>& logits, int target) {
  const std::vector<int> labels(static_cast<std::size_t>(logits.rows()), target);
  return cross_entropy(logits, std::span<const int>(labels));
}

double shannon_entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

#define CLEANSHEET_INSTANTIATE(S)                                                         \
  template Matrix<S> softmax_rows<S>(const Matrix<S>&, double);                          \
  template Matrix<S> log_softmax_rows<S>(const Matrix<S>&, double);                      \
  template LossAndGrad<S> cross_entropy<S>(const Matrix<S>&, std::span<const int>);      \
  template LossAndGrad<S> cross_entropy<S>(const Matrix<S>&, int);

CLEANSHEET_INSTANTIATE(float)
CLEANSHEET_INSTANTIATE(double)

}  // namespace cleansheet
