#pragma once

#include "cleansheet/core.hpp"

#include <span>

namespace cleansheet {

template <typename Scalar>
struct LossAndGrad {
  double loss = 0.0;
  Matrix<Scalar> grad;  // d(loss)/d(logits), same shape as the logits
};

// Row-wise softmax of logits / temperature, max-subtracted.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits, double temperature = 1.0);

// Row-wise log-softmax of logits / temperature.
template <typename Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar>& logits, double temperature = 1.0);

// Mean cross-entropy over the batch.
template <typename Scalar>
LossAndGrad<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels);

// Mean cross-entropy with every row labelled `target`.
template <typename Scalar>
LossAndGrad<Scalar> cross_entropy(const Matrix<Scalar>& logits, int target);

// Shannon entropy (nats) of a probability vector; 0·log 0 = 0.
double shannon_entropy(std::span<const double> probabilities);

}  // namespace cleansheet
