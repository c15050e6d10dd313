#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cleansheet {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

// Image-like input geometry. Flat feature vectors use (1, 1, d).
struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;

  [[nodiscard]] int spatial() const { return height * width; }
  [[nodiscard]] int size() const { return channels * height * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& shape);

// Invalid user-facing configuration (bad shapes, unknown keys, out-of-range knobs).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Arguments outside an operation's mathematical domain.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN/Inf detected in a loss or in model outputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file on disk; the message names the offending field.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic seed derivation (splitmix64 finalizer over seed and stream id).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

template <typename Scalar>
inline constexpr const char* scalar_name() {
  if constexpr (sizeof(Scalar) == 4) {
    return "f4";
  } else {
    return "f8";
  }
}

}  // namespace cleansheet
