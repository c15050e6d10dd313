#pragma once

// Attacker / user training-set splits: overlapping fraction ranges of one
// shuffled permutation, or a two-party Dirichlet label-skew partition.

#include "cleansheet/archive.hpp"
#include "cleansheet/core.hpp"

#include <span>
#include <string>
#include <vector>

namespace cleansheet {

enum class SplitMode { overlap, dirichlet };

std::string to_string(SplitMode mode);
SplitMode parse_split_mode(const std::string& name);

struct FractionRange {
  double begin = 0.0;
  double end = 1.0;
};

struct SplitPlan {
  SplitMode mode = SplitMode::overlap;
  std::uint64_t seed = 0;
  Index dataset_size = 0;
  std::vector<Index> attacker_indices;
  std::vector<Index> user_indices;
  // overlap mode
  FractionRange attacker_range;
  FractionRange user_range;
  // dirichlet mode
  double alpha = 0.5;
  std::vector<std::vector<double>> class_proportions;  // [class][part]
  int attempts = 0;
};

// Positions [round(a n), round(b n)) of a seed-fixed permutation of [0, n).
SplitPlan split_overlap(Index dataset_size, FractionRange attacker, FractionRange user, std::uint64_t seed);

// Analytic overlap |[a,b) ∩ [c,d)| of two fraction ranges.
double range_overlap(FractionRange a, FractionRange b);

// Per class, proportions ~ Dirichlet(alpha * 1) over two parts; that class's
// examples (in seeded random order) are cut at floor(cumsum * n_class).
// A part left without any example is redrawn, at most 10 times.
SplitPlan split_dirichlet(std::span<const int> labels, int num_classes, double alpha, std::uint64_t seed);

// Size of the intersection of two index sets.
Index overlap_count(const std::vector<Index>& a, const std::vector<Index>& b);

Json to_json(const SplitPlan& plan);

}  // namespace cleansheet
