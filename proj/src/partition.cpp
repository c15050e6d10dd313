#include "cleansheet/partition.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

namespace cleansheet {

std::string to_string(SplitMode mode) { return mode == SplitMode::overlap ? "overlap" : "dirichlet"; }

SplitMode parse_split_mode(const std::string& name) {
  if (name == "overlap") return SplitMode::overlap;
  if (name == "dirichlet") return SplitMode::dirichlet;
  throw ConfigError("unknown split mode '" + name + "' (expected overlap or dirichlet)");
}

namespace {

bool on_tenth_grid(double v) { return std::abs(v * 10.0 - std::round(v * 10.0)) < 1e-9; }

void check_range(FractionRange r, const char* who) {
  if (!(r.begin >= 0.0 && r.begin < r.end && r.end <= 1.0)) {
    throw DomainError(std::string(who) + " range must satisfy 0 <= begin < end <= 1");
  }
  if (!on_tenth_grid(r.begin) || !on_tenth_grid(r.end)) {
    throw DomainError(std::string(who) + " range bounds must be multiples of 0.1");
  }
}

std::vector<Index> slice(const std::vector<Index>& perm, FractionRange r) {
  const auto n = static_cast<double>(perm.size());
  const auto lo = static_cast<std::size_t>(std::llround(r.begin * n));
  const auto hi = static_cast<std::size_t>(std::llround(r.end * n));
  std::vector<Index> out(perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

double range_overlap(FractionRange a, FractionRange b) {
  return std::max(0.0, std::min(a.end, b.end) - std::max(a.begin, b.begin));
}

SplitPlan split_overlap(Index dataset_size, FractionRange attacker, FractionRange user, std::uint64_t seed) {
  if (dataset_size < 1) throw DomainError("cannot split an empty dataset");
  check_range(attacker, "attacker");
  check_range(user, "user");
  std::vector<Index> perm(static_cast<std::size_t>(dataset_size));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(derive_seed(seed, "split-overlap"));
  std::shuffle(perm.begin(), perm.end(), rng);
  SplitPlan plan;
  plan.mode = SplitMode::overlap;
  plan.seed = seed;
  plan.dataset_size = dataset_size;
  plan.attacker_range = attacker;
  plan.user_range = user;
  plan.attacker_indices = slice(perm, attacker);
  plan.user_indices = slice(perm, user);
  return plan;
}

SplitPlan split_dirichlet(std::span<const int> labels, int num_classes, double alpha, std::uint64_t seed) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("Dirichlet concentration must be positive");
  if (num_classes < 1) throw DomainError("num_classes must be positive");
  if (labels.empty()) throw DomainError("cannot split an empty dataset");
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw DomainError("label outside [0, num_classes)");
    by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<Index>(i));
  }
  constexpr int kParts = 2;
  constexpr int kMaxAttempts = 11;  // first draw plus 10 retries
  std::mt19937_64 rng(derive_seed(seed, "split-dirichlet"));
  std::gamma_distribution<double> gamma(alpha, 1.0);
  SplitPlan plan;
  plan.mode = SplitMode::dirichlet;
  plan.seed = seed;
  plan.alpha = alpha;
  plan.dataset_size = static_cast<Index>(labels.size());
  for (int attempt = 1; attempt <= kMaxAttempts; ++attempt) {
    plan.attempts = attempt;
    plan.class_proportions.assign(static_cast<std::size_t>(num_classes), std::vector<double>(kParts, 0.0));
    std::array<std::vector<Index>, kParts> parts;
    for (int k = 0; k < num_classes; ++k) {
      auto& prop = plan.class_proportions[static_cast<std::size_t>(k)];
      double sum = 0.0;
      for (auto& p : prop) sum += (p = gamma(rng));
      if (!(sum > 0.0)) {
        // Every gamma draw underflowed (tiny alpha): put the class in one part.
        prop.assign(kParts, 0.0);
        prop[std::uniform_int_distribution<int>(0, kParts - 1)(rng)] = 1.0;
      } else {
        for (auto& p : prop) p /= sum;
      }
      std::vector<Index> members = by_class[static_cast<std::size_t>(k)];
      std::shuffle(members.begin(), members.end(), rng);
      const auto n = static_cast<double>(members.size());
      const auto cut = static_cast<std::size_t>(std::floor(prop[0] * n));
      parts[0].insert(parts[0].end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cut));
      parts[1].insert(parts[1].end(), members.begin() + static_cast<std::ptrdiff_t>(cut), members.end());
    }
    if (!parts[0].empty() && !parts[1].empty()) {
      std::sort(parts[0].begin(), parts[0].end());
      std::sort(parts[1].begin(), parts[1].end());
      plan.attacker_indices = std::move(parts[0]);
      plan.user_indices = std::move(parts[1]);
      return plan;
    }
  }
  throw DomainError("Dirichlet split left a part empty after 10 retries");
}

Index overlap_count(const std::vector<Index>& a, const std::vector<Index>& b) {
  std::vector<Index> sa = a;
  std::vector<Index> sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::vector<Index> common;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  return static_cast<Index>(common.size());
}

Json to_json(const SplitPlan& plan) {
  Json j = {{"mode", to_string(plan.mode)}, {"seed", plan.seed}, {"dataset_size", plan.dataset_size}};
  if (plan.mode == SplitMode::overlap) {
    j["attacker_range"] = {plan.attacker_range.begin, plan.attacker_range.end};
    j["user_range"] = {plan.user_range.begin, plan.user_range.end};
    j["overlap_fraction"] = range_overlap(plan.attacker_range, plan.user_range);
  } else {
    j["alpha"] = plan.alpha;
    j["class_proportions"] = plan.class_proportions;
    j["attempts"] = plan.attempts;
  }
  j["attacker_indices"] = plan.attacker_indices;
  j["user_indices"] = plan.user_indices;
  return j;
}

}  // namespace cleansheet
