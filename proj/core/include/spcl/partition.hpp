#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "spcl/graph.hpp"
#include "spcl/patching.hpp"
#include "spcl/rng.hpp"

namespace spcl {

/// One image's masking outcome: the kept visible tokens and their split into
/// two equal, disjoint views. All index lists are ascending.
struct PartitionPlan {
  std::size_t num_tokens = 0;
  double mask_ratio = 0.0;
  std::vector<std::size_t> visible;
  std::vector<std::size_t> group_a;
  std::vector<std::size_t> group_b;
  std::uint64_t seed = 0;  // key of the stream the plan was drawn from

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

// ⌊(1−r)·N⌋. A 1e-9 slack keeps products such as (1−0.3)·100 from flooring
// to 69 because of binary rounding.
std::size_t visible_count(std::size_t num_tokens, double mask_ratio);
// Tokens per view: half of visible_count rounded down to even.
std::size_t view_size(std::size_t num_tokens, double mask_ratio);

/// Uniform sample without replacement of the visible set, then a uniform
/// split into halves. With odd n, one uniformly chosen visible token is
/// dropped. Throws ConfigError when fewer than 2 tokens remain visible.
PartitionPlan sample_partition(std::size_t num_tokens, double mask_ratio, CounterRng& rng);

/// Masking ratio seen by each branch: 1 − view_size/N.
double effective_branch_ratio(std::size_t num_tokens, double mask_ratio);

/// Gathers the two views [n/2 × D] from the token sequence.
std::pair<Var, Var> apply_partition(const TokenSequence& tokens, const PartitionPlan& plan);

/// Frequency with which each index lands in group_a across `trials` plans
/// drawn from (seed, trial) streams.
std::vector<double> coverage_histogram(std::size_t num_tokens, double mask_ratio,
                                       std::size_t trials, std::uint64_t seed);

void validate_plan(const PartitionPlan& plan);

}  // namespace spcl
