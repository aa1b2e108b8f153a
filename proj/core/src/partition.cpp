#include "spcl/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "spcl/error.hpp"

namespace spcl {

namespace {

void check_ratio(std::size_t num_tokens, double mask_ratio) {
  if (num_tokens < 2) throw ConfigError("partition needs at least 2 tokens");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
    throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(mask_ratio));
  }
}

}  // namespace

std::size_t visible_count(std::size_t num_tokens, double mask_ratio) {
  check_ratio(num_tokens, mask_ratio);
  return static_cast<std::size_t>(
      std::floor((1.0 - mask_ratio) * static_cast<double>(num_tokens) + 1e-9));
}

std::size_t view_size(std::size_t num_tokens, double mask_ratio) {
  const std::size_t n = visible_count(num_tokens, mask_ratio);
  if (n < 2) {
    throw ConfigError("mask ratio leaves no contrastive pair: " + std::to_string(n) +
                      " visible of " + std::to_string(num_tokens));
  }
  return n / 2;
}

double effective_branch_ratio(std::size_t num_tokens, double mask_ratio) {
  return 1.0 - static_cast<double>(view_size(num_tokens, mask_ratio)) /
                   static_cast<double>(num_tokens);
}

PartitionPlan sample_partition(std::size_t num_tokens, double mask_ratio, CounterRng& rng) {
  const std::size_t half = view_size(num_tokens, mask_ratio);
  const std::uint64_t seed = rng.key();

  // Partial Fisher-Yates: the first 2·half entries of a uniform random
  // permutation are a uniform ordered sample. Taking an even-sized prefix is
  // the same as sampling n and dropping one uniformly chosen token.
  std::vector<std::size_t> perm(num_tokens);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = 0; i < 2 * half; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(num_tokens - i));
    std::swap(perm[i], perm[j]);
  }

  PartitionPlan plan;
  plan.num_tokens = num_tokens;
  plan.mask_ratio = mask_ratio;
  plan.seed = seed;
  plan.group_a.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(half));
  plan.group_b.assign(perm.begin() + static_cast<std::ptrdiff_t>(half),
                      perm.begin() + static_cast<std::ptrdiff_t>(2 * half));
  plan.visible.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(2 * half));
  std::sort(plan.group_a.begin(), plan.group_a.end());
  std::sort(plan.group_b.begin(), plan.group_b.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

void validate_plan(const PartitionPlan& plan) {
  auto fail = [](const std::string& what) { throw DimensionError("corrupted partition plan: " + what); };
  if (plan.group_a.size() != plan.group_b.size() || plan.group_a.empty()) fail("unequal or empty groups");
  std::vector<char> seen(plan.num_tokens, 0);
  for (const auto* group : {&plan.group_a, &plan.group_b}) {
    for (auto i : *group) {
      if (i >= plan.num_tokens) fail("index " + std::to_string(i) + " out of range");
      if (seen[i]) fail("index " + std::to_string(i) + " appears twice");
      seen[i] = 1;
    }
  }
}

std::pair<Var, Var> apply_partition(const TokenSequence& tokens, const PartitionPlan& plan) {
  if (plan.num_tokens != tokens.count() || plan.num_tokens != tokens.tokens.value().rows()) {
    throw DimensionError("partition plan for " + std::to_string(plan.num_tokens) +
                         " tokens applied to a sequence of " + std::to_string(tokens.count()));
  }
  validate_plan(plan);
  return {gather_rows(tokens.tokens, plan.group_a), gather_rows(tokens.tokens, plan.group_b)};
}

std::vector<double> coverage_histogram(std::size_t num_tokens, double mask_ratio,
                                       std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ConfigError("coverage_histogram needs at least one trial");
  std::vector<double> freq(num_tokens, 0.0);
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng = make_stream(seed, Stream::partition, t);
    for (auto i : sample_partition(num_tokens, mask_ratio, rng).group_a) freq[i] += 1.0;
  }
  for (auto& f : freq) f /= static_cast<double>(trials);
  return freq;
}

}  // namespace spcl
