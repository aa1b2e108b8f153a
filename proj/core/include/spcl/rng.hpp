#pragma once

#include <cstdint>

namespace spcl {

// Purposes that get their own independent random streams.
enum class Stream : std::uint64_t {
  init = 1,
  partition = 2,
  shuffle = 3,
  synthetic = 4,
  probe = 5,
};

/// Counter-based generator: output i is a bijective 64-bit mix of
/// (key, i), so the full state is the (key, counter) pair and any draw can
/// be replayed by resetting the counter.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept
      : key_(key), counter_(counter) {}

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Uniform integer in [0, n); unbiased (rejection). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  // Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept;
  // Normal(0, std) rejected outside ±2·std.
  double truncated_normal(double std) noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

/// Key of the sub-stream for (seed, purpose, a, b). Distinct tuples give
/// unrelated streams, e.g. (seed, partition, step, image id).
std::uint64_t derive_key(std::uint64_t seed, Stream purpose, std::uint64_t a = 0,
                         std::uint64_t b = 0) noexcept;

inline CounterRng make_stream(std::uint64_t seed, Stream purpose, std::uint64_t a = 0,
                              std::uint64_t b = 0) noexcept {
  return CounterRng(derive_key(seed, purpose, a, b));
}

}  // namespace spcl
