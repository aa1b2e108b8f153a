#include "spcl/rng.hpp"

#include <cmath>
#include <numbers>

namespace spcl {

std::uint64_t mix64(std::uint64_t x) noexcept {
  // SplitMix64 finalizer.
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t CounterRng::next_u64() noexcept {
  ++counter_;
  return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
}

double CounterRng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t CounterRng::below(std::uint64_t n) noexcept {
  // 2^64 mod n low values are over-represented; reject them.
  const std::uint64_t threshold = (std::uint64_t{0} - n) % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x < threshold);
  return x % n;
}

double CounterRng::normal() noexcept {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double CounterRng::truncated_normal(double std) noexcept {
  double x;
  do {
    x = normal();
  } while (std::abs(x) > 2.0);
  return x * std;
}

std::uint64_t derive_key(std::uint64_t seed, Stream purpose, std::uint64_t a,
                         std::uint64_t b) noexcept {
  std::uint64_t k = mix64(seed ^ 0x5bd1e9955bd1e995ULL);
  k = mix64(k ^ (static_cast<std::uint64_t>(purpose) * 0x9e3779b97f4a7c15ULL));
  k = mix64(k ^ (a + 0x632be59bd9b4e019ULL));
  k = mix64(k ^ (b + 0x85157af5ULL));
  return k;
}

}  // namespace spcl
