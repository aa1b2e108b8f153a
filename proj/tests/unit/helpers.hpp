#pragma once

#include <cmath>
#include <cstdint>

#include "spcl/rng.hpp"
#include "spcl/tensor.hpp"

namespace spcl::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

inline Tensor random_unit_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Tensor t = random_tensor({rows, cols}, seed);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (float v : t.row(r)) ss += static_cast<double>(v) * v;
    const double n = std::sqrt(ss);
    for (auto& v : t.row(r)) v = static_cast<float>(v / n);
  }
  return t;
}

}  // namespace spcl::test
