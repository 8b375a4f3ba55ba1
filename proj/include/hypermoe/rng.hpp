#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "hypermoe/tensor.hpp"

namespace hypermoe {

/// Seeded random source. Two instances built from the same seed and driven
/// through the same call sequence produce bitwise-identical streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  // Number of primitive draws made so far.
  std::uint64_t counter() const { return counter_; }

  double gaussian();
  double uniform();  // [0, 1)
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  Tensor gaussian_tensor(Shape shape, double stddev, bool requires_grad = false);
  Tensor uniform_tensor(Shape shape, double low, double high,
                        bool requires_grad = false);

  // Independent child stream; derived from the seed and a stream label only.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace hypermoe
