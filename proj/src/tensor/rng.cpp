#include "hypermoe/rng.hpp"

#include "hypermoe/errors.hpp"

namespace hypermoe {

namespace {

// splitmix64 finalizer, used to decorrelate derived seeds.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(mix(seed)) {}

double Rng::gaussian() {
  ++counter_;
  return normal_(engine_);
}

double Rng::uniform() {
  ++counter_;
  return std::generate_canonical<double, 53>(engine_);
}

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw ContractError("Rng::below: bound must be positive");
  ++counter_;
  return std::uniform_int_distribution<std::uint64_t>(0, bound - 1)(engine_);
}

Tensor Rng::gaussian_tensor(Shape shape, double stddev, bool requires_grad) {
  std::vector<double> values(shape_volume(shape));
  for (double& v : values) v = stddev * gaussian();
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

Tensor Rng::uniform_tensor(Shape shape, double low, double high,
                           bool requires_grad) {
  std::vector<double> values(shape_volume(shape));
  for (double& v : values) v = low + (high - low) * uniform();
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(mix(seed_ ^ mix(stream + 0x5851f42d4c957f2dULL)));
}

}  // namespace hypermoe
