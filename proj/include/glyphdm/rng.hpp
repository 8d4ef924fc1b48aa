#pragma once

#include <cstdint>
#include <string_view>

#include <ATen/core/Generator.h>

namespace glyphdm {

std::uint64_t splitmix64(std::uint64_t x);

/// Derives an independent substream seed from a run seed, a stream name
/// ("init", "t_draws", "eps_draws", "x_T", ...) and an index (epoch, variant).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);

at::Generator make_generator(std::uint64_t seed);

/// Unbiased draw in [0, bound) from a splitmix-style counter stream. Used where
/// results must be bit-stable across standard library implementations.
class StableRng {
public:
  explicit StableRng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  std::uint64_t below(std::uint64_t bound);

private:
  std::uint64_t state_;
};

}  // namespace glyphdm
