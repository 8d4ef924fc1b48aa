#include "glyphdm/rng.hpp"

#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace glyphdm {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return splitmix64(splitmix64(seed ^ h) + splitmix64(index));
}

at::Generator make_generator(std::uint64_t seed) { return at::detail::createCPUGenerator(seed); }

std::uint64_t StableRng::next() {
  // splitmix64 applies the increment itself
  const std::uint64_t out = splitmix64(state_);
  state_ += 0x9E3779B97F4A7C15ULL;
  return out;
}

std::uint64_t StableRng::below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("StableRng::below: bound must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t r = next();
  while (r >= limit) r = next();
  return r % bound;
}

}  // namespace glyphdm
