#include "polyspeech/rng.hpp"

#include <cmath>
#include <numbers>

#include "polyspeech/error.hpp"

namespace polyspeech {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t hash_label(std::string_view label, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t seed, std::string_view label)
    : key_(splitmix64(hash_label(label) ^ splitmix64(seed))) {}

Rng Rng::split(std::string_view label) const {
  Rng child;
  child.key_ = splitmix64(hash_label(label, key_));
  return child;
}

Rng Rng::split(std::uint64_t index) const {
  Rng child;
  child.key_ = splitmix64(key_ ^ splitmix64(index + 0x632be59bd9b4e019ULL));
  return child;
}

std::uint64_t Rng::next_u64() {
  return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * (++counter_));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  require(n > 0, "uniform_int: n must be positive");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace polyspeech
