#pragma once

#include <cstdint>
#include <string_view>

namespace polyspeech {

/// Counter-based generator. A stream is keyed by (seed, label); draws are
/// splitmix64 of key + counter, so any stream can be split or resumed from
/// its counter alone.
class Rng {
 public:
  Rng() = default;
  Rng(std::uint64_t seed, std::string_view label);

  /// Independent child stream; does not advance this stream.
  Rng split(std::string_view label) const;
  Rng split(std::uint64_t index) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }
  void set_counter(std::uint64_t counter) noexcept { counter_ = counter; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

std::uint64_t hash_label(std::string_view label, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace polyspeech
