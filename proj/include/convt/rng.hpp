#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace convt {

/// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t value);

/// Folds a list of keys (seed, epoch, purpose tag, ...) into one stream seed.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys);

/// Deterministic random stream.
///
/// Wraps mt19937_64 and implements every distribution by hand, so a given seed
/// produces the same numbers with any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one draw per call, no cached spare).
  double normal();
  /// Gamma(shape, scale = 1) via Marsaglia-Tsang.
  double gamma(double shape);

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::mt19937_64 engine_;
};

}  // namespace convt
