#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>

namespace mafenn {

// Counter-based pseudo-random numbers.
//
// Every draw is a pure function of (seed, counter), so any sample in a
// stream can be produced independently of the others.  That is what lets
// the noise kernels run in parallel over sample index and still produce
// bitwise-identical output at any thread count: worker threads never share
// generator state, they just evaluate disjoint counters.
struct CounterRng {
  std::uint64_t seed = 0;

  CounterRng() = default;
  explicit CounterRng(std::uint64_t s) : seed(s) {}

  // splitmix64 finalizer applied to seed + counter.  Passes the usual
  // avalanche sanity checks and is cheap enough to call per sample.
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t at(std::uint64_t counter) const {
    // Golden-ratio stride decorrelates (seed, counter) pairs that differ
    // in either coordinate.
    return mix(seed + counter * 0x9e3779b97f4a7c15ULL);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform_at(std::uint64_t counter) const {
    return static_cast<double>(at(counter) >> 11) * 0x1.0p-53;
  }

  // Two independent standard normals from counters (2i, 2i+1) via
  // Box-Muller.  log(0) is avoided by flipping u1 to (1 - u1) in (0, 1].
  std::pair<double, double> normal_pair_at(std::uint64_t i) const {
    const double u1 = 1.0 - uniform_at(2 * i);
    const double u2 = uniform_at(2 * i + 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    return {r * std::cos(t), r * std::sin(t)};
  }

  // Stateful convenience wrappers for sequential (non-parallel) call sites.
  std::uint64_t next() { return at(counter_++); }
  double uniform() { return uniform_at(counter_++); }
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    auto [a, b] = normal_pair_at(pair_counter_++);
    spare_ = b;
    have_spare_ = true;
    return a;
  }
  // Uniform integer in [0, n) by rejection, exact for any n.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

 private:
  std::uint64_t counter_ = 0;
  std::uint64_t pair_counter_ = 1'000'000'007ULL;  // disjoint from uniform()
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a over a canonical string.  Used to derive per-trial seeds from
// (base seed, equalizer, snr, trial) so that adding rows to a sweep never
// shifts the seeds of existing rows.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return fnv1a(std::to_string(base) + "/" + std::string(tag));
}

}  // namespace mafenn
