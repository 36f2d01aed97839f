// Keyed, splittable random streams.
//
// Every stochastic draw in the simulator comes from a stream identified by
// (seed, run, agent, step, purpose, link, iter).  Streams are independent of
// evaluation order, so runs are reproducible for any worker count and the
// shared ground-truth realization can live on its own run-independent key.

#pragma once

#include <cmath>
#include <cstdint>

namespace coslas {

enum class Draw : std::uint64_t {
  PriorClock = 1,
  PriorLocation,
  PriorLocationMean,
  ClockEvolution,
  LocationEvolution,
  MeasurementNoise,
  EtaPhiParticles,
  EtaPsiParticles,
  BeliefParticles,
  Generic,
};

struct StreamKey {
  std::uint64_t run = 0;
  std::uint64_t agent = 0;
  std::uint64_t step = 0;
  Draw purpose = Draw::Generic;
  std::uint64_t link = 0;
  std::uint64_t iter = 0;
};

// Run id reserved for the state realization shared by all simulation runs.
inline constexpr std::uint64_t kGroundTruthRun = 0xFFFFFFFFFFFFFFFFull;

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace detail

// xoshiro256++ seeded through splitmix64 over the key fields.
class RngStream {
 public:
  RngStream(std::uint64_t seed, const StreamKey& key) {
    std::uint64_t x = seed;
    x ^= detail::splitmix64(x) + key.run;
    x ^= detail::splitmix64(x) + key.agent;
    x ^= detail::splitmix64(x) + key.step;
    x ^= detail::splitmix64(x) + static_cast<std::uint64_t>(key.purpose);
    x ^= detail::splitmix64(x) + key.link;
    x ^= detail::splitmix64(x) + key.iter;
    for (auto& s : state_) s = detail::splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::uint64_t state_[4];
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace coslas
