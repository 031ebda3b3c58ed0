#pragma once

// Seeded, portable randomness: mt19937_64 streams with splitmix64 stream
// splitting, uniforms built from the top 53 bits, normals via Box-Muller.
// Distribution code is hand-rolled so sequences are identical across
// standard library implementations.

#include <cmath>
#include <cstdint>
#include <random>

namespace plqid {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)) {}

  // independent stream for a Monte Carlo run
  static Rng with_stream(std::uint64_t seed, std::uint64_t run) {
    return Rng(splitmix64(seed ^ (0x51ed270b7a2cf345ULL * (run + 1))));
  }

  double uniform() {  // in [0, 1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
  }

  std::uint64_t bits() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace plqid
