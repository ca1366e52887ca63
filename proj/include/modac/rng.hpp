#pragma once

#include <cstdint>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace modac::rng {

// splitmix64; used to derive independent substreams from one run seed so
// that adding/removing a consumer never shifts another consumer's stream.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t s = seed;
  std::uint64_t x = splitmix64(s);
  s = x ^ (a * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL);
  x = splitmix64(s);
  s = x ^ (b * 0xbf58476d1ce4e5b9ULL + 0x133111ebULL);
  return splitmix64(s);
}

// Stream tags for the fixed consumers of a run seed.
enum StreamTag : std::uint64_t {
  kManagerInit = 1,
  kOptionInit = 2,
  kOptionRewardInit = 3,
  kOptionTerminationInit = 4,
  kBaselineInit = 5,
  kEnvBase = 1000,  // + env index
};

// xoshiro256** ; self-contained so sequences are identical across
// compilers and standard libraries.
class Stream {
 public:
  Stream() : Stream(0) {}
  explicit Stream(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (the spare is discarded to keep the
  // stream position independent of call pairing).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // normal(0, stddev) resampled until within +-2 stddev
  double truncated_normal(double stddev) {
    for (;;) {
      const double x = normal();
      if (std::fabs(x) <= 2.0) return x * stddev;
    }
  }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Sample an index from an (already normalised) probability vector.
  int categorical(std::span<const double> probs) {
    const double u = uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

 private:
  std::uint64_t s_[4];
};

}  // namespace modac::rng
