#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace brwre {

// splitmix64 step: advances `state` and returns the next output word.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream seed for (master, purpose, index). Replicate `index` always gets the
// same stream no matter how work is scheduled across threads.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                                 std::uint64_t index = 0) {
  std::uint64_t s = master;
  std::uint64_t h = splitmix64(s);
  s ^= fnv1a64(purpose);
  h ^= splitmix64(s);
  s ^= index * 0xd1342543de82ef95ULL + 1;
  h ^= splitmix64(s);
  return h;
}

inline std::mt19937_64 make_stream(std::uint64_t master, std::string_view purpose,
                                   std::uint64_t index = 0) {
  return std::mt19937_64(derive_seed(master, purpose, index));
}

// Marsaglia polar method with one cached spare. Self-contained so that streams
// are reproducible across standard-library implementations.
class NormalSampler {
 public:
  template <class RNG>
  double operator()(RNG& rng, double mean, double stddev) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u, v, q;
    do {
      u = 2.0 * uniform_(rng) - 1.0;
      v = 2.0 * uniform_(rng) - 1.0;
      q = u * u + v * v;
    } while (q >= 1.0 || q == 0.0);
    const double f = std::sqrt(-2.0 * std::log(q) / q);
    spare_ = v * f;
    has_spare_ = true;
    return mean + stddev * u * f;
  }

  void reset() { has_spare_ = false; }

 private:
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Knuth product-of-uniforms Poisson sampler; exact and fast for small means.
template <class RNG>
int sample_poisson(RNG& rng, double mean) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  if (mean < 32.0) {
    const double limit = std::exp(-mean);
    int k = 0;
    double prod = uniform(rng);
    while (prod > limit) {
      ++k;
      prod *= uniform(rng);
    }
    return k;
  }
  // Large means: split recursively; counts add for independent Poissons.
  int half = sample_poisson(rng, mean / 2.0);
  return half + sample_poisson(rng, mean - mean / 2.0);
}

}  // namespace brwre
