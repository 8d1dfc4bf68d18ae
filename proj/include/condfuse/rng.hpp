#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cf {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Deterministic stream splitting: every consumer forks its own stream from a
// seed plus a purpose tag, so adding a consumer never shifts another
// consumer's draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

  Rng fork(std::string_view tag) const { return Rng(splitmix64(seed_ ^ fnv1a(tag))); }
  Rng fork(std::string_view tag, uint64_t n) const {
    return Rng(splitmix64(splitmix64(seed_ ^ fnv1a(tag)) + n));
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  // in [0, n)
  int64_t randint(int64_t n) {
    return std::uniform_int_distribution<int64_t>(0, n - 1)(gen_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  uint64_t bits() { return gen_(); }

  std::mt19937_64& engine() { return gen_; }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace cf
