// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace mixspeech {

// Deterministic, self-contained RNG. Every random draw in the project goes
// through this type so that runs are bit-reproducible across platforms and
// thread counts. Streams are derived by hashing (seed, tag, index...) rather
// than by sharing generator state, which keeps parallel generation and
// checkpoint resume exact.

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Order-sensitive hash combine of several 64-bit words.
inline uint64_t derive_seed(std::initializer_list<uint64_t> words) {
  uint64_t state = 0x6a09e667f3bcc908ull;
  for (uint64_t w : words) {
    state ^= splitmix64(state) ^ w;
    splitmix64(state);
  }
  return splitmix64(state);
}

// Named, mutually independent stream tags.
namespace stream {
constexpr uint64_t kInit = 0xA11CE;      // parameter initialization
constexpr uint64_t kDataOrder = 0xDA7A;  // batch composition
constexpr uint64_t kMixDraws = 0x313C;   // per-frame stream selection
constexpr uint64_t kCorpus = 0xC0B9;     // synthetic utterance content
constexpr uint64_t kNoise = 0x905E;      // evaluation-time noise injection
}  // namespace stream

// xoshiro256++ with a splitmix64-filled state.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
  }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mixspeech
