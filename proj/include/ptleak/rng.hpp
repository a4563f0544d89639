#pragma once

// Deterministic, platform-stable randomness. Everything in the toolkit that
// draws random numbers goes through this header: a SplitMix64 stream plus a
// keyed derivation scheme so each (model, epoch, purpose) gets an independent
// child seed regardless of scheduling order. std::* distributions are avoided
// on purpose — their output is implementation-defined.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace ptleak::rng {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// FNV-1a over the tag string; used to key derivation by purpose.
inline uint64_t hash_tag(std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {
inline void feed(uint64_t& state, uint64_t value) {
  state ^= value + 0x9E3779B97F4A7C15ull + (state << 6) + (state >> 2);
  uint64_t s = state;
  state = splitmix64(s);
}
}  // namespace detail

// Child-seed derivation: order-sensitive mix of a parent seed, a purpose tag,
// and any number of integer path components.
template <typename... Parts>
uint64_t derive(uint64_t seed, std::string_view tag, Parts... parts) {
  uint64_t s = seed;
  detail::feed(s, hash_tag(tag));
  (detail::feed(s, static_cast<uint64_t>(parts)), ...);
  return s;
}

class Prng {
 public:
  explicit Prng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in (0, 1]; safe as a log() argument.
  double uniform_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the spare draw is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform_open();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n); n must be nonzero. Fixed-point multiply keeps
  // the draw deterministic and effectively unbiased for desk-scale n.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace ptleak::rng
