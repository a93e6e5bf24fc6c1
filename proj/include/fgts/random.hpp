#pragma once

// Counter-based random streams.
//
// A stream is identified by a 64-bit key and produces
//   u_i = mix64(key + i * 0x9E3779B97F4A7C15),   i = 1, 2, ...
// where mix64 is the SplitMix64 finalizer. Output i depends only on (key, i),
// so a stream never shares state with another one and results do not depend
// on which thread consumes it. Keys are derived by hashing tuples such as
// (experiment, seed, episode, stage) through stream_key().

#include <cmath>
#include <concepts>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <string_view>

namespace fgts {

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x6A09E667F3BCC909ULL;
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p + 0x9E3779B97F4A7C15ULL));
  return h;
}

/// FNV-1a, used to fingerprint canonical config text.
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Anything that hands out standard normal variates.
template <class R>
concept GaussianSource = requires(R& r) {
  { r.normal() } -> std::convertible_to<double>;
};

class RandomStream {
 public:
  using result_type = std::uint64_t;

  explicit RandomStream(std::uint64_t key = 0) noexcept : key_(key) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept { return mix64(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by multiply-shift.
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Box-Muller; the second variate of each pair is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Wraps a source and flips the sign of every variate.
template <GaussianSource R>
class NegatedNormals {
 public:
  explicit NegatedNormals(R& inner) : inner_(inner) {}
  double normal() { return -inner_.normal(); }

 private:
  R& inner_;
};

}  // namespace fgts
