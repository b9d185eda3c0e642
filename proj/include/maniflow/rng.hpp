#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>

namespace maniflow {

// Counter-based random stream. A stream is a (key, counter) pair; every draw
// hashes the counter under the key (SplitMix64 core), so the full state is
// two integers that can be checkpointed, and independent substreams can be
// derived with split() without advancing the parent.
class RngStream {
public:
  RngStream() = default;
  explicit RngStream(uint64_t key, uint64_t counter = 0) : key_(key), counter_(counter) {}

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

  // Derives an independent stream for the given lane. Does not advance this one.
  RngStream split(uint64_t lane) const {
    return RngStream(mix(key_ ^ mix(lane * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull)));
  }
  RngStream split(uint64_t lane, uint64_t sublane) const { return split(lane).split(sublane); }

  uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform on [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // Unbiased integer on [0, n), n > 0.
  uint64_t next_below(uint64_t n) {
    assert(n > 0);
    const uint64_t min = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      uint64_t v = next_u64();
      if (v >= min) return v % n;
    }
  }

  // Standard normal, Box-Muller. One output per two uniforms.
  double next_gaussian() {
    const double u1 = 1.0 - next_double();  // (0, 1], keeps log finite
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Gamma(shape, 1), Marsaglia-Tsang squeeze; shape < 1 via the boost trick.
  double next_gamma(double shape) {
    assert(shape > 0.0);
    if (shape < 1.0) {
      const double u = 1.0 - next_double();
      return next_gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      const double x = next_gaussian();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = 1.0 - next_double();
      const double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
      if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double next_beta(double a, double b) {
    const double x = next_gamma(a);
    const double y = next_gamma(b);
    return x / (x + y);
  }

private:
  static constexpr double kPi = 3.14159265358979323846;

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace maniflow
