#pragma once

#include <cstdint>
#include <cmath>

#include "nerfsim/common.h"

namespace nerfsim {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based generator: a stream is identified by (seed, stream id) and is
// independent of thread scheduling, which keeps parallel runs reproducible.
class Rng {
 public:
  Rng() : state_(0x853c49e6748fea9bULL) {}
  explicit Rng(uint64_t seed, uint64_t stream = 0)
      : state_(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL))) {}

  uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // Uniform in [0, 1).
  double uniform() {
    return double(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

  double normal() {
    // Box-Muller; one value per call keeps the stream layout simple.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  Vec3 normal3() { return Vec3(normal(), normal(), normal()); }

 private:
  uint64_t state_;
};

// Radical inverse in the given base; used for low-discrepancy direction sets.
inline double radical_inverse(uint32_t base, uint64_t i) {
  double inv = 1.0 / base;
  double f = inv;
  double r = 0.0;
  while (i > 0) {
    r += f * double(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}

// Deterministic uniform hemisphere directions about +z (pdf = 1/(2*pi)).
// Halton (2,3) with a seed-derived Cranley-Patterson rotation.
inline std::vector<Vec3> hemisphere_directions(int count, uint64_t seed) {
  double ou = double(splitmix64(seed) >> 11) * (1.0 / 9007199254740992.0);
  double ov = double(splitmix64(seed ^ 0x5bf0a8b1ULL) >> 11) *
              (1.0 / 9007199254740992.0);
  std::vector<Vec3> dirs;
  dirs.reserve(count);
  for (int i = 0; i < count; ++i) {
    double u = radical_inverse(2, uint64_t(i) + 1) + ou;
    double v = radical_inverse(3, uint64_t(i) + 1) + ov;
    u -= std::floor(u);
    v -= std::floor(v);
    double z = u;  // cos(theta) uniform in [0,1) -> uniform solid angle
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    double phi = 2.0 * kPi * v;
    dirs.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
  }
  return dirs;
}

}  // namespace nerfsim
