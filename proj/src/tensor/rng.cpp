#include "mocaps/tensor/rng.hpp"

#include <cmath>

namespace mocaps {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed) {
  uint64_t sm = seed;
  for (auto& word : s_) word = splitmix64(sm);
}

Rng Rng::for_stream(uint64_t seed, uint64_t stream) {
  // Decorrelate streams by running the stream id through splitmix64 before
  // mixing it into the seed; adjacent ids produce unrelated states.
  uint64_t sm = stream;
  return Rng(seed ^ splitmix64(sm));
}

static inline uint64_t rotl(uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

uint64_t Rng::next_u64() {
  // xoshiro256++
  uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
  uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  // Box-Muller; u1 is drawn in (0, 1] so the log is finite.
  double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

int64_t Rng::uniform_int(int64_t bound) {
  if (bound <= 0) throw ValueError("uniform_int: bound must be positive");
  uint64_t b = static_cast<uint64_t>(bound);
  // Rejection sampling to avoid modulo bias.
  uint64_t limit = UINT64_MAX - UINT64_MAX % b;
  uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<int64_t>(v % b);
}

Tensor normal_init(std::vector<int64_t> shape, double mean, double stddev,
                   Rng& rng, DType dtype) {
  Tensor t(std::move(shape), dtype);
  int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) t.set_flat(i, mean + stddev * rng.normal());
  return t;
}

}  // namespace mocaps
