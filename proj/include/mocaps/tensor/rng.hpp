#pragma once

#include <array>
#include <cstdint>

#include "mocaps/tensor/tensor.hpp"

namespace mocaps {

// Deterministic xoshiro256++ generator seeded through splitmix64, with
// Box-Muller normals. Every random decision in the project draws from one of
// these, derived from the run seed via for_stream(), so a single seed pins
// the whole run. Stream ids used by the project:
//   0 parameter init, 1 shuffling, 2 crop offsets, 3 synthetic data,
//   4 benchmark inputs.
class Rng {
 public:
  explicit Rng(uint64_t seed);
  static Rng for_stream(uint64_t seed, uint64_t stream);

  uint64_t next_u64();
  double uniform();                    // [0, 1)
  double normal();                     // standard normal
  int64_t uniform_int(int64_t bound);  // [0, bound), unbiased

 private:
  std::array<uint64_t, 4> s_;
  double cached_normal_ = 0;
  bool has_cached_normal_ = false;
};

uint64_t splitmix64(uint64_t& state);

// Fills a fresh tensor with mean + stddev * z, drawn in row-major order.
// f32 tensors are filled from the same double draws, rounded once.
Tensor normal_init(std::vector<int64_t> shape, double mean, double stddev,
                   Rng& rng, DType dtype = DType::kF32);

}  // namespace mocaps
