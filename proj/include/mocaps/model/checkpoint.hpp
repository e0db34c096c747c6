#pragma once

#include <cstdint>
#include <string>

#include "mocaps/model/network.hpp"

namespace mocaps::model {

struct CheckpointError : Error {
  using Error::Error;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// Little-endian binary: magic "MOCP", version u32, then one record per
// parameter in name order — name length u32, UTF-8 name, rank u32, dims
// u32 x rank, float64 payload. No count field: records run to EOF, and a
// file that ends mid-record is corrupt.
void checkpoint_save(const ModelParams& params, const std::string& path);

// Payloads are cast to `dtype` on load. float32 parameters round-trip
// bit-identically (every float32 is exact in float64).
ModelParams checkpoint_load(const std::string& path, DType dtype);

}  // namespace mocaps::model
