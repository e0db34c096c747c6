#pragma once

#include <stdexcept>
#include <string>

namespace mocaps {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mismatched or invalid tensor shapes/ranks/dtypes.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid argument values (bad axis, negative stride, out-of-range index...).
struct ValueError : Error {
  using Error::Error;
};

}  // namespace mocaps
