#pragma once

#include <vector>

#include "mocaps/tensor/tensor.hpp"

// Naive single-threaded reference implementations, written straight from the
// math with plain index loops and no sharing with the parallel kernels.
// Tests use these as oracles; kernel_bench compares their speed against the
// OpenMP kernels. Only f64 is supported where the parallel layer offers a
// dtype choice -- these exist for checking, not training.
namespace mocaps::ref {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
Tensor squash(const Tensor& s);
Tensor softmax_last(const Tensor& a);
Tensor votes(const Tensor& u, const Tensor& w);
// Full routing-by-agreement, unrolled as one literal loop.
Tensor rba_route(const Tensor& uhat, int iterations);
Tensor capsule_layer(const Tensor& u, const Tensor& w, int iterations);

// Momentum chain over `layer_weights` applied to x0 with v0 = 0:
//   v <- gamma*v + (1-gamma)*f(x); x <- x + v
// Returns all intermediate (x, v) pairs including the initial state.
struct ChainTrace {
  std::vector<Tensor> x, v;
};
ChainTrace momentum_chain(const Tensor& x0,
                          const std::vector<Tensor>& layer_weights,
                          double gamma, int iterations);

// One Adam step applied in place to a flat parameter/gradient pair.
struct AdamBuffers {
  std::vector<double> m, v;
  int64_t t = 0;
};
void adam_step(std::vector<double>& param, const std::vector<double>& grad,
               AdamBuffers& buf, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

}  // namespace mocaps::ref
