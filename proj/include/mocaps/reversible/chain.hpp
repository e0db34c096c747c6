#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mocaps/capsnn/capsnn.hpp"

namespace mocaps::rev {

// gamma = 0 discards the previous velocity, so the step cannot be undone.
struct NotInvertibleError : Error {
  using Error::Error;
};

// One position in the chain: capsule poses x and velocity v, both [B,N,D].
struct ChainState {
  Tensor x, v;
};

// A chain layer is a capsule layer whose weights map the chain's capsule
// space onto itself: w is [N,N,D,D], registered under `name`.
struct ChainLayer {
  std::string name;
  Tensor w;
};

struct MomentumConfig {
  double gamma = 0.9;
  int routing_iters = 3;
};

// Momentum residual update over a context, starting from v = 0:
//   v <- gamma * v + (1 - gamma) * f(x);  x <- x + v
// per layer, where f is the capsule layer. Returns terminal (x, v). With a
// TapeCtx this is the stored-activations forward; with an EvalCtx nothing is
// retained. If `trajectory` is given, every state including the initial one
// is appended (as plain tensors).
template <class Ctx, class V = typename Ctx::V>
std::pair<V, V> momentum_chain(Ctx& cx, const V& x0,
                               const std::vector<ChainLayer>& layers,
                               const MomentumConfig& cfg,
                               std::vector<ChainState>* trajectory = nullptr) {
  const Tensor& xd = Ctx::data(x0);
  V x = x0;
  V v = cx.constant(Tensor::zeros(xd.shape(), xd.dtype()));
  if (trajectory) trajectory->push_back({Ctx::data(x), Ctx::data(v)});
  for (const ChainLayer& layer : layers) {
    V w = cx.param(layer.name, layer.w);
    V f = nn::capsule_layer(cx, x, w, cfg.routing_iters);
    v = cx.lincomb(cfg.gamma, v, 1.0 - cfg.gamma, f);
    x = cx.add(x, v);
    if (trajectory) trajectory->push_back({Ctx::data(x), Ctx::data(v)});
  }
  return {x, v};
}

// Classic per-layer residual stepping x <- x + f(x); what the gamma = 0
// momentum chain degenerates to.
template <class Ctx, class V = typename Ctx::V>
V residual_chain(Ctx& cx, const V& x0, const std::vector<ChainLayer>& layers,
                 int routing_iters) {
  V x = x0;
  for (const ChainLayer& layer : layers) {
    V w = cx.param(layer.name, layer.w);
    x = cx.add(x, nn::capsule_layer(cx, x, w, routing_iters));
  }
  return x;
}

// Classic two-layer residual block with both shortcuts sourced from the
// block input:
//   x_{n+1} = x_n + f1(x_n);  x_{n+2} = x_n + f2(x_{n+1})
// Additions happen after the squash nonlinearity. Not invertible; the
// baseline variant trains it in stored mode only.
template <class Ctx, class V = typename Ctx::V>
V classic_residual_block(Ctx& cx, const V& x_n, const ChainLayer& layer1,
                         const ChainLayer& layer2, int routing_iters) {
  V w1 = cx.param(layer1.name, layer1.w);
  V w2 = cx.param(layer2.name, layer2.w);
  V x_mid = cx.add(x_n, nn::capsule_layer(cx, x_n, w1, routing_iters));
  return cx.add(x_n, nn::capsule_layer(cx, x_mid, w2, routing_iters));
}

// Stacked Fig-2a blocks over consecutive layer pairs (layers.size() must be
// even: two capsule layers per block).
template <class Ctx, class V = typename Ctx::V>
V classic_residual_chain(Ctx& cx, const V& x0,
                         const std::vector<ChainLayer>& layers,
                         int routing_iters) {
  if (layers.size() % 2 != 0)
    throw ValueError("classic_residual_chain: needs two layers per block");
  V x = x0;
  for (size_t n = 0; n < layers.size(); n += 2)
    x = classic_residual_block(cx, x, layers[n], layers[n + 1], routing_iters);
  return x;
}

// Plain stacked capsule layers, no shortcut.
template <class Ctx, class V = typename Ctx::V>
V plain_chain(Ctx& cx, const V& x0, const std::vector<ChainLayer>& layers,
              int routing_iters) {
  V x = x0;
  for (const ChainLayer& layer : layers) {
    V w = cx.param(layer.name, layer.w);
    x = nn::capsule_layer(cx, x, w, routing_iters);
  }
  return x;
}

// Kernel-path single step and its inverse.
ChainState momentum_step(const ChainState& s, const ChainLayer& layer,
                         const MomentumConfig& cfg);
ChainState momentum_step_inverse(const ChainState& s, const ChainLayer& layer,
                                 const MomentumConfig& cfg);
// v_prev = (v - (1-gamma) f) / gamma; shared by the inverse and backward.
Tensor recover_velocity(const Tensor& v, const Tensor& f, double gamma);

// Reversible-mode chain: forward keeps only the terminal (x, v); backward
// reconstructs each earlier state from it while accumulating layer-weight
// gradients through per-layer local tapes (one f evaluation per layer serves
// both the velocity recovery and the VJPs).
class ReversibleChain {
 public:
  ReversibleChain(std::vector<ChainLayer> layers, MomentumConfig cfg);

  // Returns the chain output x_N; retains (x_N, v_N) as the snapshot.
  Tensor forward(const Tensor& x0, std::vector<ChainState>* trajectory = nullptr);
  bool has_terminal() const { return terminal_.has_value(); }
  const ChainState& terminal() const;

  // Gradient of the loss w.r.t. x0 given its gradient w.r.t. x_N (the
  // terminal velocity carries no upstream gradient: nothing downstream reads
  // it). Consumes the snapshot.
  Tensor backward(const Tensor& grad_x_out, autodiff::GradMap& grads);

  // Pure inversion from an explicit terminal state; returns all states in
  // forward order (index 0 = reconstructed initial state).
  std::vector<ChainState> invert_trajectory(const ChainState& term) const;

  const std::vector<ChainLayer>& layers() const { return layers_; }
  const MomentumConfig& config() const { return cfg_; }

 private:
  std::vector<ChainLayer> layers_;
  MomentumConfig cfg_;
  std::optional<ChainState> terminal_;
};

}  // namespace mocaps::rev
