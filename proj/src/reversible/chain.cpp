#include "mocaps/reversible/chain.hpp"

namespace mocaps::rev {

namespace k = mocaps::kernels;

ChainState momentum_step(const ChainState& s, const ChainLayer& layer,
                         const MomentumConfig& cfg) {
  Tensor f = nn::capsule_layer(s.x, layer.w, cfg.routing_iters);
  Tensor v = k::lincomb(cfg.gamma, s.v, 1.0 - cfg.gamma, f);
  Tensor x = k::add(s.x, v);
  return {x, v};
}

Tensor recover_velocity(const Tensor& v, const Tensor& f, double gamma) {
  return k::scale(k::sub(v, k::scale(f, 1.0 - gamma)), 1.0 / gamma);
}

ChainState momentum_step_inverse(const ChainState& s, const ChainLayer& layer,
                                 const MomentumConfig& cfg) {
  if (cfg.gamma <= 0.0)
    throw NotInvertibleError(
        "momentum step with gamma = 0 discards the previous velocity and "
        "cannot be inverted");
  Tensor x_prev = k::sub(s.x, s.v);
  Tensor f = nn::capsule_layer(x_prev, layer.w, cfg.routing_iters);
  Tensor v_prev = recover_velocity(s.v, f, cfg.gamma);
  return {x_prev, v_prev};
}

ReversibleChain::ReversibleChain(std::vector<ChainLayer> layers,
                                 MomentumConfig cfg)
    : layers_(std::move(layers)), cfg_(cfg) {
  if (cfg_.gamma < 0.0 || cfg_.gamma > 1.0)
    throw ValueError("ReversibleChain: gamma must be in [0, 1]");
}

Tensor ReversibleChain::forward(const Tensor& x0,
                                std::vector<ChainState>* trajectory) {
  nn::EvalCtx cx;
  auto [x, v] = momentum_chain(cx, x0, layers_, cfg_, trajectory);
  // The terminal pair is all the backward pass needs; everything between is
  // recomputed. Claim its buffers so the ledger attributes them correctly.
  x.storage()->claim_if_transient(bench::MemSite::kSnapshot);
  v.storage()->claim_if_transient(bench::MemSite::kSnapshot);
  terminal_ = ChainState{x, v};
  return x;
}

const ChainState& ReversibleChain::terminal() const {
  if (!terminal_) throw Error("ReversibleChain: no terminal state saved");
  return *terminal_;
}

Tensor ReversibleChain::backward(const Tensor& grad_x_out,
                                 autodiff::GradMap& grads) {
  if (!terminal_)
    throw Error("ReversibleChain::backward: run forward first (the snapshot "
                "is consumed by each backward)");
  if (cfg_.gamma <= 0.0)
    throw NotInvertibleError(
        "ReversibleChain::backward: gamma = 0 is not invertible; train the "
        "gamma = 0 configuration in stored mode");
  check_same_shape(grad_x_out, terminal_->x, "ReversibleChain::backward");

  Tensor x = terminal_->x;
  Tensor v = terminal_->v;
  Tensor gx = grad_x_out;
  Tensor gv = Tensor::zeros(v.shape(), v.dtype());
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    // Adjoint of x' = x + v', v' = gamma v + (1-gamma) f(x): with
    // u = g_x' + g_v', the pre-step gradients are
    //   g_x = g_x' + (1-gamma) * J_f(x)^T u,  g_v = gamma * u.
    Tensor u = k::add(gx, gv);
    Tensor x_prev = k::sub(x, v);
    autodiff::Tape tape;
    nn::TapeCtx cx{tape};
    autodiff::Value xin = tape.input(x_prev);
    autodiff::Value w = tape.param(it->name, it->w);
    autodiff::Value f = nn::capsule_layer(cx, xin, w, cfg_.routing_iters);
    Tensor v_prev = recover_velocity(v, f.data, cfg_.gamma);
    Tensor f_seed = k::scale(u, 1.0 - cfg_.gamma);
    auto res = tape.backward({{f, f_seed}}, grads, {xin});
    gx = k::add(gx, res.watched.at(xin.id));
    gv = k::scale(u, cfg_.gamma);
    x = x_prev;
    v = v_prev;
  }
  terminal_.reset();
  return gx;
}

std::vector<ChainState> ReversibleChain::invert_trajectory(
    const ChainState& term) const {
  std::vector<ChainState> states(layers_.size() + 1);
  states.back() = term;
  for (size_t n = layers_.size(); n-- > 0;)
    states[n] = momentum_step_inverse(states[n + 1], layers_[n], cfg_);
  return states;
}

}  // namespace mocaps::rev
