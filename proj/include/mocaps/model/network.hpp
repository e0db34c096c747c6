#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mocaps/reversible/chain.hpp"
#include "mocaps/tensor/rng.hpp"

namespace mocaps::model {

enum class Variant { kMoCapsNet, kResCapsNet, kCapsNet };
enum class Mode { kReversible, kStored };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& s);
const char* mode_name(Mode m);
Mode mode_from_name(const std::string& s);

// Full architecture description: conv stem -> primary capsules -> entry
// capsule layer -> residual capsule chain (2 capsule layers per block) ->
// class capsule layer -> norms, plus the reconstruction decoder. Defaults
// are the 28x28 grayscale setup; for_dataset() adjusts the geometry.
struct NetworkConfig {
  int64_t channels = 1;
  int64_t height = 28;
  int64_t width = 28;
  int64_t classes = 10;

  int64_t stem_filters = 256;
  int64_t stem_kernel = 9;
  int stem_stride = 1;

  int64_t primary_groups = 32;
  int64_t primary_dim = 8;
  int64_t primary_kernel = 9;
  int primary_stride = 2;

  int n_blocks = 1;
  int64_t capsules_per_layer = 32;
  int64_t capsule_dim = 16;
  int routing_iterations = 3;
  double gamma = 0.9;
  Variant variant = Variant::kMoCapsNet;
  Mode mode = Mode::kReversible;

  int64_t recon_hidden1 = 512;
  int64_t recon_hidden2 = 1024;

  double lambda_recon = 5e-4;
  nn::MarginLossParams margin;
  DType dtype = DType::kF32;

  int chain_layer_count() const { return 2 * n_blocks; }
  int64_t pixels() const { return channels * height * width; }
  int64_t stem_out_h() const;
  int64_t stem_out_w() const;
  int64_t primary_out_h() const;
  int64_t primary_out_w() const;
  // Capsule count produced by the primary layer: groups * H' * W'.
  int64_t primary_capsules() const;

  void validate() const;
  static NetworkConfig for_dataset(const std::string& dataset);
};

// Named parameter tensors, ordered by name. Map order doubles as the
// checkpoint record order and the optimizer update order.
struct ModelParams {
  std::map<std::string, Tensor> values;

  bool has(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  int64_t total_elements() const;
  void check_finite(const std::string& context) const;
};

// Parameter name -> shape for a config, in map (name) order.
std::map<std::string, std::vector<int64_t>> expected_param_shapes(
    const NetworkConfig& cfg);
// Raises ValueError when params are missing/extra or any shape/dtype
// disagrees with the config.
void validate_params(const NetworkConfig& cfg, const ModelParams& params);

// Draws fresh parameters: capsule transform weights from N(0, 0.01), relu
// conv/dense weights He-scaled, the sigmoid output layer Xavier-scaled,
// biases zero. Draw order is name order, so a seed pins every value.
ModelParams init_params(const NetworkConfig& cfg, Rng& rng);

// The chain's capsule layers, viewing (not copying) the param tensors.
std::vector<rev::ChainLayer> chain_layers(const NetworkConfig& cfg,
                                          const ModelParams& params);

// ---- pipeline stages, written once against a context ----

// stem conv -> primary capsules -> entry capsule layer; [B,C,H,W] -> [B,N,D].
template <class Ctx, class V = typename Ctx::V>
V front_stage(Ctx& cx, const NetworkConfig& cfg, const ModelParams& p,
              const V& images) {
  V feat = nn::conv_stem(cx, images, cx.param("stem.w", p.at("stem.w")),
                         cx.param("stem.b", p.at("stem.b")), cfg.stem_stride);
  V prim = nn::primary_capsules(
      cx, feat, cx.param("primary.w", p.at("primary.w")),
      cx.param("primary.b", p.at("primary.b")), cfg.primary_stride,
      cfg.primary_groups, cfg.primary_dim);
  return nn::capsule_layer(cx, prim, cx.param("caps1.w", p.at("caps1.w")),
                           cfg.routing_iterations);
}

// Residual capsule chain, dispatched on the variant. Momentum variant runs
// in-context (stored/eval); the reversible path is handled separately by
// loss_and_grads.
template <class Ctx, class V = typename Ctx::V>
V chain_stage(Ctx& cx, const NetworkConfig& cfg, const ModelParams& p,
              const V& x) {
  std::vector<rev::ChainLayer> layers = chain_layers(cfg, p);
  switch (cfg.variant) {
    case Variant::kMoCapsNet:
      return rev::momentum_chain(cx, x, layers,
                                 {cfg.gamma, cfg.routing_iterations})
          .first;
    case Variant::kResCapsNet:
      return rev::classic_residual_chain(cx, x, layers,
                                         cfg.routing_iterations);
    case Variant::kCapsNet:
      return rev::plain_chain(cx, x, layers, cfg.routing_iterations);
  }
  throw ValueError("chain_stage: unknown variant");
}

// Class capsule layer and its norms; returns (class_caps, class_norms).
template <class Ctx, class V = typename Ctx::V>
std::pair<V, V> head_stage(Ctx& cx, const NetworkConfig& cfg,
                           const ModelParams& p, const V& chain_out) {
  V caps = nn::capsule_layer(cx, chain_out, cx.param("caps2.w", p.at("caps2.w")),
                             cfg.routing_iterations);
  return {caps, cx.caps_norm(caps)};
}

template <class Ctx, class V = typename Ctx::V>
V recon_stage(Ctx& cx, const NetworkConfig& cfg, const ModelParams& p,
              const V& class_caps, const V& mask) {
  return nn::reconstruction(
      cx, class_caps, mask, cx.param("recon.w1", p.at("recon.w1")),
      cx.param("recon.b1", p.at("recon.b1")),
      cx.param("recon.w2", p.at("recon.w2")),
      cx.param("recon.b2", p.at("recon.b2")),
      cx.param("recon.w3", p.at("recon.w3")),
      cx.param("recon.b3", p.at("recon.b3")));
}

// ---- entry points ----

struct ForwardOut {
  Tensor class_norms;  // [B,K]
  Tensor class_caps;   // [B,K,D]
  Tensor recon;        // [B,pixels], decoder masked by the predicted class
  // Terminal (x,v) retained by a reversible-mode momentum chain.
  std::optional<rev::ChainState> chain_terminal;
};

// Inference forward (no tape). Prediction = argmax of class norms.
ForwardOut forward(const Tensor& images, const NetworkConfig& cfg,
                   const ModelParams& params);

struct LossBreakdown {
  double margin = 0;
  double recon = 0;
  double total = 0;
};

// Forward + backward for one batch; trainable-parameter gradients accumulate
// into `grads`. Stored mode records one tape across the whole graph;
// reversible mode tapes only the segments outside the chain and reconstructs
// the chain's activations from its terminal state. The decoder is masked by
// the true label during training.
LossBreakdown loss_and_grads(const Tensor& images,
                             const std::vector<int>& labels,
                             const NetworkConfig& cfg,
                             const ModelParams& params,
                             autodiff::GradMap& grads);

// Argmax-of-norms labels; skips the reconstruction branch (the
// classification path does not read it).
std::vector<int> predict(const Tensor& images, const NetworkConfig& cfg,
                         const ModelParams& params);

}  // namespace mocaps::model
