#include "mocaps/model/network.hpp"

#include <cmath>

namespace mocaps::model {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kMoCapsNet: return "mocapsnet";
    case Variant::kResCapsNet: return "rescapsnet";
    case Variant::kCapsNet: return "capsnet";
  }
  return "?";
}

Variant variant_from_name(const std::string& s) {
  if (s == "mocapsnet") return Variant::kMoCapsNet;
  if (s == "rescapsnet") return Variant::kResCapsNet;
  if (s == "capsnet") return Variant::kCapsNet;
  throw ValueError("unknown variant '" + s +
                   "' (expected mocapsnet, rescapsnet, or capsnet)");
}

const char* mode_name(Mode m) {
  return m == Mode::kReversible ? "reversible" : "stored";
}

Mode mode_from_name(const std::string& s) {
  if (s == "reversible") return Mode::kReversible;
  if (s == "stored") return Mode::kStored;
  throw ValueError("unknown mode '" + s + "' (expected reversible or stored)");
}

int64_t NetworkConfig::stem_out_h() const {
  return kernels::conv_out_dim(height, stem_kernel, stem_stride);
}
int64_t NetworkConfig::stem_out_w() const {
  return kernels::conv_out_dim(width, stem_kernel, stem_stride);
}
int64_t NetworkConfig::primary_out_h() const {
  return kernels::conv_out_dim(stem_out_h(), primary_kernel, primary_stride);
}
int64_t NetworkConfig::primary_out_w() const {
  return kernels::conv_out_dim(stem_out_w(), primary_kernel, primary_stride);
}
int64_t NetworkConfig::primary_capsules() const {
  return primary_groups * primary_out_h() * primary_out_w();
}

void NetworkConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ValueError(std::string("NetworkConfig: ") + msg);
  };
  need(channels >= 1 && height >= 1 && width >= 1,
       "image geometry must be positive");
  need(classes >= 2, "need at least two classes");
  need(stem_filters >= 1 && stem_kernel >= 1 && stem_stride >= 1,
       "stem filters/kernel/stride must be positive");
  need(primary_groups >= 1 && primary_dim >= 1 && primary_kernel >= 1 &&
           primary_stride >= 1,
       "primary filters/kernel/stride must be positive");
  need(stem_kernel <= height && stem_kernel <= width,
       "stem kernel does not fit the image");
  need(primary_kernel <= stem_out_h() && primary_kernel <= stem_out_w(),
       "primary kernel does not fit the stem output");
  need(n_blocks >= 1, "n_blocks must be >= 1");
  need(capsules_per_layer >= 1 && capsule_dim >= 1,
       "chain capsule count/dim must be positive");
  need(routing_iterations >= 1, "routing_iterations must be >= 1");
  need(gamma >= 0.0 && gamma <= 1.0, "gamma must be in [0, 1]");
  need(recon_hidden1 >= 1 && recon_hidden2 >= 1,
       "decoder widths must be positive");
  need(lambda_recon >= 0.0, "lambda_recon must be >= 0");
  if (mode == Mode::kReversible) {
    need(variant == Variant::kMoCapsNet,
         "reversible mode requires the momentum variant");
    need(gamma > 0.0, "gamma = 0 is not invertible; use stored mode");
  }
}

NetworkConfig NetworkConfig::for_dataset(const std::string& dataset) {
  NetworkConfig cfg;
  if (dataset == "mnist" || dataset == "synthetic") return cfg;
  if (dataset == "cifar10") {
    cfg.channels = 3;
    cfg.height = 32;
    cfg.width = 32;
    return cfg;
  }
  throw ValueError("unknown dataset '" + dataset +
                   "' (expected mnist, cifar10, or synthetic)");
}

bool ModelParams::has(const std::string& name) const {
  return values.count(name) != 0;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end())
    throw ValueError("no parameter named '" + name + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = values.find(name);
  if (it == values.end())
    throw ValueError("no parameter named '" + name + "'");
  return it->second;
}

int64_t ModelParams::total_elements() const {
  int64_t n = 0;
  for (const auto& [name, t] : values) n += t.size();
  return n;
}

namespace {

template <typename T>
bool all_finite(const Tensor& t) {
  const T* p = t.data<T>();
  for (int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

bool tensor_finite(const Tensor& t) {
  return t.dtype() == DType::kF32 ? all_finite<float>(t)
                                  : all_finite<double>(t);
}

}  // namespace

void ModelParams::check_finite(const std::string& context) const {
  for (const auto& [name, t] : values)
    if (!tensor_finite(t))
      throw ValueError(context + ": parameter '" + name +
                       "' has non-finite values");
}

std::map<std::string, std::vector<int64_t>> expected_param_shapes(
    const NetworkConfig& cfg) {
  cfg.validate();
  std::map<std::string, std::vector<int64_t>> s;
  s["stem.w"] = {cfg.stem_filters, cfg.channels, cfg.stem_kernel,
                 cfg.stem_kernel};
  s["stem.b"] = {cfg.stem_filters};
  s["primary.w"] = {cfg.primary_groups * cfg.primary_dim, cfg.stem_filters,
                    cfg.primary_kernel, cfg.primary_kernel};
  s["primary.b"] = {cfg.primary_groups * cfg.primary_dim};
  s["caps1.w"] = {cfg.primary_capsules(), cfg.capsules_per_layer,
                  cfg.capsule_dim, cfg.primary_dim};
  for (int i = 0; i < cfg.chain_layer_count(); ++i)
    s["chain." + std::to_string(i) + ".w"] = {
        cfg.capsules_per_layer, cfg.capsules_per_layer, cfg.capsule_dim,
        cfg.capsule_dim};
  s["caps2.w"] = {cfg.capsules_per_layer, cfg.classes, cfg.capsule_dim,
                  cfg.capsule_dim};
  s["recon.w1"] = {cfg.recon_hidden1, cfg.classes * cfg.capsule_dim};
  s["recon.b1"] = {cfg.recon_hidden1};
  s["recon.w2"] = {cfg.recon_hidden2, cfg.recon_hidden1};
  s["recon.b2"] = {cfg.recon_hidden2};
  s["recon.w3"] = {cfg.pixels(), cfg.recon_hidden2};
  s["recon.b3"] = {cfg.pixels()};
  return s;
}

void validate_params(const NetworkConfig& cfg, const ModelParams& params) {
  auto want = expected_param_shapes(cfg);
  for (const auto& [name, shape] : want) {
    auto it = params.values.find(name);
    if (it == params.values.end())
      throw ValueError("params are missing tensor '" + name + "'");
    if (it->second.shape() != shape)
      throw ShapeError("param '" + name + "' has shape " +
                       it->second.shape_str() + ", config wants " +
                       shape_to_string(shape));
    if (it->second.dtype() != cfg.dtype)
      throw ValueError("param '" + name + "' has dtype " +
                       dtype_name(it->second.dtype()) + ", config wants " +
                       dtype_name(cfg.dtype));
  }
  for (const auto& [name, t] : params.values)
    if (want.find(name) == want.end())
      throw ValueError("params contain unexpected tensor '" + name + "'");
}

namespace {

// He scaling in front of relu, Xavier for the sigmoid output layer, and the
// flat 0.01 spread for capsule transforms.
double init_stddev(const NetworkConfig& cfg, const std::string& name) {
  if (name == "stem.w")
    return std::sqrt(2.0 / static_cast<double>(cfg.channels * cfg.stem_kernel *
                                               cfg.stem_kernel));
  if (name == "primary.w")
    return std::sqrt(2.0 / static_cast<double>(
                               cfg.stem_filters * cfg.primary_kernel *
                               cfg.primary_kernel));
  if (name == "recon.w1")
    return std::sqrt(2.0 /
                     static_cast<double>(cfg.classes * cfg.capsule_dim));
  if (name == "recon.w2")
    return std::sqrt(2.0 / static_cast<double>(cfg.recon_hidden1));
  if (name == "recon.w3")
    return std::sqrt(2.0 /
                     static_cast<double>(cfg.recon_hidden2 + cfg.pixels()));
  return 0.01;
}

}  // namespace

ModelParams init_params(const NetworkConfig& cfg, Rng& rng) {
  bench::MemSiteScope site(bench::MemSite::kParameter);
  ModelParams p;
  for (const auto& [name, shape] : expected_param_shapes(cfg)) {
    bool bias = name.find(".b") != std::string::npos;
    p.values[name] =
        bias ? Tensor::zeros(shape, cfg.dtype)
             : normal_init(shape, 0.0, init_stddev(cfg, name), rng, cfg.dtype);
  }
  return p;
}

std::vector<rev::ChainLayer> chain_layers(const NetworkConfig& cfg,
                                          const ModelParams& params) {
  std::vector<rev::ChainLayer> layers;
  layers.reserve(cfg.chain_layer_count());
  for (int i = 0; i < cfg.chain_layer_count(); ++i) {
    std::string name = "chain." + std::to_string(i) + ".w";
    layers.push_back({name, params.at(name)});
  }
  return layers;
}

namespace {

void check_images(const Tensor& images, const NetworkConfig& cfg) {
  if (images.rank() != 4 || images.dim(1) != cfg.channels ||
      images.dim(2) != cfg.height || images.dim(3) != cfg.width)
    throw ShapeError("images " + images.shape_str() +
                     " do not match the configured geometry [B," +
                     std::to_string(cfg.channels) + "," +
                     std::to_string(cfg.height) + "," +
                     std::to_string(cfg.width) + "]");
  if (images.dtype() != cfg.dtype)
    throw ValueError(std::string("images have dtype ") +
                     dtype_name(images.dtype()) + ", config wants " +
                     dtype_name(cfg.dtype));
}

struct TapedLosses {
  autodiff::Value total;
  LossBreakdown breakdown;
};

// Class capsules, losses, and their combination, recorded on the tape
// behind `cx`. The decoder sees the label mask.
TapedLosses taped_head(nn::TapeCtx& cx, const NetworkConfig& cfg,
                       const ModelParams& params,
                       const autodiff::Value& chain_out, const Tensor& onehot,
                       const Tensor& mask, const Tensor& pixels) {
  auto [caps, norms] = head_stage(cx, cfg, params, chain_out);
  autodiff::Value recon =
      recon_stage(cx, cfg, params, caps, autodiff::Tape::constant(mask));
  autodiff::Value margin =
      nn::margin_loss(cx, norms, autodiff::Tape::constant(onehot), cfg.margin);
  autodiff::Value recon_l =
      nn::reconstruction_loss(cx, recon, autodiff::Tape::constant(pixels));
  autodiff::Value total = nn::total_loss(cx, margin, recon_l, cfg.lambda_recon);
  return {total,
          {margin.data.item(), recon_l.data.item(), total.data.item()}};
}

}  // namespace

ForwardOut forward(const Tensor& images, const NetworkConfig& cfg,
                   const ModelParams& params) {
  cfg.validate();
  validate_params(cfg, params);
  check_images(images, cfg);
  nn::EvalCtx cx;
  Tensor x0 = front_stage(cx, cfg, params, images);
  Tensor x_out;
  std::optional<rev::ChainState> snap;
  if (cfg.variant == Variant::kMoCapsNet) {
    auto [x, v] = rev::momentum_chain(cx, x0, chain_layers(cfg, params),
                                      {cfg.gamma, cfg.routing_iterations});
    x_out = x;
    if (cfg.mode == Mode::kReversible) {
      x.storage()->claim_if_transient(bench::MemSite::kSnapshot);
      v.storage()->claim_if_transient(bench::MemSite::kSnapshot);
      snap = rev::ChainState{x, v};
    }
  } else {
    x_out = chain_stage(cx, cfg, params, x0);
  }
  auto [caps, norms] = head_stage(cx, cfg, params, x_out);
  std::vector<int64_t> am = kernels::argmax_last(norms);
  Tensor mask = nn::capsule_mask(std::vector<int>(am.begin(), am.end()),
                                 cfg.classes, cfg.capsule_dim, cfg.dtype);
  Tensor recon = recon_stage(cx, cfg, params, caps, mask);
  return {norms, caps, recon, std::move(snap)};
}

LossBreakdown loss_and_grads(const Tensor& images,
                             const std::vector<int>& labels,
                             const NetworkConfig& cfg,
                             const ModelParams& params,
                             autodiff::GradMap& grads) {
  cfg.validate();
  validate_params(cfg, params);
  check_images(images, cfg);
  if (images.dim(0) != static_cast<int64_t>(labels.size()))
    throw ShapeError("batch has " + std::to_string(images.dim(0)) +
                     " images but " + std::to_string(labels.size()) +
                     " labels");
  auto& ledger = bench::MemoryLedger::instance();
  ledger.begin_phase(bench::Phase::kForward);

  Tensor onehot = nn::one_hot(labels, cfg.classes, cfg.dtype);
  Tensor mask =
      nn::capsule_mask(labels, cfg.classes, cfg.capsule_dim, cfg.dtype);
  Tensor pixels = images.reshape({images.dim(0), cfg.pixels()});
  Tensor seed = Tensor::scalar(1.0, cfg.dtype);

  LossBreakdown out;
  if (cfg.variant == Variant::kMoCapsNet && cfg.mode == Mode::kReversible) {
    // Tape the segments around the chain; the chain itself retains only its
    // terminal state and rebuilds everything else during backward.
    autodiff::Tape front;
    nn::TapeCtx fcx{front};
    autodiff::Value x0 =
        front_stage(fcx, cfg, params, autodiff::Tape::constant(images));

    rev::ReversibleChain chain(chain_layers(cfg, params),
                               {cfg.gamma, cfg.routing_iterations});
    Tensor x_out = chain.forward(x0.data);

    autodiff::Tape back;
    nn::TapeCtx bcx{back};
    autodiff::Value chain_out = back.input(x_out);
    TapedLosses losses =
        taped_head(bcx, cfg, params, chain_out, onehot, mask, pixels);
    out = losses.breakdown;

    ledger.begin_phase(bench::Phase::kBackward);
    autodiff::Tape::BackwardResult res =
        back.backward({{losses.total, seed}}, grads, {chain_out});
    Tensor g_x0 = chain.backward(res.watched.at(chain_out.id), grads);
    front.backward({{x0, g_x0}}, grads);
  } else {
    autodiff::Tape tape;
    nn::TapeCtx cx{tape};
    autodiff::Value x0 =
        front_stage(cx, cfg, params, autodiff::Tape::constant(images));
    autodiff::Value x_out = chain_stage(cx, cfg, params, x0);
    TapedLosses losses =
        taped_head(cx, cfg, params, x_out, onehot, mask, pixels);
    out = losses.breakdown;

    ledger.begin_phase(bench::Phase::kBackward);
    tape.backward({{losses.total, seed}}, grads);
  }
  ledger.begin_phase(bench::Phase::kIdle);
  return out;
}

std::vector<int> predict(const Tensor& images, const NetworkConfig& cfg,
                         const ModelParams& params) {
  cfg.validate();
  validate_params(cfg, params);
  check_images(images, cfg);
  nn::EvalCtx cx;
  Tensor x0 = front_stage(cx, cfg, params, images);
  Tensor x_out = chain_stage(cx, cfg, params, x0);
  Tensor norms = head_stage(cx, cfg, params, x_out).second;
  std::vector<int64_t> am = kernels::argmax_last(norms);
  return std::vector<int>(am.begin(), am.end());
}

}  // namespace mocaps::model
