#pragma once

#include <string>
#include <vector>

#include "mocaps/autodiff/tape.hpp"
#include "mocaps/tensor/kernels.hpp"

namespace mocaps::nn {

struct MarginLossParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double down_weight = 0.5;
};

// Per-iteration routing internals, for invariant checks: logits[i] is the
// state the i-th softmax saw, couplings[i] what it produced.
struct RoutingTrace {
  std::vector<Tensor> logits;
  std::vector<Tensor> couplings;
};

// The layers below are written once against a context. EvalCtx computes with
// the plain kernels and retains nothing; TapeCtx routes the same calls
// through a tape. Since both contexts execute the identical kernel sequence,
// a stored forward and a recomputed forward agree bitwise.
struct EvalCtx {
  using V = Tensor;
  static const Tensor& data(const V& v) { return v; }
  V constant(const Tensor& t) { return t; }
  V param(const std::string&, const Tensor& t) { return t; }
  V add(const V& a, const V& b) { return kernels::add(a, b); }
  V sub(const V& a, const V& b) { return kernels::sub(a, b); }
  V mul(const V& a, const V& b) { return kernels::mul(a, b); }
  V lincomb(double al, const V& a, double be, const V& b) {
    return kernels::lincomb(al, a, be, b);
  }
  V affine(const V& a, double al, double be) {
    return kernels::affine(a, al, be);
  }
  V relu(const V& a) { return kernels::relu(a); }
  V sigmoid(const V& a) { return kernels::sigmoid(a); }
  V dense(const V& x, const V& w, const V& b) {
    return kernels::dense(x, w, b);
  }
  V conv2d(const V& x, const V& w, const V& b, int stride) {
    return kernels::conv2d(x, w, b, stride);
  }
  V reshape(const V& a, std::vector<int64_t> shape) {
    return a.reshape(std::move(shape));
  }
  V primary_reshape(const V& a, int64_t groups, int64_t dim) {
    return kernels::primary_reshape(a, groups, dim);
  }
  V squash(const V& s) { return kernels::squash(s); }
  V softmax_last(const V& a) { return kernels::softmax_last(a); }
  V caps_norm(const V& x) { return kernels::caps_norm(x); }
  V votes(const V& u, const V& w) { return kernels::votes(u, w); }
  V weighted_sum(const V& c, const V& u) { return kernels::weighted_sum(c, u); }
  V agreement(const V& u, const V& v) { return kernels::agreement(u, v); }
  V reduce_sum(const V& a, int axis) {
    return kernels::reduce(kernels::Reduce::kSum, a, axis);
  }
  V reduce_mean(const V& a, int axis) {
    return kernels::reduce(kernels::Reduce::kMean, a, axis);
  }
};

struct TapeCtx {
  autodiff::Tape& tape;
  using V = autodiff::Value;
  static const Tensor& data(const V& v) { return v.data; }
  V constant(const Tensor& t) { return autodiff::Tape::constant(t); }
  V param(const std::string& name, const Tensor& t) {
    return tape.param(name, t);
  }
  V add(const V& a, const V& b) { return tape.add(a, b); }
  V sub(const V& a, const V& b) { return tape.sub(a, b); }
  V mul(const V& a, const V& b) { return tape.mul(a, b); }
  V lincomb(double al, const V& a, double be, const V& b) {
    return tape.lincomb(al, a, be, b);
  }
  V affine(const V& a, double al, double be) { return tape.affine(a, al, be); }
  V relu(const V& a) { return tape.relu(a); }
  V sigmoid(const V& a) { return tape.sigmoid(a); }
  V dense(const V& x, const V& w, const V& b) { return tape.dense(x, w, b); }
  V conv2d(const V& x, const V& w, const V& b, int stride) {
    return tape.conv2d(x, w, b, stride);
  }
  V reshape(const V& a, std::vector<int64_t> shape) {
    return tape.reshape(a, std::move(shape));
  }
  V primary_reshape(const V& a, int64_t groups, int64_t dim) {
    return tape.primary_reshape(a, groups, dim);
  }
  V squash(const V& s) { return tape.squash(s); }
  V softmax_last(const V& a) { return tape.softmax_last(a); }
  V caps_norm(const V& x) { return tape.caps_norm(x); }
  V votes(const V& u, const V& w) { return tape.votes(u, w); }
  V weighted_sum(const V& c, const V& u) { return tape.weighted_sum(c, u); }
  V agreement(const V& u, const V& v) { return tape.agreement(u, v); }
  V reduce_sum(const V& a, int axis) {
    return tape.reduce(kernels::Reduce::kSum, a, axis);
  }
  V reduce_mean(const V& a, int axis) {
    return tape.reduce(kernels::Reduce::kMean, a, axis);
  }
};

// relu(conv(images)); images [B,C,H,W] -> [B,F,H',W'].
template <class Ctx, class V = typename Ctx::V>
V conv_stem(Ctx& cx, const V& images, const V& w, const V& b, int stride) {
  return cx.relu(cx.conv2d(images, w, b, stride));
}

// conv -> group into capsule vectors -> squash; [B,F,H,W] -> [B,N,D].
template <class Ctx, class V = typename Ctx::V>
V primary_capsules(Ctx& cx, const V& features, const V& w, const V& b,
                   int stride, int64_t groups, int64_t caps_dim) {
  V conv = cx.conv2d(features, w, b, stride);
  return cx.squash(cx.primary_reshape(conv, groups, caps_dim));
}

// Routing by agreement over precomputed votes [B,I,J,O]. Logits start at
// zero (first couplings are uniform); every iteration recomputes couplings,
// aggregates, squashes, and updates the logits with the vote/output dot
// products. Unrolled, so on a tape the whole loop is differentiable.
template <class Ctx, class V = typename Ctx::V>
V rba_route(Ctx& cx, const V& uhat, int iterations,
            RoutingTrace* trace = nullptr) {
  if (iterations < 1) throw ValueError("rba_route: iterations must be >= 1");
  const Tensor& ud = Ctx::data(uhat);
  if (ud.rank() != 4)
    throw ShapeError("rba_route: votes must be [B,I,J,O], got " + ud.shape_str());
  V logits =
      cx.constant(Tensor::zeros({ud.dim(0), ud.dim(1), ud.dim(2)}, ud.dtype()));
  V out{};
  for (int it = 0; it < iterations; ++it) {
    V couplings = cx.softmax_last(logits);
    if (trace) {
      trace->logits.push_back(Ctx::data(logits));
      trace->couplings.push_back(Ctx::data(couplings));
    }
    V s = cx.weighted_sum(couplings, uhat);
    out = cx.squash(s);
    logits = cx.add(logits, cx.agreement(uhat, out));
  }
  return out;
}

// Full capsule layer: transform inputs into votes, then route.
template <class Ctx, class V = typename Ctx::V>
V capsule_layer(Ctx& cx, const V& u, const V& w, int iterations,
                RoutingTrace* trace = nullptr) {
  return rba_route(cx, cx.votes(u, w), iterations, trace);
}

// Decoder over the masked class capsules: two relu layers, sigmoid output.
template <class Ctx, class V = typename Ctx::V>
V reconstruction(Ctx& cx, const V& class_caps, const V& mask, const V& w1,
                 const V& b1, const V& w2, const V& b2, const V& w3,
                 const V& b3) {
  const Tensor& d = Ctx::data(class_caps);
  V masked = cx.mul(class_caps, mask);
  V flat = cx.reshape(masked, {d.dim(0), d.dim(1) * d.dim(2)});
  V h1 = cx.relu(cx.dense(flat, w1, b1));
  V h2 = cx.relu(cx.dense(h1, w2, b2));
  return cx.sigmoid(cx.dense(h2, w3, b3));
}

// T*max(0, m+ - |v|)^2 + down_weight*(1-T)*max(0, |v| - m-)^2, summed over
// classes, averaged over the batch. `norms` [B,K], `onehot` [B,K].
template <class Ctx, class V = typename Ctx::V>
V margin_loss(Ctx& cx, const V& norms, const V& onehot,
              const MarginLossParams& p) {
  V pos_h = cx.relu(cx.affine(norms, -1.0, p.m_plus));
  V pos = cx.mul(cx.mul(pos_h, pos_h), onehot);
  V neg_h = cx.relu(cx.affine(norms, 1.0, -p.m_minus));
  V neg = cx.mul(cx.mul(neg_h, neg_h), cx.affine(onehot, -1.0, 1.0));
  V per_class = cx.lincomb(1.0, pos, p.down_weight, neg);
  return cx.reduce_mean(cx.reduce_sum(per_class, 1), 0);
}

// Summed squared error per sample, averaged over the batch; [B,P] each.
template <class Ctx, class V = typename Ctx::V>
V reconstruction_loss(Ctx& cx, const V& recon, const V& pixels) {
  V diff = cx.sub(recon, pixels);
  V sq = cx.mul(diff, diff);
  return cx.reduce_mean(cx.reduce_sum(sq, 1), 0);
}

// total = margin + lambda * recon, in exactly this evaluation order.
template <class Ctx, class V = typename Ctx::V>
V total_loss(Ctx& cx, const V& margin, const V& recon, double lambda) {
  return cx.lincomb(1.0, margin, lambda, recon);
}

// ---- kernel-path conveniences (EvalCtx underneath) ----
Tensor squash(const Tensor& s);
Tensor votes(const Tensor& u, const Tensor& w);
Tensor rba_route(const Tensor& uhat, int iterations,
                 RoutingTrace* trace = nullptr);
Tensor capsule_layer(const Tensor& u, const Tensor& w, int iterations,
                     RoutingTrace* trace = nullptr);
Tensor conv_stem(const Tensor& images, const Tensor& w, const Tensor& b,
                 int stride);
Tensor primary_capsules(const Tensor& features, const Tensor& w,
                        const Tensor& b, int stride, int64_t groups,
                        int64_t caps_dim);
Tensor margin_loss(const Tensor& norms, const Tensor& onehot,
                   const MarginLossParams& p);

// Label helpers.
Tensor one_hot(const std::vector<int>& labels, int64_t classes, DType dtype);
// [B,K,D] mask that keeps one capsule per sample.
Tensor capsule_mask(const std::vector<int>& labels, int64_t classes,
                    int64_t caps_dim, DType dtype);

}  // namespace mocaps::nn
