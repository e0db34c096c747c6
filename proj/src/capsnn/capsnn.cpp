#include "mocaps/capsnn/capsnn.hpp"

namespace mocaps::nn {

Tensor squash(const Tensor& s) { return kernels::squash(s); }

Tensor votes(const Tensor& u, const Tensor& w) { return kernels::votes(u, w); }

Tensor rba_route(const Tensor& uhat, int iterations, RoutingTrace* trace) {
  EvalCtx cx;
  return rba_route(cx, uhat, iterations, trace);
}

Tensor capsule_layer(const Tensor& u, const Tensor& w, int iterations,
                     RoutingTrace* trace) {
  EvalCtx cx;
  return capsule_layer(cx, u, w, iterations, trace);
}

Tensor conv_stem(const Tensor& images, const Tensor& w, const Tensor& b,
                 int stride) {
  EvalCtx cx;
  return conv_stem(cx, images, w, b, stride);
}

Tensor primary_capsules(const Tensor& features, const Tensor& w,
                        const Tensor& b, int stride, int64_t groups,
                        int64_t caps_dim) {
  EvalCtx cx;
  return primary_capsules(cx, features, w, b, stride, groups, caps_dim);
}

Tensor margin_loss(const Tensor& norms, const Tensor& onehot,
                   const MarginLossParams& p) {
  EvalCtx cx;
  return margin_loss(cx, norms, onehot, p);
}

Tensor one_hot(const std::vector<int>& labels, int64_t classes, DType dtype) {
  int64_t b = static_cast<int64_t>(labels.size());
  Tensor t = Tensor::zeros({b, classes}, dtype);
  for (int64_t i = 0; i < b; ++i) {
    int lab = labels[static_cast<size_t>(i)];
    if (lab < 0 || lab >= classes)
      throw ValueError("one_hot: label " + std::to_string(lab) +
                       " out of range for " + std::to_string(classes) +
                       " classes");
    t.set_flat(i * classes + lab, 1.0);
  }
  return t;
}

Tensor capsule_mask(const std::vector<int>& labels, int64_t classes,
                    int64_t caps_dim, DType dtype) {
  int64_t b = static_cast<int64_t>(labels.size());
  Tensor t = Tensor::zeros({b, classes, caps_dim}, dtype);
  for (int64_t i = 0; i < b; ++i) {
    int lab = labels[static_cast<size_t>(i)];
    if (lab < 0 || lab >= classes)
      throw ValueError("capsule_mask: label out of range");
    for (int64_t d = 0; d < caps_dim; ++d)
      t.set_flat((i * classes + lab) * caps_dim + d, 1.0);
  }
  return t;
}

}  // namespace mocaps::nn
