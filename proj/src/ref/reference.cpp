#include "mocaps/ref/reference.hpp"

#include <cmath>

namespace mocaps::ref {

namespace {

void want_f64(const Tensor& t, const char* who) {
  if (t.dtype() != DType::kF64)
    throw ShapeError(std::string(who) + ": reference kernels are f64-only");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  want_f64(a, "ref::matmul");
  want_f64(b, "ref::matmul");
  int r = a.rank();
  if (r < 2 || b.rank() != r) throw ShapeError("ref::matmul: bad ranks");
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) batch *= a.dim(i);
  int64_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  if (b.dim(r - 2) != k) throw ShapeError("ref::matmul: inner dims differ");
  std::vector<int64_t> out_shape(a.shape());
  out_shape[static_cast<size_t>(r - 1)] = n;
  Tensor out = Tensor::zeros(out_shape, DType::kF64);
  const double* pa = a.data<double>();
  const double* pb = b.data<double>();
  double* po = out.mutable_data<double>();
  for (int64_t bb = 0; bb < batch; ++bb)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        double av = pa[(bb * m + i) * k + kk];
        for (int64_t j = 0; j < n; ++j)
          po[(bb * m + i) * n + j] += av * pb[(bb * k + kk) * n + j];
      }
  return out;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  want_f64(x, "ref::dense");
  int64_t n = x.dim(0), k = x.dim(1), m = w.dim(0);
  Tensor out({n, m}, DType::kF64);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      double acc = b.at({j});
      for (int64_t kk = 0; kk < k; ++kk) acc += x.at({i, kk}) * w.at({j, kk});
      out.set_flat(i * m + j, acc);
    }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  want_f64(x, "ref::conv2d");
  int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  int64_t OH = (H - KH) / stride + 1, OW = (W - KW) / stride + 1;
  Tensor out({B, Co, OH, OW}, DType::kF64);
  for (int64_t bb = 0; bb < B; ++bb)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) {
          double acc = b.at({co});
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t kh = 0; kh < KH; ++kh)
              for (int64_t kw = 0; kw < KW; ++kw)
                acc += x.at({bb, ci, oh * stride + kh, ow * stride + kw}) *
                       w.at({co, ci, kh, kw});
          out.set_flat(((bb * Co + co) * OH + oh) * OW + ow, acc);
        }
  return out;
}

Tensor squash(const Tensor& s) {
  want_f64(s, "ref::squash");
  int64_t d = s.dim(-1), rows = s.size() / d;
  Tensor out(s.shape(), DType::kF64);
  for (int64_t row = 0; row < rows; ++row) {
    double sq = 0;
    for (int64_t i = 0; i < d; ++i) {
      double v = s.flat(row * d + i);
      sq += v * v;
    }
    double norm = std::sqrt(sq);
    for (int64_t i = 0; i < d; ++i) {
      double v = s.flat(row * d + i);
      out.set_flat(row * d + i, norm > 0 ? v * (norm / (1 + sq)) : 0.0);
    }
  }
  return out;
}

Tensor softmax_last(const Tensor& a) {
  want_f64(a, "ref::softmax_last");
  int64_t d = a.dim(-1), rows = a.size() / d;
  Tensor out(a.shape(), DType::kF64);
  for (int64_t row = 0; row < rows; ++row) {
    double mx = a.flat(row * d);
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, a.flat(row * d + i));
    double sum = 0;
    for (int64_t i = 0; i < d; ++i) {
      double e = std::exp(a.flat(row * d + i) - mx);
      out.set_flat(row * d + i, e);
      sum += e;
    }
    for (int64_t i = 0; i < d; ++i)
      out.set_flat(row * d + i, out.flat(row * d + i) / sum);
  }
  return out;
}

Tensor votes(const Tensor& u, const Tensor& w) {
  want_f64(u, "ref::votes");
  int64_t B = u.dim(0), I = u.dim(1), D = u.dim(2);
  int64_t J = w.dim(1), O = w.dim(2);
  Tensor out({B, I, J, O}, DType::kF64);
  for (int64_t bb = 0; bb < B; ++bb)
    for (int64_t i = 0; i < I; ++i)
      for (int64_t j = 0; j < J; ++j)
        for (int64_t o = 0; o < O; ++o) {
          double acc = 0;
          for (int64_t dd = 0; dd < D; ++dd)
            acc += w.at({i, j, o, dd}) * u.at({bb, i, dd});
          out.set_flat(((bb * I + i) * J + j) * O + o, acc);
        }
  return out;
}

Tensor rba_route(const Tensor& uhat, int iterations) {
  want_f64(uhat, "ref::rba_route");
  int64_t B = uhat.dim(0), I = uhat.dim(1), J = uhat.dim(2), O = uhat.dim(3);
  Tensor logits = Tensor::zeros({B, I, J}, DType::kF64);
  Tensor v;
  for (int iter = 0; iter < iterations; ++iter) {
    Tensor c = softmax_last(logits);
    // s[b,j,:] = sum_i c[b,i,j] * uhat[b,i,j,:]
    Tensor s = Tensor::zeros({B, J, O}, DType::kF64);
    for (int64_t bb = 0; bb < B; ++bb)
      for (int64_t j = 0; j < J; ++j)
        for (int64_t i = 0; i < I; ++i)
          for (int64_t o = 0; o < O; ++o)
            s.set_flat((bb * J + j) * O + o,
                       s.flat((bb * J + j) * O + o) +
                           c.at({bb, i, j}) * uhat.at({bb, i, j, o}));
    v = squash(s);
    // b[b,i,j] += uhat[b,i,j,:] . v[b,j,:]
    for (int64_t bb = 0; bb < B; ++bb)
      for (int64_t i = 0; i < I; ++i)
        for (int64_t j = 0; j < J; ++j) {
          double acc = 0;
          for (int64_t o = 0; o < O; ++o)
            acc += uhat.at({bb, i, j, o}) * v.at({bb, j, o});
          logits.set_flat((bb * I + i) * J + j,
                          logits.flat((bb * I + i) * J + j) + acc);
        }
  }
  return v;
}

Tensor capsule_layer(const Tensor& u, const Tensor& w, int iterations) {
  return rba_route(votes(u, w), iterations);
}

ChainTrace momentum_chain(const Tensor& x0,
                          const std::vector<Tensor>& layer_weights,
                          double gamma, int iterations) {
  want_f64(x0, "ref::momentum_chain");
  ChainTrace trace;
  Tensor x = x0.clone();
  Tensor v = Tensor::zeros(x0.shape(), DType::kF64);
  trace.x.push_back(x.clone());
  trace.v.push_back(v.clone());
  for (const Tensor& w : layer_weights) {
    Tensor f = capsule_layer(x, w, iterations);
    Tensor nv(v.shape(), DType::kF64);
    for (int64_t i = 0; i < v.size(); ++i)
      nv.set_flat(i, gamma * v.flat(i) + (1 - gamma) * f.flat(i));
    Tensor nx(x.shape(), DType::kF64);
    for (int64_t i = 0; i < x.size(); ++i) nx.set_flat(i, x.flat(i) + nv.flat(i));
    x = nx;
    v = nv;
    trace.x.push_back(x.clone());
    trace.v.push_back(v.clone());
  }
  return trace;
}

void adam_step(std::vector<double>& param, const std::vector<double>& grad,
               AdamBuffers& buf, double lr, double beta1, double beta2,
               double eps) {
  if (buf.m.empty()) {
    buf.m.assign(param.size(), 0.0);
    buf.v.assign(param.size(), 0.0);
  }
  buf.t += 1;
  double bc1 = 1 - std::pow(beta1, static_cast<double>(buf.t));
  double bc2 = 1 - std::pow(beta2, static_cast<double>(buf.t));
  for (size_t i = 0; i < param.size(); ++i) {
    buf.m[i] = beta1 * buf.m[i] + (1 - beta1) * grad[i];
    buf.v[i] = beta2 * buf.v[i] + (1 - beta2) * grad[i] * grad[i];
    double mhat = buf.m[i] / bc1;
    double vhat = buf.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace mocaps::ref
