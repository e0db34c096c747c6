#include "mocaps/tensor/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace mocaps::kernels {

namespace {

template <typename T, typename Op>
Tensor ew_binary(const Tensor& a, const Tensor& b, Op op) {
  Tensor out(a.shape(), a.dtype());
  const T* pa = a.data<T>();
  const T* pb = b.data<T>();
  T* po = out.mutable_data<T>();
  int64_t n = a.size();
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int64_t i = 0; i < n; ++i) po[i] = op(pa[i], pb[i]);
  return out;
}

template <typename T, typename Op>
Tensor ew_unary(const Tensor& a, Op op) {
  Tensor out(a.shape(), a.dtype());
  const T* pa = a.data<T>();
  T* po = out.mutable_data<T>();
  int64_t n = a.size();
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int64_t i = 0; i < n; ++i) po[i] = op(pa[i]);
  return out;
}

#define DISPATCH_BINARY(name, expr32, expr64)                          \
  check_same_shape(a, b, #name);                                       \
  if (a.dtype() == DType::kF32)                                        \
    return ew_binary<float>(a, b, [=](float x, float y) { return expr32; }); \
  return ew_binary<double>(a, b, [=](double x, double y) { return expr64; })

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  DISPATCH_BINARY(add, x + y, x + y);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  DISPATCH_BINARY(sub, x - y, x - y);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  DISPATCH_BINARY(mul, x * y, x * y);
}

Tensor lincomb(double alpha, const Tensor& a, double beta, const Tensor& b) {
  check_same_shape(a, b, "lincomb");
  // Identity coefficients pass the operand through untouched so that the
  // gamma = 0 momentum step degenerates bitwise to the classic residual
  // update (0*v + 1*f would otherwise flip the sign of a -0 in f).
  if (alpha == 0.0 && beta == 1.0) return b;
  if (alpha == 1.0 && beta == 0.0) return a;
  if (a.dtype() == DType::kF32) {
    float al = static_cast<float>(alpha), be = static_cast<float>(beta);
    return ew_binary<float>(a, b,
                            [=](float x, float y) { return al * x + be * y; });
  }
  return ew_binary<double>(
      a, b, [=](double x, double y) { return alpha * x + beta * y; });
}

Tensor affine(const Tensor& a, double alpha, double beta) {
  if (a.dtype() == DType::kF32) {
    float al = static_cast<float>(alpha), be = static_cast<float>(beta);
    return ew_unary<float>(a, [=](float x) { return al * x + be; });
  }
  return ew_unary<double>(a, [=](double x) { return alpha * x + beta; });
}

Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }

Tensor relu(const Tensor& a) {
  // max(x, 0) rather than a plain branch: NaN compares false against 0, so
  // this ordering lets a poisoned input propagate instead of silently
  // clamping to zero, and the training-loop divergence guard can see it.
  if (a.dtype() == DType::kF32)
    return ew_unary<float>(a, [](float x) { return std::max(x, 0.0f); });
  return ew_unary<double>(a, [](double x) { return std::max(x, 0.0); });
}

Tensor relu_vjp(const Tensor& up, const Tensor& x) {
  // Subgradient 0 at x == 0.
  check_same_shape(up, x, "relu_vjp");
  if (up.dtype() == DType::kF32)
    return ew_binary<float>(up, x,
                            [](float u, float v) { return v > 0 ? u : 0.0f; });
  return ew_binary<double>(up, x,
                           [](double u, double v) { return v > 0 ? u : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  if (a.dtype() == DType::kF32)
    return ew_unary<float>(a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); });
  return ew_unary<double>(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor sigmoid_vjp(const Tensor& up, const Tensor& y) {
  check_same_shape(up, y, "sigmoid_vjp");
  if (up.dtype() == DType::kF32)
    return ew_binary<float>(up, y,
                            [](float u, float v) { return u * v * (1.0f - v); });
  return ew_binary<double>(up, y,
                           [](double u, double v) { return u * v * (1.0 - v); });
}

// ---- matmul / dense ----

namespace {

template <typename T>
Tensor matmul_impl(const Tensor& a, const Tensor& b, int64_t batch, int64_t m,
                   int64_t k, int64_t n, std::vector<int64_t> out_shape) {
  Tensor out(std::move(out_shape), a.dtype());
  const T* pa = a.data<T>();
  const T* pb = b.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < batch * m; ++bi) {
    int64_t bb = bi / m, i = bi % m;
    const T* arow = pa + (bb * m + i) * k;
    const T* bmat = pb + bb * k * n;
    T* orow = po + (bb * m + i) * n;
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * bmat[kk * n + j];
      orow[j] = acc;
    }
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     a.shape_str() + " x " + b.shape_str());
  if (a.rank() != b.rank())
    throw ShapeError("matmul: rank mismatch " + a.shape_str() + " x " +
                     b.shape_str());
  if (a.dtype() != b.dtype()) throw ShapeError("matmul: dtype mismatch");
  int r = a.rank();
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) {
    if (a.dim(i) != b.dim(i))
      throw ShapeError("matmul: batch dims differ, " + a.shape_str() + " x " +
                       b.shape_str());
    batch *= a.dim(i);
  }
  int64_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  if (b.dim(r - 2) != k)
    throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " x " +
                     b.shape_str());
  std::vector<int64_t> out_shape(a.shape());
  out_shape[static_cast<size_t>(r - 1)] = n;
  if (a.dtype() == DType::kF32)
    return matmul_impl<float>(a, b, batch, m, k, n, std::move(out_shape));
  return matmul_impl<double>(a, b, batch, m, k, n, std::move(out_shape));
}

namespace {

template <typename T>
Tensor transpose_last2_impl(const Tensor& a, int64_t batch, int64_t m,
                            int64_t n, std::vector<int64_t> out_shape) {
  Tensor out(std::move(out_shape), a.dtype());
  const T* pa = a.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bb = 0; bb < batch; ++bb) {
    const T* src = pa + bb * m * n;
    T* dst = po + bb * m * n;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return out;
}

}  // namespace

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2)
    throw ShapeError("transpose_last2: needs rank >= 2, got " + a.shape_str());
  int r = a.rank();
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) batch *= a.dim(i);
  std::vector<int64_t> out_shape(a.shape());
  std::swap(out_shape[static_cast<size_t>(r - 2)],
            out_shape[static_cast<size_t>(r - 1)]);
  if (a.dtype() == DType::kF32)
    return transpose_last2_impl<float>(a, batch, a.dim(r - 2), a.dim(r - 1),
                                       std::move(out_shape));
  return transpose_last2_impl<double>(a, batch, a.dim(r - 2), a.dim(r - 1),
                                      std::move(out_shape));
}

namespace {

template <typename T>
Tensor dense_impl(const Tensor& x, const Tensor& w, const Tensor& b) {
  int64_t n = x.dim(0), k = x.dim(1), m = w.dim(0);
  Tensor out({n, m}, x.dtype());
  const T* px = x.data<T>();
  const T* pw = w.data<T>();
  const T* pb = b.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      T acc = pb[j];
      const T* xrow = px + i * k;
      const T* wrow = pw + j * k;
      for (int64_t kk = 0; kk < k; ++kk) acc += xrow[kk] * wrow[kk];
      po[i * m + j] = acc;
    }
  }
  return out;
}

}  // namespace

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("dense: want x [N,K], w [M,K], b [M]; got " +
                     x.shape_str() + ", " + w.shape_str() + ", " + b.shape_str());
  if (x.dim(1) != w.dim(1) || w.dim(0) != b.dim(0))
    throw ShapeError("dense: incompatible " + x.shape_str() + ", " +
                     w.shape_str() + ", " + b.shape_str());
  if (x.dtype() != w.dtype() || x.dtype() != b.dtype())
    throw ShapeError("dense: dtype mismatch");
  if (x.dtype() == DType::kF32) return dense_impl<float>(x, w, b);
  return dense_impl<double>(x, w, b);
}

namespace {

template <typename T>
Tensor dense_vjp_x_impl(const Tensor& up, const Tensor& w) {
  int64_t n = up.dim(0), m = up.dim(1), k = w.dim(1);
  Tensor out({n, k}, up.dtype());
  const T* pu = up.data<T>();
  const T* pw = w.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      T acc = 0;
      for (int64_t j = 0; j < m; ++j) acc += pu[i * m + j] * pw[j * k + kk];
      po[i * k + kk] = acc;
    }
  }
  return out;
}

template <typename T>
Tensor dense_vjp_w_impl(const Tensor& up, const Tensor& x) {
  int64_t n = up.dim(0), m = up.dim(1), k = x.dim(1);
  Tensor out({m, k}, up.dtype());
  const T* pu = up.data<T>();
  const T* px = x.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < m; ++j) {
    for (int64_t kk = 0; kk < k; ++kk) {
      T acc = 0;
      for (int64_t i = 0; i < n; ++i) acc += pu[i * m + j] * px[i * k + kk];
      po[j * k + kk] = acc;
    }
  }
  return out;
}

template <typename T>
Tensor dense_vjp_b_impl(const Tensor& up) {
  int64_t n = up.dim(0), m = up.dim(1);
  Tensor out({m}, up.dtype());
  const T* pu = up.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < m; ++j) {
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += pu[i * m + j];
    po[j] = acc;
  }
  return out;
}

}  // namespace

Tensor dense_vjp_x(const Tensor& up, const Tensor& w) {
  if (up.rank() != 2 || w.rank() != 2 || up.dim(1) != w.dim(0))
    throw ShapeError("dense_vjp_x: incompatible " + up.shape_str() + ", " +
                     w.shape_str());
  if (up.dtype() == DType::kF32) return dense_vjp_x_impl<float>(up, w);
  return dense_vjp_x_impl<double>(up, w);
}

Tensor dense_vjp_w(const Tensor& up, const Tensor& x) {
  if (up.rank() != 2 || x.rank() != 2 || up.dim(0) != x.dim(0))
    throw ShapeError("dense_vjp_w: incompatible " + up.shape_str() + ", " +
                     x.shape_str());
  if (up.dtype() == DType::kF32) return dense_vjp_w_impl<float>(up, x);
  return dense_vjp_w_impl<double>(up, x);
}

Tensor dense_vjp_b(const Tensor& up) {
  if (up.rank() != 2) throw ShapeError("dense_vjp_b: want [N,M]");
  if (up.dtype() == DType::kF32) return dense_vjp_b_impl<float>(up);
  return dense_vjp_b_impl<double>(up);
}

// ---- convolution ----

int64_t conv_out_dim(int64_t in, int64_t kernel, int64_t stride) {
  if (stride < 1) throw ValueError("conv: stride must be >= 1");
  if (kernel < 1 || kernel > in)
    throw ShapeError("conv: kernel " + std::to_string(kernel) +
                     " does not fit input " + std::to_string(in));
  return (in - kernel) / stride + 1;
}

namespace {

template <typename T>
Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor& b,
                   int64_t stride) {
  int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  int64_t OH = conv_out_dim(H, KH, stride), OW = conv_out_dim(W, KW, stride);
  Tensor out({B, Co, OH, OW}, x.dtype());
  const T* px = x.data<T>();
  const T* pw = w.data<T>();
  const T* pb = b.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bc = 0; bc < B * Co; ++bc) {
    int64_t bb = bc / Co, co = bc % Co;
    for (int64_t oh = 0; oh < OH; ++oh) {
      for (int64_t ow = 0; ow < OW; ++ow) {
        T acc = pb[co];
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const T* xp = px + ((bb * Ci + ci) * H + oh * stride) * W + ow * stride;
          const T* wp = pw + ((co * Ci + ci) * KH) * KW;
          for (int64_t kh = 0; kh < KH; ++kh)
            for (int64_t kw = 0; kw < KW; ++kw)
              acc += xp[kh * W + kw] * wp[kh * KW + kw];
        }
        po[(bc * OH + oh) * OW + ow] = acc;
      }
    }
  }
  return out;
}

template <typename T>
Tensor conv2d_vjp_x_impl(const Tensor& up, const Tensor& w, int64_t stride,
                         int64_t H, int64_t W) {
  int64_t B = up.dim(0), Co = up.dim(1), OH = up.dim(2), OW = up.dim(3);
  int64_t Ci = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  Tensor out = Tensor::zeros({B, Ci, H, W}, up.dtype());
  const T* pu = up.data<T>();
  const T* pw = w.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bc = 0; bc < B * Ci; ++bc) {
    int64_t bb = bc / Ci, ci = bc % Ci;
    T* gx = po + bc * H * W;
    for (int64_t h = 0; h < H; ++h) {
      for (int64_t ww = 0; ww < W; ++ww) {
        T acc = 0;
        for (int64_t co = 0; co < Co; ++co) {
          const T* urow = pu + (bb * Co + co) * OH * OW;
          const T* wmat = pw + (co * Ci + ci) * KH * KW;
          for (int64_t oh = 0; oh < OH; ++oh) {
            int64_t kh = h - oh * stride;
            if (kh < 0 || kh >= KH) continue;
            for (int64_t ow = 0; ow < OW; ++ow) {
              int64_t kw = ww - ow * stride;
              if (kw < 0 || kw >= KW) continue;
              acc += urow[oh * OW + ow] * wmat[kh * KW + kw];
            }
          }
        }
        gx[h * W + ww] = acc;
      }
    }
  }
  return out;
}

template <typename T>
Tensor conv2d_vjp_w_impl(const Tensor& up, const Tensor& x, int64_t stride,
                         int64_t KH, int64_t KW) {
  int64_t B = up.dim(0), Co = up.dim(1), OH = up.dim(2), OW = up.dim(3);
  int64_t Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({Co, Ci, KH, KW}, up.dtype());
  const T* pu = up.data<T>();
  const T* px = x.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t cc = 0; cc < Co * Ci; ++cc) {
    int64_t co = cc / Ci, ci = cc % Ci;
    for (int64_t kh = 0; kh < KH; ++kh) {
      for (int64_t kw = 0; kw < KW; ++kw) {
        T acc = 0;
        for (int64_t bb = 0; bb < B; ++bb) {
          const T* urow = pu + (bb * Co + co) * OH * OW;
          const T* xmat = px + (bb * Ci + ci) * H * W;
          for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow)
              acc += urow[oh * OW + ow] *
                     xmat[(oh * stride + kh) * W + ow * stride + kw];
        }
        po[(cc * KH + kh) * KW + kw] = acc;
      }
    }
  }
  return out;
}

template <typename T>
Tensor conv2d_vjp_b_impl(const Tensor& up) {
  int64_t B = up.dim(0), Co = up.dim(1), OHW = up.dim(2) * up.dim(3);
  Tensor out({Co}, up.dtype());
  const T* pu = up.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < Co; ++co) {
    T acc = 0;
    for (int64_t bb = 0; bb < B; ++bb) {
      const T* urow = pu + (bb * Co + co) * OHW;
      for (int64_t i = 0; i < OHW; ++i) acc += urow[i];
    }
    po[co] = acc;
  }
  return out;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
    throw ShapeError("conv2d: want x [B,C,H,W], w [Co,Ci,KH,KW], b [Co]; got " +
                     x.shape_str() + ", " + w.shape_str() + ", " + b.shape_str());
  if (x.dim(1) != w.dim(1) || w.dim(0) != b.dim(0))
    throw ShapeError("conv2d: incompatible " + x.shape_str() + ", " +
                     w.shape_str() + ", " + b.shape_str());
  if (x.dtype() != w.dtype() || x.dtype() != b.dtype())
    throw ShapeError("conv2d: dtype mismatch");
  conv_out_dim(x.dim(2), w.dim(2), stride);
  conv_out_dim(x.dim(3), w.dim(3), stride);
  if (x.dtype() == DType::kF32) return conv2d_impl<float>(x, w, b, stride);
  return conv2d_impl<double>(x, w, b, stride);
}

Tensor conv2d_vjp_x(const Tensor& up, const Tensor& w, int stride, int64_t in_h,
                    int64_t in_w) {
  if (up.rank() != 4 || w.rank() != 4 || up.dim(1) != w.dim(0))
    throw ShapeError("conv2d_vjp_x: incompatible " + up.shape_str() + ", " +
                     w.shape_str());
  if (up.dtype() == DType::kF32)
    return conv2d_vjp_x_impl<float>(up, w, stride, in_h, in_w);
  return conv2d_vjp_x_impl<double>(up, w, stride, in_h, in_w);
}

Tensor conv2d_vjp_w(const Tensor& up, const Tensor& x, int stride, int64_t kh,
                    int64_t kw) {
  if (up.rank() != 4 || x.rank() != 4 || up.dim(0) != x.dim(0))
    throw ShapeError("conv2d_vjp_w: incompatible " + up.shape_str() + ", " +
                     x.shape_str());
  if (up.dtype() == DType::kF32)
    return conv2d_vjp_w_impl<float>(up, x, stride, kh, kw);
  return conv2d_vjp_w_impl<double>(up, x, stride, kh, kw);
}

Tensor conv2d_vjp_b(const Tensor& up) {
  if (up.rank() != 4) throw ShapeError("conv2d_vjp_b: want [B,Co,OH,OW]");
  if (up.dtype() == DType::kF32) return conv2d_vjp_b_impl<float>(up);
  return conv2d_vjp_b_impl<double>(up);
}

// ---- reductions ----

namespace {

struct AxisSplit {
  int64_t outer, mid, inner;
  std::vector<int64_t> out_shape;
};

AxisSplit split_axis(const Tensor& a, int axis, const char* op) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ValueError(std::string(op) + ": axis out of range for rank " +
                     std::to_string(r));
  AxisSplit s{1, a.dim(axis), 1, {}};
  for (int i = 0; i < r; ++i) {
    if (i < axis)
      s.outer *= a.dim(i);
    else if (i > axis)
      s.inner *= a.dim(i);
    if (i != axis) s.out_shape.push_back(a.dim(i));
  }
  return s;
}

template <typename T>
Tensor reduce_impl(Reduce op, const Tensor& a, const AxisSplit& s) {
  Tensor out(s.out_shape, a.dtype());
  const T* pa = a.data<T>();
  T* po = out.mutable_data<T>();
  int64_t outer = s.outer, mid = s.mid, inner = s.inner;
#pragma omp parallel for schedule(static)
  for (int64_t oi = 0; oi < outer * inner; ++oi) {
    int64_t o = oi / inner, i = oi % inner;
    const T* base = pa + o * mid * inner + i;
    T acc;
    switch (op) {
      case Reduce::kSum:
      case Reduce::kMean: {
        acc = 0;
        for (int64_t m = 0; m < mid; ++m) acc += base[m * inner];
        if (op == Reduce::kMean) acc /= static_cast<T>(mid);
        break;
      }
      case Reduce::kMax: {
        acc = base[0];
        for (int64_t m = 1; m < mid; ++m)
          acc = std::max(acc, base[m * inner]);
        break;
      }
      case Reduce::kL2Norm: {
        acc = 0;
        for (int64_t m = 0; m < mid; ++m) {
          T v = base[m * inner];
          acc += v * v;
        }
        acc = std::sqrt(acc);
        break;
      }
    }
    po[oi] = acc;
  }
  return out;
}

}  // namespace

Tensor reduce(Reduce op, const Tensor& a, int axis) {
  AxisSplit s = split_axis(a, axis, "reduce");
  if (s.mid == 0) throw ShapeError("reduce over empty axis");
  if (a.dtype() == DType::kF32) return reduce_impl<float>(op, a, s);
  return reduce_impl<double>(op, a, s);
}

Tensor broadcast_axis(const Tensor& a, int axis, int64_t extent) {
  int r = a.rank();
  if (axis < 0) axis += r + 1;
  if (axis < 0 || axis > r) throw ValueError("broadcast_axis: axis out of range");
  if (extent < 1) throw ValueError("broadcast_axis: extent must be >= 1");
  std::vector<int64_t> out_shape;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < r; ++i) {
    if (i < axis)
      outer *= a.dim(i);
    else
      inner *= a.dim(i);
  }
  out_shape.assign(a.shape().begin(), a.shape().end());
  out_shape.insert(out_shape.begin() + axis, extent);
  Tensor out(out_shape, a.dtype());
  size_t row = static_cast<size_t>(inner) * dtype_size(a.dtype());
  const std::byte* src = a.storage()->data();
  std::byte* dst = out.storage()->data();
#pragma omp parallel for schedule(static)
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t e = 0; e < extent; ++e)
      std::memcpy(dst + (o * extent + e) * row, src + o * row, row);
  return out;
}

// ---- capsule ops ----

namespace {

template <typename T>
Tensor squash_impl(const Tensor& s, int64_t rows, int64_t d) {
  Tensor out(s.shape(), s.dtype());
  const T* ps = s.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t row = 0; row < rows; ++row) {
    const T* v = ps + row * d;
    T* o = po + row * d;
    T sq = 0;
    for (int64_t i = 0; i < d; ++i) sq += v[i] * v[i];
    T r = std::sqrt(sq);
    T factor = r > 0 ? r / (1 + sq) : T(0);
    for (int64_t i = 0; i < d; ++i) o[i] = v[i] * factor;
  }
  return out;
}

template <typename T>
Tensor squash_vjp_impl(const Tensor& up, const Tensor& s, int64_t rows,
                       int64_t d) {
  Tensor out(s.shape(), s.dtype());
  const T* pu = up.data<T>();
  const T* ps = s.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t row = 0; row < rows; ++row) {
    const T* u = pu + row * d;
    const T* v = ps + row * d;
    T* o = po + row * d;
    T sq = 0, dot = 0;
    for (int64_t i = 0; i < d; ++i) {
      sq += v[i] * v[i];
      dot += u[i] * v[i];
    }
    T r = std::sqrt(sq);
    if (r > 0) {
      T denom = (1 + sq) * (1 + sq);
      T g = r / (1 + sq);                    // squash factor
      T gp_over_r = (1 - sq) / (r * denom);  // g'(r)/r
      for (int64_t i = 0; i < d; ++i) o[i] = g * u[i] + gp_over_r * dot * v[i];
    } else {
      // Gradient defined as 0 at the origin.
      for (int64_t i = 0; i < d; ++i) o[i] = 0;
    }
  }
  return out;
}

template <typename T>
Tensor softmax_impl(const Tensor& a, int64_t rows, int64_t d) {
  Tensor out(a.shape(), a.dtype());
  const T* pa = a.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t row = 0; row < rows; ++row) {
    const T* x = pa + row * d;
    T* o = po + row * d;
    T mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T sum = 0;
    for (int64_t i = 0; i < d; ++i) {
      o[i] = std::exp(x[i] - mx);
      sum += o[i];
    }
    for (int64_t i = 0; i < d; ++i) o[i] /= sum;
  }
  return out;
}

template <typename T>
Tensor softmax_vjp_impl(const Tensor& up, const Tensor& y, int64_t rows,
                        int64_t d) {
  Tensor out(y.shape(), y.dtype());
  const T* pu = up.data<T>();
  const T* py = y.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t row = 0; row < rows; ++row) {
    const T* u = pu + row * d;
    const T* yy = py + row * d;
    T* o = po + row * d;
    T dot = 0;
    for (int64_t i = 0; i < d; ++i) dot += u[i] * yy[i];
    for (int64_t i = 0; i < d; ++i) o[i] = yy[i] * (u[i] - dot);
  }
  return out;
}

template <typename T>
Tensor caps_norm_impl(const Tensor& x, int64_t rows, int64_t d,
                      std::vector<int64_t> out_shape) {
  Tensor out(std::move(out_shape), x.dtype());
  const T* px = x.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t row = 0; row < rows; ++row) {
    const T* v = px + row * d;
    T sq = 0;
    for (int64_t i = 0; i < d; ++i) sq += v[i] * v[i];
    po[row] = std::sqrt(sq);
  }
  return out;
}

template <typename T>
Tensor caps_norm_vjp_impl(const Tensor& up, const Tensor& x, int64_t rows,
                          int64_t d) {
  Tensor out(x.shape(), x.dtype());
  const T* pu = up.data<T>();
  const T* px = x.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t row = 0; row < rows; ++row) {
    const T* v = px + row * d;
    T* o = po + row * d;
    T sq = 0;
    for (int64_t i = 0; i < d; ++i) sq += v[i] * v[i];
    T r = std::sqrt(sq);
    T f = r > 0 ? pu[row] / r : T(0);
    for (int64_t i = 0; i < d; ++i) o[i] = f * v[i];
  }
  return out;
}

int64_t last_dim_split(const Tensor& a, const char* op) {
  if (a.rank() < 1)
    throw ShapeError(std::string(op) + ": needs rank >= 1, got scalar");
  int64_t d = a.dim(-1);
  if (d < 1) throw ShapeError(std::string(op) + ": empty last axis");
  return d;
}

}  // namespace

Tensor squash(const Tensor& s) {
  int64_t d = last_dim_split(s, "squash");
  int64_t rows = s.size() / d;
  if (s.dtype() == DType::kF32) return squash_impl<float>(s, rows, d);
  return squash_impl<double>(s, rows, d);
}

Tensor squash_vjp(const Tensor& up, const Tensor& s) {
  check_same_shape(up, s, "squash_vjp");
  int64_t d = last_dim_split(s, "squash_vjp");
  int64_t rows = s.size() / d;
  if (s.dtype() == DType::kF32) return squash_vjp_impl<float>(up, s, rows, d);
  return squash_vjp_impl<double>(up, s, rows, d);
}

Tensor softmax_last(const Tensor& a) {
  int64_t d = last_dim_split(a, "softmax_last");
  int64_t rows = a.size() / d;
  if (a.dtype() == DType::kF32) return softmax_impl<float>(a, rows, d);
  return softmax_impl<double>(a, rows, d);
}

Tensor softmax_last_vjp(const Tensor& up, const Tensor& y) {
  check_same_shape(up, y, "softmax_last_vjp");
  int64_t d = last_dim_split(y, "softmax_last_vjp");
  int64_t rows = y.size() / d;
  if (y.dtype() == DType::kF32) return softmax_vjp_impl<float>(up, y, rows, d);
  return softmax_vjp_impl<double>(up, y, rows, d);
}

Tensor caps_norm(const Tensor& x) {
  int64_t d = last_dim_split(x, "caps_norm");
  int64_t rows = x.size() / d;
  std::vector<int64_t> out_shape(x.shape().begin(), x.shape().end() - 1);
  if (x.dtype() == DType::kF32)
    return caps_norm_impl<float>(x, rows, d, std::move(out_shape));
  return caps_norm_impl<double>(x, rows, d, std::move(out_shape));
}

Tensor caps_norm_vjp(const Tensor& up, const Tensor& x) {
  int64_t d = last_dim_split(x, "caps_norm_vjp");
  int64_t rows = x.size() / d;
  if (up.size() != rows)
    throw ShapeError("caps_norm_vjp: upstream " + up.shape_str() +
                     " does not match " + x.shape_str());
  if (x.dtype() == DType::kF32) return caps_norm_vjp_impl<float>(up, x, rows, d);
  return caps_norm_vjp_impl<double>(up, x, rows, d);
}

namespace {

void check_votes_shapes(const Tensor& u, const Tensor& w) {
  if (u.rank() != 3 || w.rank() != 4)
    throw ShapeError("votes: want u [B,I,D], w [I,J,O,D]; got " + u.shape_str() +
                     ", " + w.shape_str());
  if (u.dim(1) != w.dim(0) || u.dim(2) != w.dim(3))
    throw ShapeError("votes: incompatible " + u.shape_str() + ", " +
                     w.shape_str());
  if (u.dtype() != w.dtype()) throw ShapeError("votes: dtype mismatch");
}

template <typename T>
Tensor votes_impl(const Tensor& u, const Tensor& w) {
  int64_t B = u.dim(0), I = u.dim(1), D = u.dim(2);
  int64_t J = w.dim(1), O = w.dim(2);
  Tensor out({B, I, J, O}, u.dtype());
  const T* pu = u.data<T>();
  const T* pw = w.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < B * I; ++bi) {
    int64_t bb = bi / I, i = bi % I;
    const T* uvec = pu + (bb * I + i) * D;
    for (int64_t j = 0; j < J; ++j) {
      const T* wmat = pw + ((i * J + j) * O) * D;
      T* ovec = po + ((bi * J) + j) * O;
      for (int64_t o = 0; o < O; ++o) {
        T acc = 0;
        const T* wrow = wmat + o * D;
        for (int64_t dd = 0; dd < D; ++dd) acc += wrow[dd] * uvec[dd];
        ovec[o] = acc;
      }
    }
  }
  return out;
}

template <typename T>
Tensor votes_vjp_u_impl(const Tensor& up, const Tensor& w) {
  int64_t B = up.dim(0), I = up.dim(1), J = up.dim(2), O = up.dim(3);
  int64_t D = w.dim(3);
  Tensor out({B, I, D}, up.dtype());
  const T* pu = up.data<T>();
  const T* pw = w.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < B * I; ++bi) {
    int64_t i = bi % I;
    T* g = po + bi * D;
    for (int64_t dd = 0; dd < D; ++dd) g[dd] = 0;
    for (int64_t j = 0; j < J; ++j) {
      const T* uvec = pu + (bi * J + j) * O;
      const T* wmat = pw + ((i * J + j) * O) * D;
      for (int64_t o = 0; o < O; ++o) {
        T uv = uvec[o];
        const T* wrow = wmat + o * D;
        for (int64_t dd = 0; dd < D; ++dd) g[dd] += uv * wrow[dd];
      }
    }
  }
  return out;
}

template <typename T>
Tensor votes_vjp_w_impl(const Tensor& up, const Tensor& u) {
  int64_t B = up.dim(0), I = up.dim(1), J = up.dim(2), O = up.dim(3);
  int64_t D = u.dim(2);
  Tensor out({I, J, O, D}, up.dtype());
  const T* pu = up.data<T>();
  const T* px = u.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t ij = 0; ij < I * J; ++ij) {
    int64_t i = ij / J;
    T* g = po + ij * O * D;
    for (int64_t k = 0; k < O * D; ++k) g[k] = 0;
    for (int64_t bb = 0; bb < B; ++bb) {
      const T* uvec = pu + ((bb * I + i) * J + (ij % J)) * O;
      const T* xvec = px + (bb * I + i) * D;
      for (int64_t o = 0; o < O; ++o) {
        T uv = uvec[o];
        T* grow = g + o * D;
        for (int64_t dd = 0; dd < D; ++dd) grow[dd] += uv * xvec[dd];
      }
    }
  }
  return out;
}

template <typename T>
Tensor weighted_sum_impl(const Tensor& c, const Tensor& uhat) {
  int64_t B = uhat.dim(0), I = uhat.dim(1), J = uhat.dim(2), O = uhat.dim(3);
  Tensor out({B, J, O}, uhat.dtype());
  const T* pc = c.data<T>();
  const T* pu = uhat.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bj = 0; bj < B * J; ++bj) {
    int64_t bb = bj / J, j = bj % J;
    T* s = po + bj * O;
    for (int64_t o = 0; o < O; ++o) s[o] = 0;
    for (int64_t i = 0; i < I; ++i) {
      T cc = pc[(bb * I + i) * J + j];
      const T* uvec = pu + ((bb * I + i) * J + j) * O;
      for (int64_t o = 0; o < O; ++o) s[o] += cc * uvec[o];
    }
  }
  return out;
}

template <typename T>
Tensor agreement_impl(const Tensor& uhat, const Tensor& v) {
  int64_t B = uhat.dim(0), I = uhat.dim(1), J = uhat.dim(2), O = uhat.dim(3);
  Tensor out({B, I, J}, uhat.dtype());
  const T* pu = uhat.data<T>();
  const T* pv = v.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < B * I; ++bi) {
    int64_t bb = bi / I;
    for (int64_t j = 0; j < J; ++j) {
      const T* uvec = pu + (bi * J + j) * O;
      const T* vvec = pv + (bb * J + j) * O;
      T acc = 0;
      for (int64_t o = 0; o < O; ++o) acc += uvec[o] * vvec[o];
      po[bi * J + j] = acc;
    }
  }
  return out;
}

template <typename T>
Tensor outer_impl(const Tensor& bij, const Tensor& bjo) {
  int64_t B = bij.dim(0), I = bij.dim(1), J = bij.dim(2), O = bjo.dim(2);
  Tensor out({B, I, J, O}, bij.dtype());
  const T* pc = bij.data<T>();
  const T* pv = bjo.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < B * I; ++bi) {
    int64_t bb = bi / I;
    for (int64_t j = 0; j < J; ++j) {
      T cc = pc[bi * J + j];
      const T* vvec = pv + (bb * J + j) * O;
      T* ovec = po + (bi * J + j) * O;
      for (int64_t o = 0; o < O; ++o) ovec[o] = cc * vvec[o];
    }
  }
  return out;
}

}  // namespace

Tensor votes(const Tensor& u, const Tensor& w) {
  check_votes_shapes(u, w);
  if (u.dtype() == DType::kF32) return votes_impl<float>(u, w);
  return votes_impl<double>(u, w);
}

Tensor votes_vjp_u(const Tensor& up, const Tensor& w) {
  if (up.rank() != 4 || w.rank() != 4 || up.dim(1) != w.dim(0) ||
      up.dim(2) != w.dim(1) || up.dim(3) != w.dim(2))
    throw ShapeError("votes_vjp_u: incompatible " + up.shape_str() + ", " +
                     w.shape_str());
  if (up.dtype() == DType::kF32) return votes_vjp_u_impl<float>(up, w);
  return votes_vjp_u_impl<double>(up, w);
}

Tensor votes_vjp_w(const Tensor& up, const Tensor& u) {
  if (up.rank() != 4 || u.rank() != 3 || up.dim(0) != u.dim(0) ||
      up.dim(1) != u.dim(1))
    throw ShapeError("votes_vjp_w: incompatible " + up.shape_str() + ", " +
                     u.shape_str());
  if (up.dtype() == DType::kF32) return votes_vjp_w_impl<float>(up, u);
  return votes_vjp_w_impl<double>(up, u);
}

Tensor weighted_sum(const Tensor& c, const Tensor& uhat) {
  if (c.rank() != 3 || uhat.rank() != 4 || c.dim(0) != uhat.dim(0) ||
      c.dim(1) != uhat.dim(1) || c.dim(2) != uhat.dim(2))
    throw ShapeError("weighted_sum: incompatible " + c.shape_str() + ", " +
                     uhat.shape_str());
  if (c.dtype() != uhat.dtype()) throw ShapeError("weighted_sum: dtype mismatch");
  if (c.dtype() == DType::kF32) return weighted_sum_impl<float>(c, uhat);
  return weighted_sum_impl<double>(c, uhat);
}

Tensor agreement(const Tensor& uhat, const Tensor& v) {
  if (uhat.rank() != 4 || v.rank() != 3 || uhat.dim(0) != v.dim(0) ||
      uhat.dim(2) != v.dim(1) || uhat.dim(3) != v.dim(2))
    throw ShapeError("agreement: incompatible " + uhat.shape_str() + ", " +
                     v.shape_str());
  if (uhat.dtype() != v.dtype()) throw ShapeError("agreement: dtype mismatch");
  if (uhat.dtype() == DType::kF32) return agreement_impl<float>(uhat, v);
  return agreement_impl<double>(uhat, v);
}

Tensor outer_bij_bjo(const Tensor& bij, const Tensor& bjo) {
  if (bij.rank() != 3 || bjo.rank() != 3 || bij.dim(0) != bjo.dim(0) ||
      bij.dim(2) != bjo.dim(1))
    throw ShapeError("outer_bij_bjo: incompatible " + bij.shape_str() + ", " +
                     bjo.shape_str());
  if (bij.dtype() != bjo.dtype())
    throw ShapeError("outer_bij_bjo: dtype mismatch");
  if (bij.dtype() == DType::kF32) return outer_impl<float>(bij, bjo);
  return outer_impl<double>(bij, bjo);
}

// ---- layout ----

namespace {

template <typename T, bool kInverse>
Tensor primary_reshape_impl(const Tensor& in, int64_t G, int64_t D, int64_t H,
                            int64_t W, std::vector<int64_t> out_shape) {
  int64_t B = in.dim(0);
  Tensor out(std::move(out_shape), in.dtype());
  const T* pi = in.data<T>();
  T* po = out.mutable_data<T>();
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t g = 0; g < G; ++g)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t d = 0; d < D; ++d) {
            int64_t chw = ((b * G * D + g * D + d) * H + h) * W + w;
            int64_t cap = (b * G * H * W + (g * H + h) * W + w) * D + d;
            if constexpr (kInverse)
              po[chw] = pi[cap];
            else
              po[cap] = pi[chw];
          }
  }
  return out;
}

}  // namespace

Tensor primary_reshape(const Tensor& x, int64_t groups, int64_t caps_dim) {
  if (x.rank() != 4)
    throw ShapeError("primary_reshape: want [B,C,H,W], got " + x.shape_str());
  if (x.dim(1) != groups * caps_dim)
    throw ShapeError("primary_reshape: " + std::to_string(x.dim(1)) +
                     " channels != groups*caps_dim = " +
                     std::to_string(groups * caps_dim));
  int64_t H = x.dim(2), W = x.dim(3);
  std::vector<int64_t> out_shape{x.dim(0), groups * H * W, caps_dim};
  if (x.dtype() == DType::kF32)
    return primary_reshape_impl<float, false>(x, groups, caps_dim, H, W,
                                              std::move(out_shape));
  return primary_reshape_impl<double, false>(x, groups, caps_dim, H, W,
                                             std::move(out_shape));
}

Tensor primary_reshape_vjp(const Tensor& up, int64_t groups, int64_t caps_dim,
                           int64_t h, int64_t w) {
  if (up.rank() != 3 || up.dim(1) != groups * h * w || up.dim(2) != caps_dim)
    throw ShapeError("primary_reshape_vjp: bad upstream " + up.shape_str());
  std::vector<int64_t> out_shape{up.dim(0), groups * caps_dim, h, w};
  if (up.dtype() == DType::kF32)
    return primary_reshape_impl<float, true>(up, groups, caps_dim, h, w,
                                             std::move(out_shape));
  return primary_reshape_impl<double, true>(up, groups, caps_dim, h, w,
                                            std::move(out_shape));
}

std::vector<int64_t> argmax_last(const Tensor& a) {
  int64_t d = last_dim_split(a, "argmax_last");
  int64_t rows = a.size() / d;
  std::vector<int64_t> out(static_cast<size_t>(rows));
  for (int64_t row = 0; row < rows; ++row) {
    int64_t best = 0;
    double bv = a.flat(row * d);
    for (int64_t i = 1; i < d; ++i) {
      double v = a.flat(row * d + i);
      if (v > bv) {
        bv = v;
        best = i;
      }
    }
    out[static_cast<size_t>(row)] = best;
  }
  return out;
}

}  // namespace mocaps::kernels
