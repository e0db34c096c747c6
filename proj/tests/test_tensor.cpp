#include "doctest.h"

#include <cmath>
#include <vector>

#include "mocaps/ref/reference.hpp"
#include "mocaps/tensor/kernels.hpp"
#include "mocaps/tensor/rng.hpp"
#include "mocaps/tensor/tensor.hpp"

using namespace mocaps;
namespace k = mocaps::kernels;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng,
                     DType dtype = DType::kF64) {
  return normal_init(std::move(shape), 0.0, 1.0, rng, dtype);
}

}  // namespace

TEST_CASE("tensor construction and element access") {
  Tensor z = Tensor::zeros({2, 3}, DType::kF64);
  CHECK(z.rank() == 2);
  CHECK(z.dim(0) == 2);
  CHECK(z.dim(1) == 3);
  CHECK(z.size() == 6);
  CHECK(z.bytes() == 48);
  CHECK(z.dtype() == DType::kF64);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(z.flat(i) == 0.0);

  Tensor f = Tensor::full({4}, 2.5, DType::kF32);
  for (int64_t i = 0; i < 4; ++i) CHECK(f.flat(i) == doctest::Approx(2.5));

  Tensor s = Tensor::scalar(7.0);
  CHECK(s.rank() == 0);
  CHECK(s.size() == 1);
  CHECK(s.item() == 7.0);

  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4}, DType::kF64);
  CHECK(m.at({0, 0}) == 1.0);
  CHECK(m.at({0, 1}) == 2.0);
  CHECK(m.at({1, 0}) == 3.0);
  CHECK(m.at({1, 1}) == 4.0);
  m.set_flat(3, 9.0);
  CHECK(m.at({1, 1}) == 9.0);

  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}, DType::kF64), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, -1}, DType::kF64), ShapeError);
  CHECK_THROWS_AS(z.item(), ShapeError);
  CHECK(dtype_size(DType::kF32) == 4);
  CHECK(dtype_size(DType::kF64) == 8);
  CHECK(dtype_from_name("f32") == DType::kF32);
  CHECK(dtype_from_name("f64") == DType::kF64);
  CHECK_THROWS_AS(dtype_from_name("f16"), ValueError);
}

TEST_CASE("reshape shares storage, astype and clone copy") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, DType::kF64);
  Tensor r = a.reshape({3, 2});
  CHECK(r.same_storage(a));
  CHECK(r.at({2, 1}) == 6.0);
  CHECK_THROWS_AS(a.reshape({4, 2}), ShapeError);

  Tensor c = a.clone();
  CHECK(!c.same_storage(a));
  CHECK(bitwise_equal(a, c));
  c.set_flat(0, -1.0);
  CHECK(a.flat(0) == 1.0);

  Tensor f = a.astype(DType::kF32);
  CHECK(f.dtype() == DType::kF32);
  CHECK(!f.same_storage(a));
  CHECK(f.flat(4) == 5.0);
  // Same-dtype astype still clones.
  Tensor d = a.astype(DType::kF64);
  CHECK(!d.same_storage(a));
  CHECK(bitwise_equal(a, d));
  // Every f32 value is exact in f64, so the round-trip is bitwise.
  CHECK(bitwise_equal(f, a.astype(DType::kF32).astype(DType::kF64).astype(DType::kF32)));
}

TEST_CASE("comparison helpers") {
  Tensor a = Tensor::from({3}, {1, 2, 3}, DType::kF64);
  Tensor b = Tensor::from({3}, {1, 2, 3.5}, DType::kF64);
  CHECK(max_abs_diff(a, a) == 0.0);
  CHECK(max_abs_diff(a, b) == 0.5);
  CHECK(max_abs(b) == 3.5);
  CHECK(max_rel_diff(a, b) == doctest::Approx(0.5 / 3.5));
  CHECK(bitwise_equal(a, a.clone()));
  CHECK(!bitwise_equal(a, b));
  Tensor z1 = Tensor::zeros({3}, DType::kF64);
  Tensor z2 = Tensor::zeros({3}, DType::kF64);
  CHECK(max_rel_diff(z1, z2) == 0.0);
}

TEST_CASE("matmul identity and hand values") {
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, DType::kF64);
  Rng rng(11);
  Tensor a = random_tensor({3, 3}, rng);
  CHECK(max_abs_diff(k::matmul(eye, a), a) == 0.0);

  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4}, DType::kF64);
  Tensor v = Tensor::from({2, 1}, {0, 1}, DType::kF64);
  Tensor mv = k::matmul(m, v);
  CHECK(mv.at({0, 0}) == 2.0);
  CHECK(mv.at({1, 0}) == 4.0);
}

TEST_CASE("matmul matches the naive oracle, plain and batched") {
  Rng rng(12);
  Tensor a = random_tensor({5, 4}, rng);
  Tensor b = random_tensor({4, 3}, rng);
  CHECK(max_rel_diff(k::matmul(a, b), ref::matmul(a, b)) <= 1e-12);

  // Batched: leading dims must match; each slice is an independent product.
  Tensor ba = random_tensor({2, 3, 4}, rng);
  Tensor bb = random_tensor({2, 4, 5}, rng);
  Tensor out = k::matmul(ba, bb);
  REQUIRE(out.shape() == std::vector<int64_t>{2, 3, 5});
  for (int64_t s = 0; s < 2; ++s)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (int64_t p = 0; p < 4; ++p)
          acc += ba.at({s, i, p}) * bb.at({s, p, j});
        CHECK(out.at({s, i, j}) == doctest::Approx(acc).epsilon(1e-12));
      }

  CHECK_THROWS_AS(k::matmul(a, random_tensor({5, 3}, rng)), ShapeError);
  CHECK_THROWS_AS(k::matmul(a, b.astype(DType::kF32)), ShapeError);
}

TEST_CASE("transpose_last2") {
  Rng rng(13);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor t = a.clone();
  Tensor tr = k::transpose_last2(a);
  REQUIRE(tr.shape() == std::vector<int64_t>{2, 4, 3});
  for (int64_t s = 0; s < 2; ++s)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 4; ++j)
        CHECK(tr.at({s, j, i}) == a.at({s, i, j}));
  CHECK(bitwise_equal(k::transpose_last2(tr), a));
  CHECK(bitwise_equal(a, t));  // input untouched
}

TEST_CASE("elementwise algebra") {
  Rng rng(14);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor y = random_tensor({3, 5}, rng);
  Tensor zero = Tensor::zeros({3, 5}, DType::kF64);

  CHECK(max_abs_diff(k::add(x, zero), x) == 0.0);
  CHECK(max_abs_diff(k::scale(x, 1.0), x) == 0.0);
  CHECK(max_abs_diff(k::sub(k::add(x, y), y), x) <= 1e-12);

  Tensor p = k::mul(x, y);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(p.flat(i) == x.flat(i) * y.flat(i));

  Tensor lc = k::lincomb(2.0, x, -3.0, y);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(lc.flat(i) == doctest::Approx(2 * x.flat(i) - 3 * y.flat(i)));

  // Identity coefficient pairs hand back the operand itself.
  CHECK(k::lincomb(1.0, x, 0.0, y).same_storage(x));
  CHECK(k::lincomb(0.0, x, 1.0, y).same_storage(y));

  Tensor af = k::affine(x, 2.0, 1.0);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(af.flat(i) == doctest::Approx(2 * x.flat(i) + 1));

  CHECK_THROWS_AS(k::add(x, Tensor::zeros({3, 4}, DType::kF64)), ShapeError);
}

TEST_CASE("relu and sigmoid") {
  Tensor x = Tensor::from({5}, {-2, -0.5, 0, 0.5, 2}, DType::kF64);
  Tensor r = k::relu(x);
  CHECK(r.flat(0) == 0.0);
  CHECK(r.flat(1) == 0.0);
  CHECK(r.flat(2) == 0.0);
  CHECK(r.flat(3) == 0.5);
  CHECK(r.flat(4) == 2.0);

  Tensor up = Tensor::full({5}, 1.0, DType::kF64);
  Tensor rv = k::relu_vjp(up, x);
  CHECK(rv.flat(0) == 0.0);
  CHECK(rv.flat(2) == 0.0);  // subgradient at the kink is zero
  CHECK(rv.flat(4) == 1.0);

  Tensor s = k::sigmoid(x);
  CHECK(s.flat(2) == 0.5);
  for (int64_t i = 0; i < 5; ++i) {
    CHECK(s.flat(i) > 0.0);
    CHECK(s.flat(i) < 1.0);
    CHECK(s.flat(i) == doctest::Approx(1.0 / (1.0 + std::exp(-x.flat(i)))));
  }
  // d sigmoid = y(1-y), phrased in terms of the output.
  Tensor sv = k::sigmoid_vjp(up, s);
  for (int64_t i = 0; i < 5; ++i)
    CHECK(sv.flat(i) == doctest::Approx(s.flat(i) * (1 - s.flat(i))));
}

TEST_CASE("dense matches the naive oracle") {
  Rng rng(15);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor w = random_tensor({3, 6}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor y = k::dense(x, w, b);
  REQUIRE(y.shape() == std::vector<int64_t>{4, 3});
  CHECK(max_rel_diff(y, ref::dense(x, w, b)) <= 1e-12);
  for (int64_t n = 0; n < 4; ++n)
    for (int64_t m = 0; m < 3; ++m) {
      double acc = b.flat(m);
      for (int64_t q = 0; q < 6; ++q) acc += x.at({n, q}) * w.at({m, q});
      CHECK(y.at({n, m}) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("conv2d identity kernel and oracle") {
  Rng rng(16);
  Tensor x = random_tensor({2, 1, 6, 6}, rng);
  Tensor wid = Tensor::from({1, 1, 1, 1}, {1}, DType::kF64);
  Tensor b0 = Tensor::zeros({1}, DType::kF64);
  // 1x1 identity kernel, zero bias: convolution passes the input through.
  CHECK(max_abs_diff(k::conv2d(x, wid, b0, 1), x) == 0.0);

  Tensor w = random_tensor({3, 1, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  for (int stride : {1, 2}) {
    Tensor got = k::conv2d(x, w, b, stride);
    Tensor want = ref::conv2d(x, w, b, stride);
    REQUIRE(got.shape() == want.shape());
    CHECK(max_rel_diff(got, want) <= 1e-12);
  }

  CHECK(k::conv_out_dim(28, 9, 1) == 20);
  CHECK(k::conv_out_dim(20, 9, 2) == 6);
  // Kernel larger than the input has nowhere to sit.
  Tensor wbig = Tensor::zeros({1, 1, 7, 7}, DType::kF64);
  CHECK_THROWS_AS(k::conv2d(x, wbig, b0, 1), ShapeError);
}

TEST_CASE("reductions") {
  Tensor v = Tensor::from({3}, {1, 2, 3}, DType::kF64);
  CHECK(k::reduce(k::Reduce::kSum, v, 0).item() == 6.0);
  CHECK(k::reduce(k::Reduce::kMean, v, 0).item() == 2.0);
  CHECK(k::reduce(k::Reduce::kMax, v, 0).item() == 3.0);

  Tensor py = Tensor::from({2}, {3, 4}, DType::kF64);
  CHECK(k::reduce(k::Reduce::kL2Norm, py, 0).item() == 5.0);
  Tensor z = Tensor::zeros({4}, DType::kF64);
  CHECK(k::reduce(k::Reduce::kL2Norm, z, 0).item() == 0.0);

  Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, DType::kF64);
  Tensor rows = k::reduce(k::Reduce::kSum, m, 1);
  REQUIRE(rows.shape() == std::vector<int64_t>{2});
  CHECK(rows.flat(0) == 6.0);
  CHECK(rows.flat(1) == 15.0);
  Tensor cols = k::reduce(k::Reduce::kSum, m, -2);  // negative axis from back
  CHECK(cols.flat(0) == 5.0);
  CHECK(cols.flat(2) == 9.0);
  CHECK_THROWS_AS(k::reduce(k::Reduce::kSum, m, 2), ValueError);

  // broadcast_axis is the adjoint of reduce-sum: summing it back rescales.
  Tensor bc = k::broadcast_axis(rows, 1, 3);
  REQUIRE(bc.shape() == std::vector<int64_t>{2, 3});
  CHECK(bc.at({0, 2}) == 6.0);
  CHECK(max_abs_diff(k::reduce(k::Reduce::kSum, bc, 1), k::scale(rows, 3.0)) == 0.0);
}

TEST_CASE("argmax_last") {
  Tensor a = Tensor::from({2, 3}, {0.1, 0.9, 0.3, 2.0, -1.0, 1.5}, DType::kF64);
  std::vector<int64_t> am = k::argmax_last(a);
  REQUIRE(am.size() == 2);
  CHECK(am[0] == 1);
  CHECK(am[1] == 0);
}

TEST_CASE("kernels never mutate their inputs") {
  Rng rng(17);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({4, 4}, rng);
  Tensor a0 = a.clone(), b0 = b.clone();
  (void)k::add(a, b);
  (void)k::mul(a, b);
  (void)k::matmul(a, b);
  (void)k::relu(a);
  (void)k::softmax_last(a);
  (void)k::squash(a.reshape({1, 4, 4}));
  CHECK(bitwise_equal(a, a0));
  CHECK(bitwise_equal(b, b0));
}

TEST_CASE("rng determinism and distribution") {
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) CHECK(r1.next_u64() == r2.next_u64());

  Rng s1 = Rng::for_stream(7, 1);
  Rng s2 = Rng::for_stream(7, 2);
  CHECK(s1.next_u64() != s2.next_u64());  // streams decouple

  Rng u(5);
  for (int i = 0; i < 1000; ++i) {
    double d = u.uniform();
    CHECK(d >= 0.0);
    CHECK(d < 1.0);
    int64_t n = u.uniform_int(10);
    CHECK(n >= 0);
    CHECK(n < 10);
  }
}

TEST_CASE("normal_init moments and determinism") {
  Rng rng(123);
  Tensor t = normal_init({1000000}, 0.0, 0.01, rng, DType::kF64);
  double sum = 0, sq = 0;
  for (int64_t i = 0; i < t.size(); ++i) {
    sum += t.flat(i);
    sq += t.flat(i) * t.flat(i);
  }
  double mean = sum / static_cast<double>(t.size());
  double stddev = std::sqrt(sq / static_cast<double>(t.size()) - mean * mean);
  CHECK(std::abs(mean) <= 1e-4);
  CHECK(std::abs(stddev - 0.01) <= 0.05 * 0.01);

  Rng ra(9), rb(9);
  CHECK(bitwise_equal(normal_init({64}, 1.0, 2.0, ra, DType::kF64),
                      normal_init({64}, 1.0, 2.0, rb, DType::kF64)));

  Rng rc(9);
  Tensor c = normal_init({16}, 0.5, 0.0, rc, DType::kF64);
  for (int64_t i = 0; i < 16; ++i) CHECK(c.flat(i) == 0.5);

  // f32 tensors come from the same double draws, rounded once.
  Rng rf(31), rd(31);
  Tensor f32 = normal_init({64}, 0.0, 1.0, rf, DType::kF32);
  Tensor f64 = normal_init({64}, 0.0, 1.0, rd, DType::kF64);
  CHECK(bitwise_equal(f32, f64.astype(DType::kF32)));
}
