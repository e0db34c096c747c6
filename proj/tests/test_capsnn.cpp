#include "doctest.h"

#include <cmath>
#include <vector>

#include "mocaps/capsnn/capsnn.hpp"
#include "mocaps/ref/reference.hpp"
#include "mocaps/tensor/rng.hpp"

using namespace mocaps;
namespace k = mocaps::kernels;

namespace {

Tensor rand64(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
  return normal_init(std::move(shape), 0.0, stddev, rng, DType::kF64);
}

double capsule_norm(const Tensor& t, int64_t b, int64_t i) {
  double acc = 0;
  for (int64_t d = 0; d < t.dim(2); ++d) {
    double v = t.at({b, i, d});
    acc += v * v;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("squash fixed points and asymptote") {
  Tensor zero = Tensor::zeros({1, 2, 4}, DType::kF64);
  CHECK(max_abs(nn::squash(zero)) == 0.0);

  // A unit vector lands at norm 1/(1+1) = 0.5 along the same direction.
  Tensor unit = Tensor::from({1, 1, 3}, {1, 0, 0}, DType::kF64);
  Tensor sq = nn::squash(unit);
  CHECK(sq.at({0, 0, 0}) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(sq.at({0, 0, 1}) == 0.0);

  Tensor huge = Tensor::from({1, 1, 2}, {1e6, 0}, DType::kF64);
  CHECK(capsule_norm(nn::squash(huge), 0, 0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("squash preserves direction and keeps norms below one") {
  Rng rng(21);
  Tensor s = rand64({3, 5, 4}, rng, 2.0);
  Tensor v = nn::squash(s);
  CHECK(max_rel_diff(v, ref::squash(s)) <= 1e-12);
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t i = 0; i < 5; ++i) {
      double ns = capsule_norm(s, b, i), nv = capsule_norm(v, b, i);
      CHECK(nv < 1.0);
      CHECK(nv == doctest::Approx(ns * ns / (1 + ns * ns)).epsilon(1e-12));
      double dot = 0;
      for (int64_t d = 0; d < 4; ++d) dot += s.at({b, i, d}) * v.at({b, i, d});
      CHECK(dot / (ns * nv) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("votes against identity, zero, and loop oracle") {
  // Identity transform: the vote repeats the input capsule.
  Tensor u = Tensor::from({1, 1, 3}, {2, -1, 0.5}, DType::kF64);
  Tensor wid = Tensor::from({1, 1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, DType::kF64);
  Tensor uhat = nn::votes(u, wid);
  REQUIRE(uhat.shape() == std::vector<int64_t>{1, 1, 1, 3});
  CHECK(uhat.at({0, 0, 0, 0}) == 2.0);
  CHECK(uhat.at({0, 0, 0, 1}) == -1.0);

  Rng rng(22);
  Tensor ur = rand64({2, 3, 4}, rng);
  CHECK(max_abs(nn::votes(ur, Tensor::zeros({3, 5, 2, 4}, DType::kF64))) == 0.0);

  Tensor w = rand64({3, 5, 2, 4}, rng);
  Tensor got = nn::votes(ur, w);
  CHECK(max_rel_diff(got, ref::votes(ur, w)) <= 1e-12);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 5; ++j)
        for (int64_t o = 0; o < 2; ++o) {
          double acc = 0;
          for (int64_t d = 0; d < 4; ++d)
            acc += w.at({i, j, o, d}) * ur.at({b, i, d});
          CHECK(got.at({b, i, j, o}) == doctest::Approx(acc).epsilon(1e-12));
        }

  CHECK_THROWS_AS(nn::votes(ur, rand64({3, 5, 2, 3}, rng)), ShapeError);
}

TEST_CASE("routing with one out-capsule has trivial couplings") {
  Rng rng(23);
  Tensor uhat = rand64({2, 4, 1, 3}, rng);
  nn::RoutingTrace trace;
  Tensor out = nn::rba_route(uhat, 3, &trace);
  REQUIRE(trace.couplings.size() == 3);
  for (const Tensor& c : trace.couplings)
    for (int64_t i = 0; i < c.size(); ++i) CHECK(c.flat(i) == 1.0);
  // With c == 1 the output is just squash of the vote sum over i.
  Tensor s = k::reduce(k::Reduce::kSum, uhat, 1).reshape({2, 1, 3});
  CHECK(max_rel_diff(out, nn::squash(s)) <= 1e-12);
}

TEST_CASE("identical votes keep couplings uniform across iterations") {
  //  All (i, j) see the same vote vector, so every agreement update adds the
  //  same constant to every logit and the softmax stays at 1/J.
  int64_t B = 1, I = 3, J = 4, O = 2;
  Tensor uhat(std::vector<int64_t>{B, I, J, O}, DType::kF64);
  for (int64_t i = 0; i < uhat.size(); ++i)
    uhat.set_flat(i, (i % O == 0) ? 0.7 : -0.2);
  nn::RoutingTrace trace;
  (void)nn::rba_route(uhat, 4, &trace);
  REQUIRE(trace.couplings.size() == 4);
  for (const Tensor& c : trace.couplings)
    for (int64_t i = 0; i < c.size(); ++i)
      CHECK(c.flat(i) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("routing invariants hold at every iteration") {
  Rng rng(24);
  Tensor uhat = rand64({2, 5, 3, 4}, rng);
  nn::RoutingTrace trace;
  Tensor out = nn::rba_route(uhat, 3, &trace);
  for (const Tensor& c : trace.couplings) {
    for (int64_t i = 0; i < c.size(); ++i) CHECK(c.flat(i) >= 0.0);
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t i = 0; i < 5; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 3; ++j) s += c.at({b, i, j});
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
  }
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t j = 0; j < 3; ++j) CHECK(capsule_norm(out, b, j) < 1.0);
}

TEST_CASE("routing matches the straight-loop oracle") {
  Rng rng(25);
  Tensor uhat = rand64({1, 2, 3, 4}, rng);
  CHECK(max_rel_diff(nn::rba_route(uhat, 3), ref::rba_route(uhat, 3)) <= 1e-10);
  CHECK_THROWS_AS(nn::rba_route(uhat, 0), ValueError);
  CHECK_THROWS_AS(nn::rba_route(rand64({2, 3, 4}, rng), 3), ShapeError);
}

TEST_CASE("one routing iteration equals squash of the uniform vote mix") {
  Rng rng(26);
  Tensor uhat = rand64({2, 4, 3, 5}, rng);
  Tensor got = nn::rba_route(uhat, 1);
  Tensor uniform = Tensor::full({2, 4, 3}, 1.0 / 3.0, DType::kF64);
  Tensor want = nn::squash(k::weighted_sum(uniform, uhat));
  CHECK(max_rel_diff(got, want) <= 1e-12);
}

TEST_CASE("capsule_layer composes votes and routing") {
  Rng rng(27);
  Tensor u = rand64({2, 3, 4}, rng);
  Tensor w = rand64({3, 5, 2, 4}, rng, 0.5);
  CHECK(bitwise_equal(nn::capsule_layer(u, w, 3), nn::rba_route(nn::votes(u, w), 3)));
  CHECK(max_rel_diff(nn::capsule_layer(u, w, 3), ref::capsule_layer(u, w, 3)) <= 1e-10);

  // Single capsule, identity transform: the layer reduces to squash.
  Tensor one = Tensor::from({1, 1, 2}, {0.8, -0.6}, DType::kF64);
  Tensor wid = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1}, DType::kF64);
  CHECK(max_rel_diff(nn::capsule_layer(one, wid, 3), nn::squash(one)) <= 1e-14);
}

TEST_CASE("conv stem") {
  Rng rng(28);
  Tensor x = rand64({2, 1, 5, 5}, rng);
  Tensor wid = Tensor::from({1, 1, 1, 1}, {1}, DType::kF64);
  Tensor b0 = Tensor::zeros({1}, DType::kF64);
  CHECK(max_abs_diff(nn::conv_stem(x, wid, b0, 1), k::relu(x)) == 0.0);

  // A large negative bias drives every pre-activation below zero.
  Tensor bneg = Tensor::full({1}, -1e3, DType::kF64);
  CHECK(max_abs(nn::conv_stem(x, wid, bneg, 1)) == 0.0);
}

TEST_CASE("primary capsules geometry and squash") {
  Rng rng(29);
  // 12x12 features, 3x3 kernel stride 2 -> 5x5 spatial, 2 groups of 3 dims.
  Tensor feat = rand64({2, 4, 12, 12}, rng);
  Tensor w = rand64({6, 4, 3, 3}, rng, 0.2);
  Tensor b = rand64({6}, rng, 0.2);
  Tensor caps = nn::primary_capsules(feat, w, b, 2, 2, 3);
  REQUIRE(caps.shape() == std::vector<int64_t>{2, 2 * 5 * 5, 3});
  for (int64_t bi = 0; bi < 2; ++bi)
    for (int64_t i = 0; i < caps.dim(1); ++i)
      CHECK(capsule_norm(caps, bi, i) < 1.0);

  Tensor zfeat = Tensor::zeros({1, 4, 12, 12}, DType::kF64);
  Tensor zb = Tensor::zeros({6}, DType::kF64);
  CHECK(max_abs(nn::primary_capsules(zfeat, w, zb, 2, 2, 3)) == 0.0);
}

TEST_CASE("primary_reshape layout and adjoint") {
  // Channel group g at spatial (h, w) becomes capsule (g*H + h)*W + w.
  int64_t B = 1, G = 2, D = 3, H = 2, W = 2;
  Tensor x(std::vector<int64_t>{B, G * D, H, W}, DType::kF64);
  for (int64_t i = 0; i < x.size(); ++i) x.set_flat(i, static_cast<double>(i));
  Tensor caps = k::primary_reshape(x, G, D);
  REQUIRE(caps.shape() == std::vector<int64_t>{B, G * H * W, D});
  for (int64_t g = 0; g < G; ++g)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w)
        for (int64_t d = 0; d < D; ++d)
          CHECK(caps.at({0, (g * H + h) * W + w, d}) == x.at({0, g * D + d, h, w}));
  // The vjp is the inverse permutation.
  Tensor back = k::primary_reshape_vjp(caps, G, D, H, W);
  CHECK(bitwise_equal(back, x));
}

TEST_CASE("reconstruction decoder") {
  Rng rng(30);
  int64_t B = 2, K = 3, D = 4, H1 = 5, H2 = 6, P = 7;
  Tensor caps = rand64({B, K, D}, rng);
  Tensor mask = nn::capsule_mask({1, 2}, K, D, DType::kF64);

  SUBCASE("zero weights produce sigmoid(0) everywhere") {
    nn::EvalCtx cx;
    Tensor out = nn::reconstruction(
        cx, caps, mask, Tensor::zeros({H1, K * D}, DType::kF64),
        Tensor::zeros({H1}, DType::kF64), Tensor::zeros({H2, H1}, DType::kF64),
        Tensor::zeros({H2}, DType::kF64), Tensor::zeros({P, H2}, DType::kF64),
        Tensor::zeros({P}, DType::kF64));
    REQUIRE(out.shape() == std::vector<int64_t>{B, P});
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out.flat(i) == 0.5);
  }

  SUBCASE("outputs stay inside the sigmoid range") {
    nn::EvalCtx cx;
    Tensor out = nn::reconstruction(
        cx, caps, mask, rand64({H1, K * D}, rng), rand64({H1}, rng),
        rand64({H2, H1}, rng), rand64({H2}, rng), rand64({P, H2}, rng),
        rand64({P}, rng));
    for (int64_t i = 0; i < out.size(); ++i) {
      CHECK(out.flat(i) > 0.0);
      CHECK(out.flat(i) < 1.0);
    }
  }

  SUBCASE("gradient flows only into the masked capsule") {
    autodiff::Tape t;
    nn::TapeCtx cx{t};
    autodiff::Value caps_v = t.input(caps);
    autodiff::Value out = nn::reconstruction(
        cx, caps_v, autodiff::Tape::constant(mask),
        autodiff::Tape::constant(rand64({H1, K * D}, rng)),
        autodiff::Tape::constant(rand64({H1}, rng)),
        autodiff::Tape::constant(rand64({H2, H1}, rng)),
        autodiff::Tape::constant(rand64({H2}, rng)),
        autodiff::Tape::constant(rand64({P, H2}, rng)),
        autodiff::Tape::constant(rand64({P}, rng)));
    autodiff::Value total = t.reduce(k::Reduce::kSum, t.reduce(k::Reduce::kSum, out, 1), 0);
    autodiff::GradMap g;
    auto r = t.backward({{total, Tensor::scalar(1.0)}}, g, {caps_v});
    const Tensor& grad = r.watched.at(caps_v.id);
    std::vector<int> labels = {1, 2};
    for (int64_t b = 0; b < B; ++b)
      for (int64_t kk = 0; kk < K; ++kk) {
        double row = 0;
        for (int64_t d = 0; d < D; ++d) row += std::abs(grad.at({b, kk, d}));
        if (kk == labels[static_cast<size_t>(b)])
          CHECK(row > 0.0);
        else
          CHECK(row == 0.0);
      }
  }
}

TEST_CASE("margin loss hand values") {
  nn::MarginLossParams p;

  auto loss_of = [&](std::vector<double> norms, std::vector<int> labels,
                     int64_t K) {
    int64_t B = static_cast<int64_t>(labels.size());
    Tensor n = Tensor::from({B, K}, std::move(norms), DType::kF64);
    return nn::margin_loss(n, nn::one_hot(labels, K, DType::kF64), p).item();
  };

  // Both hinges rest exactly at their margins.
  CHECK(loss_of({0.9, 0.1, 0.1}, {0}, 3) == 0.0);
  // All norms zero: only the present-class hinge fires, at full height.
  CHECK(loss_of({0, 0, 0}, {1}, 3) == doctest::Approx(0.81).epsilon(1e-14));
  // Perfect confidence.
  CHECK(loss_of({1.0, 0, 0}, {0}, 3) == 0.0);

  // Generic point against a direct evaluation of the formula.
  std::vector<double> norms = {0.3, 0.7, 0.2, 0.95, 0.05, 0.5};
  std::vector<int> labels = {1, 0};
  double want = 0;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t kk = 0; kk < 3; ++kk) {
      double v = norms[static_cast<size_t>(b * 3 + kk)];
      bool is_true = kk == labels[static_cast<size_t>(b)];
      double pos = std::max(0.0, 0.9 - v);
      double neg = std::max(0.0, v - 0.1);
      want += is_true ? pos * pos : 0.5 * neg * neg;
    }
  want /= 2;
  CHECK(loss_of(norms, labels, 3) == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("one_hot and capsule_mask") {
  Tensor oh = nn::one_hot({2, 0}, 3, DType::kF64);
  REQUIRE(oh.shape() == std::vector<int64_t>{2, 3});
  CHECK(oh.at({0, 2}) == 1.0);
  CHECK(oh.at({0, 0}) == 0.0);
  CHECK(oh.at({1, 0}) == 1.0);
  CHECK_THROWS_AS(nn::one_hot({3}, 3, DType::kF64), ValueError);
  CHECK_THROWS_AS(nn::one_hot({-1}, 3, DType::kF64), ValueError);

  Tensor m = nn::capsule_mask({1}, 3, 2, DType::kF64);
  REQUIRE(m.shape() == std::vector<int64_t>{1, 3, 2});
  for (int64_t kk = 0; kk < 3; ++kk)
    for (int64_t d = 0; d < 2; ++d)
      CHECK(m.at({0, kk, d}) == (kk == 1 ? 1.0 : 0.0));
  CHECK_THROWS_AS(nn::capsule_mask({5}, 3, 2, DType::kF64), ValueError);
}

TEST_CASE("reconstruction loss") {
  Rng rng(31);
  Tensor img = rand64({2, 6}, rng);
  nn::EvalCtx cx;
  CHECK(nn::reconstruction_loss(cx, img, img).item() == 0.0);

  // Off by one everywhere: the per-sample sum of squares is the pixel count.
  Tensor off = k::affine(img, 1.0, 1.0);
  CHECK(nn::reconstruction_loss(cx, off, img).item() == doctest::Approx(6.0).epsilon(1e-14));

  Tensor recon = rand64({2, 6}, rng);
  double want = 0;
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t i = 0; i < 6; ++i) {
      double d = recon.at({b, i}) - img.at({b, i});
      want += d * d;
    }
  }
  want /= 2;
  CHECK(nn::reconstruction_loss(cx, recon, img).item() == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("total loss is the exact weighted combination") {
  nn::EvalCtx cx;
  Tensor margin = Tensor::scalar(1.0);
  Tensor recon = Tensor::scalar(100.0);
  CHECK(nn::total_loss(cx, margin, recon, 5e-4).item() == 1.05);
  CHECK(nn::total_loss(cx, margin, Tensor::scalar(0.0), 5e-4).item() == 1.0);
  CHECK(nn::total_loss(cx, margin, recon, 0.0).item() == 1.0);
}
