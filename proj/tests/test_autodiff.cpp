#include "doctest.h"

#include <cmath>
#include <vector>

#include "mocaps/autodiff/grad_check.hpp"
#include "mocaps/autodiff/tape.hpp"
#include "mocaps/bench/memory_ledger.hpp"
#include "mocaps/capsnn/capsnn.hpp"
#include "mocaps/tensor/rng.hpp"

using namespace mocaps;
using namespace mocaps::autodiff;
namespace k = mocaps::kernels;

namespace {

Tensor rand64(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
  return normal_init(std::move(shape), 0.0, stddev, rng, DType::kF64);
}

// Reduces a value of any rank to a scalar by summing out every axis.
Value sum_all(Tape& tape, Value v) {
  while (v.data.rank() > 0) v = tape.reduce(k::Reduce::kSum, v, 0);
  return v;
}

// Weighted scalar head: sum(v * c) with a fixed constant c, so that the
// upstream gradient reaching the op under test is not a uniform pattern.
Value weighed(Tape& tape, Value v, const Tensor& c) {
  return sum_all(tape, tape.mul(v, Tape::constant(c)));
}

}  // namespace

TEST_CASE("backward through identity and scale") {
  Rng rng(1);
  Tensor x = rand64({3, 4}, rng);
  Tensor up = rand64({3, 4}, rng);

  Tape t1;
  Value in1 = t1.input(x);
  GradMap g1;
  auto r1 = t1.backward({{in1, up}}, g1, {in1});
  CHECK(bitwise_equal(r1.watched.at(in1.id), up));

  Tape t2;
  Value in2 = t2.input(x);
  Value out = t2.scale(in2, 3.0);
  GradMap g2;
  auto r2 = t2.backward({{out, up}}, g2, {in2});
  CHECK(max_rel_diff(r2.watched.at(in2.id), k::scale(up, 3.0)) <= 1e-15);
}

TEST_CASE("sum output with unit upstream gives all-ones gradient") {
  Rng rng(2);
  Tensor x = rand64({2, 5}, rng);
  Tape t;
  Value in = t.input(x);
  Value s = sum_all(t, in);
  GradMap g;
  auto r = t.backward({{s, Tensor::scalar(1.0)}}, g, {in});
  CHECK(max_abs_diff(r.watched.at(in.id), Tensor::full({2, 5}, 1.0, DType::kF64)) == 0.0);
}

TEST_CASE("zero upstream zeroes every gradient") {
  Rng rng(3);
  Tensor x = rand64({2, 3, 4}, rng);
  Tensor w = rand64({3, 4, 4, 4}, rng, 0.1);
  Tape t;
  Value in = t.input(x);
  Value wv = t.param("w", w);
  Value out = sum_all(t, t.squash(t.votes(in, wv)));
  GradMap g;
  auto r = t.backward({{out, Tensor::zeros({}, DType::kF64)}}, g, {in});
  CHECK(max_abs(r.watched.at(in.id)) == 0.0);
  CHECK(max_abs(g.at("w")) == 0.0);
}

TEST_CASE("gradients accumulate across backward calls") {
  Rng rng(4);
  Tensor x = rand64({4}, rng);
  Tape t;
  Value w = t.param("w", x);
  Value out = sum_all(t, t.mul(w, w));
  GradMap g;
  t.backward({{out, Tensor::scalar(1.0)}}, g);
  Tensor once = g.at("w").clone();
  t.backward({{out, Tensor::scalar(1.0)}}, g);
  CHECK(max_rel_diff(g.at("w"), k::scale(once, 2.0)) <= 1e-15);
}

TEST_CASE("watched values with no path get zero gradients") {
  Rng rng(5);
  Tensor x = rand64({3}, rng);
  Tensor y = rand64({3}, rng);
  Tape t;
  Value used = t.input(x);
  Value unused = t.input(y);
  Value out = sum_all(t, t.mul(used, used));
  GradMap g;
  auto r = t.backward({{out, Tensor::scalar(1.0)}}, g, {used, unused});
  CHECK(max_abs(r.watched.at(unused.id)) == 0.0);
  CHECK(max_abs(r.watched.at(used.id)) > 0.0);
}

TEST_CASE("pause scope records nothing and tracks nothing") {
  Rng rng(6);
  Tensor x = rand64({2, 2}, rng);
  Tape t;
  Value in = t.input(x);
  size_t before = t.node_count();
  {
    Tape::PauseScope pause(t);
    Value silent = t.mul(in, in);
    CHECK(!silent.tracked());
    Value p = t.param("w", x);
    CHECK(!p.tracked());
  }
  CHECK(t.node_count() == before);
  CHECK(t.mode() == Tape::Mode::kRecord);
}

TEST_CASE("recording then discarding a tape restores the activation gauge") {
  auto& ledger = bench::MemoryLedger::instance();
  Rng rng(7);
  Tensor x = rand64({4, 8, 4}, rng);
  Tensor w = rand64({8, 8, 4, 4}, rng, 0.1);
  uint64_t before = ledger.live_activation_bytes();
  {
    Tape t;
    Value out = t.squash(t.votes(t.input(x), t.param("w", w)));
    (void)out;
  }
  CHECK(ledger.live_activation_bytes() == before);
}

TEST_CASE("unsupported reduce ops raise on the tape") {
  Rng rng(8);
  Tensor x = rand64({5}, rng);
  Tape t;
  Value in = t.input(x);
  CHECK_THROWS_AS(t.reduce(k::Reduce::kMax, in, 0), UnsupportedOpError);
  CHECK_THROWS_AS(t.reduce(k::Reduce::kL2Norm, in, 0), UnsupportedOpError);
  // Paused, the same call is fine: it is just a kernel evaluation.
  Tape::PauseScope pause(t);
  CHECK(t.reduce(k::Reduce::kMax, in, 0).data.size() == 1);
}

TEST_CASE("GradMap missing name raises") {
  GradMap g;
  CHECK(g.find("nope") == nullptr);
  CHECK_THROWS_AS(g.at("nope"), MissingGradientError);
}

TEST_CASE("param re-registration returns the original slot") {
  Rng rng(9);
  Tensor w = rand64({3}, rng);
  Tape t;
  Value a = t.param("w", w);
  Value b = t.param("w", w);
  CHECK(a.id == b.id);
  Tensor other = rand64({4}, rng);
  CHECK_THROWS_AS(t.param("w", other), ValueError);
}

TEST_CASE("backward is deterministic") {
  Rng rng(10);
  Tensor x = rand64({2, 6, 4}, rng);
  Tensor w = rand64({6, 5, 3, 4}, rng, 0.1);
  auto run = [&]() {
    Tape t;
    Value out = sum_all(t, t.caps_norm(t.squash(t.votes(t.input(x), t.param("w", w)))));
    GradMap g;
    t.backward({{out, Tensor::scalar(1.0)}}, g);
    return g.at("w").clone();
  };
  CHECK(bitwise_equal(run(), run()));
}

TEST_CASE("linear maps pass grad_check at machine precision") {
  Rng rng(11);
  Tensor x = rand64({3, 3}, rng);
  auto f = [](Tape& t, const std::vector<Value>& in) {
    return sum_all(t, t.scale(in[0], 3.0));
  };
  auto report = grad_check(f, {x});
  CHECK(report.passed);
  CHECK(report.max_rel_err <= 1e-9);
}

TEST_CASE("every primitive passes grad_check against finite differences") {
  Rng rng(12);

  SUBCASE("add sub mul lincomb affine") {
    Tensor a = rand64({3, 4}, rng), b = rand64({3, 4}, rng);
    Tensor c = rand64({3, 4}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      Value s = t.add(in[0], in[1]);
      s = t.sub(s, t.mul(in[0], in[1]));
      s = t.lincomb(2.0, s, -0.5, in[1]);
      s = t.affine(s, 1.5, 0.25);
      return weighed(t, s, c);
    };
    auto report = grad_check(f, {a, b});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("matmul") {
    Tensor a = rand64({4, 3}, rng), b = rand64({3, 5}, rng);
    Tensor c = rand64({4, 5}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.matmul(in[0], in[1]), c);
    };
    auto report = grad_check(f, {a, b});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("dense") {
    Tensor x = rand64({3, 4}, rng), w = rand64({2, 4}, rng), b = rand64({2}, rng);
    Tensor c = rand64({3, 2}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.dense(in[0], in[1], in[2]), c);
    };
    auto report = grad_check(f, {x, w, b});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("conv2d") {
    Tensor x = rand64({2, 2, 5, 5}, rng);
    Tensor w = rand64({3, 2, 3, 3}, rng), b = rand64({3}, rng);
    Tensor c = rand64({2, 3, 2, 2}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.conv2d(in[0], in[1], in[2], 2), c);
    };
    auto report = grad_check(f, {x, w, b});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("relu away from the kink") {
    // |x| is pushed away from zero so the finite difference cannot straddle
    // the corner.
    Tensor x = rand64({4, 4}, rng);
    for (int64_t i = 0; i < x.size(); ++i) {
      double v = x.flat(i);
      x.set_flat(i, v >= 0 ? v + 0.5 : v - 0.5);
    }
    Tensor c = rand64({4, 4}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.relu(in[0]), c);
    };
    auto report = grad_check(f, {x});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("sigmoid") {
    Tensor x = rand64({3, 3}, rng);
    Tensor c = rand64({3, 3}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.sigmoid(in[0]), c);
    };
    auto report = grad_check(f, {x});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("reshape and primary_reshape") {
    Tensor x = rand64({2, 6, 2, 2}, rng);  // 3 groups x 2 dims
    Tensor c = rand64({2, 12, 2}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      Value pr = t.primary_reshape(in[0], 3, 2);
      Value back = t.reshape(pr, {2, 24});
      return weighed(t, t.reshape(back, {2, 12, 2}), c);
    };
    auto report = grad_check(f, {x});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("squash at a generic point") {
    Tensor s = rand64({2, 3, 4}, rng);
    Tensor c = rand64({2, 3, 4}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.squash(in[0]), c);
    };
    auto report = grad_check(f, {s});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("softmax_last") {
    Tensor x = rand64({2, 3, 4}, rng);
    Tensor c = rand64({2, 3, 4}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.softmax_last(in[0]), c);
    };
    auto report = grad_check(f, {x});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("caps_norm") {
    Tensor x = rand64({2, 3, 4}, rng);
    Tensor c = rand64({2, 3}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      return weighed(t, t.caps_norm(in[0]), c);
    };
    auto report = grad_check(f, {x});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("votes weighted_sum agreement") {
    Tensor u = rand64({2, 3, 4}, rng);
    Tensor w = rand64({3, 2, 3, 4}, rng, 0.3);
    Tensor cpl = k::softmax_last(rand64({2, 3, 2}, rng));
    Tensor c = rand64({2, 3, 2}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      Value uhat = t.votes(in[0], in[1]);
      Value s = t.weighted_sum(Tape::constant(cpl), uhat);
      Value a = t.agreement(uhat, s);
      return weighed(t, a, c);
    };
    auto report = grad_check(f, {u, w});
    INFO(report.summary());
    CHECK(report.passed);
  }

  SUBCASE("reduce sum and mean") {
    Tensor x = rand64({3, 4}, rng);
    Tensor c = rand64({4}, rng);
    auto f = [&](Tape& t, const std::vector<Value>& in) {
      Value s = t.reduce(k::Reduce::kSum, in[0], 0);
      Value m = t.reduce(k::Reduce::kMean, in[0], 0);
      return weighed(t, t.add(s, m), c);
    };
    auto report = grad_check(f, {x});
    INFO(report.summary());
    CHECK(report.passed);
  }
}

TEST_CASE("full capsule layer passes grad_check") {
  Rng rng(13);
  Tensor u = rand64({2, 4, 3}, rng);
  Tensor w = rand64({4, 3, 2, 3}, rng, 0.3);
  Tensor c = rand64({2, 3, 2}, rng);
  auto f = [&](Tape& t, const std::vector<Value>& in) {
    nn::TapeCtx cx{t};
    Value out = nn::capsule_layer(cx, in[0], in[1], 3);
    return weighed(t, out, c);
  };
  auto report = grad_check(f, {u, w});
  INFO(report.summary());
  CHECK(report.passed);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("composite stem-to-norm graph passes grad_check") {
  Rng rng(14);
  Tensor img = rand64({1, 1, 6, 6}, rng);
  Tensor cw = rand64({4, 1, 3, 3}, rng, 0.5);
  Tensor cb = rand64({4}, rng, 0.5);
  Tensor w = rand64({32, 3, 2, 2}, rng, 0.3);
  Tensor c = rand64({1, 3}, rng);
  auto f = [&](Tape& t, const std::vector<Value>& in) {
    nn::TapeCtx cx{t};
    Value feat = nn::conv_stem(cx, in[0], in[1], in[2], 1);  // [1,4,4,4]
    Value prim = cx.squash(cx.primary_reshape(feat, 2, 2));  // [1,32,2]
    Value caps = nn::capsule_layer(cx, prim, in[3], 3);      // [1,3,2]
    return weighed(t, cx.caps_norm(caps), c);
  };
  auto report = grad_check(f, {img, cw, cb, w});
  INFO(report.summary());
  CHECK(report.passed);
}

TEST_CASE("squash at the zero vector is flagged as a kink") {
  Tensor zero = Tensor::zeros({1, 1, 4}, DType::kF64);
  auto f = [](Tape& t, const std::vector<Value>& in) {
    return sum_all(t, t.squash(in[0]));
  };
  // The backward rule defines the gradient as zero there; the central
  // difference sees ~h instead, so the report must call out an unstable
  // probe rather than sail through.
  auto report = grad_check(f, {zero});
  CHECK(!report.passed);
  CHECK(!report.warnings.empty());
}

TEST_CASE("grad_check rejects non-scalar and non-f64 inputs") {
  Rng rng(15);
  Tensor x = rand64({3}, rng);
  auto vector_f = [](Tape& t, const std::vector<Value>& in) { return in[0]; };
  CHECK_THROWS_AS(grad_check(vector_f, {x}), ValueError);
  auto f = [](Tape& t, const std::vector<Value>& in) {
    return sum_all(t, in[0]);
  };
  CHECK_THROWS_AS(grad_check(f, {x.astype(DType::kF32)}), ValueError);
}
