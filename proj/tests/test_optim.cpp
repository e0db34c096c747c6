#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mocaps/data/data.hpp"
#include "mocaps/model/network.hpp"
#include "mocaps/optim/optim.hpp"
#include "mocaps/ref/reference.hpp"
#include "mocaps/tensor/rng.hpp"

using namespace mocaps;
namespace fs = std::filesystem;

namespace {

model::NetworkConfig tiny_config() {
  model::NetworkConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.classes = 2;
  cfg.stem_filters = 4;
  cfg.stem_kernel = 3;
  cfg.stem_stride = 1;
  cfg.primary_groups = 2;
  cfg.primary_dim = 2;
  cfg.primary_kernel = 3;
  cfg.primary_stride = 2;
  cfg.n_blocks = 1;
  cfg.capsules_per_layer = 4;
  cfg.capsule_dim = 4;
  cfg.routing_iterations = 2;
  cfg.gamma = 0.9;
  cfg.recon_hidden1 = 8;
  cfg.recon_hidden2 = 8;
  cfg.lambda_recon = 0.05;
  cfg.dtype = DType::kF64;
  return cfg;
}

model::ModelParams clone_params(const model::ModelParams& p) {
  model::ModelParams out;
  for (const auto& [name, t] : p.values) out.values[name] = t.clone();
  return out;
}

autodiff::GradMap grads_of(const std::map<std::string, Tensor>& tensors) {
  autodiff::GradMap g;
  for (const auto& [name, t] : tensors) g.accumulate(name, t);
  return g;
}

}  // namespace

TEST_CASE("adam leaves parameters alone under zero gradients") {
  model::ModelParams params;
  params.values["a"] = Tensor::full({3}, 1.5, DType::kF64);
  params.values["b"] = Tensor::full({2, 2}, -0.25, DType::kF64);
  model::ModelParams before = clone_params(params);

  optim::AdamState state;
  autodiff::GradMap zero = grads_of({{"a", Tensor::zeros({3}, DType::kF64)},
                                     {"b", Tensor::zeros({2, 2}, DType::kF64)}});
  optim::adam_step(params, zero, state, 1e-2);
  CHECK(state.t == 1);
  CHECK(bitwise_equal(params.at("a"), before.at("a")));
  CHECK(bitwise_equal(params.at("b"), before.at("b")));
}

TEST_CASE("first adam step moves by about the learning rate") {
  model::ModelParams params;
  params.values["w"] = Tensor::full({1}, 0.5, DType::kF64);
  optim::AdamState state;
  autodiff::GradMap g = grads_of({{"w", Tensor::full({1}, 1.0, DType::kF64)}});
  optim::adam_step(params, g, state, 0.1);
  // Bias correction makes the first update lr * g / (|g| + eps).
  CHECK(params.at("w").item() == doctest::Approx(0.4).epsilon(1e-7));
}

TEST_CASE("adam matches the scalar-loop oracle over 100 steps") {
  const int64_t n = 7;
  Rng rng(71);
  Tensor w0 = normal_init({n}, 0.0, 1.0, rng, DType::kF64);

  model::ModelParams params;
  params.values["w"] = w0.clone();
  optim::AdamState state;

  std::vector<double> w_ref(w0.data<double>(), w0.data<double>() + n);
  ref::AdamBuffers buf;

  for (int step = 0; step < 100; ++step) {
    Tensor g = normal_init({n}, 0.0, 1.0, rng, DType::kF64);
    autodiff::GradMap gm = grads_of({{"w", g}});
    optim::adam_step(params, gm, state, 1e-2);
    std::vector<double> g_ref(g.data<double>(), g.data<double>() + n);
    ref::adam_step(w_ref, g_ref, buf, 1e-2);
    for (int64_t i = 0; i < n; ++i) {
      CAPTURE(step);
      CHECK(params.at("w").flat(i) ==
            doctest::Approx(w_ref[static_cast<size_t>(i)]).epsilon(1e-12));
    }
  }
  CHECK(state.t == 100);
}

TEST_CASE("adam validates gradients against parameters") {
  model::ModelParams params;
  params.values["w"] = Tensor::zeros({3}, DType::kF64);
  optim::AdamState state;

  autodiff::GradMap missing;
  CHECK_THROWS_AS(optim::adam_step(params, missing, state, 1e-3),
                  autodiff::MissingGradientError);

  autodiff::GradMap wrong_shape =
      grads_of({{"w", Tensor::zeros({4}, DType::kF64)}});
  CHECK_THROWS_AS(optim::adam_step(params, wrong_shape, state, 1e-3),
                  ShapeError);

  autodiff::GradMap wrong_dtype =
      grads_of({{"w", Tensor::zeros({3}, DType::kF32)}});
  CHECK_THROWS_AS(optim::adam_step(params, wrong_dtype, state, 1e-3),
                  ValueError);
}

TEST_CASE("float32 parameters stay float32 through adam") {
  model::ModelParams params;
  params.values["w"] = Tensor::full({4}, 1.0f, DType::kF32);
  optim::AdamState state;
  autodiff::GradMap g = grads_of({{"w", Tensor::full({4}, 0.5, DType::kF32)}});
  optim::adam_step(params, g, state, 1e-2);
  CHECK(params.at("w").dtype() == DType::kF32);
  CHECK(params.at("w").flat(0) == doctest::Approx(0.99).epsilon(1e-5));
}

TEST_CASE("learning-rate schedule decays exponentially") {
  optim::Schedule s;
  CHECK(optim::lr_at(s, 0) == 1e-3);
  CHECK(optim::lr_at(s, 1) == doctest::Approx(9.6e-4).epsilon(1e-12));
  CHECK(optim::lr_at(s, 2) == doctest::Approx(9.216e-4).epsilon(1e-12));
  for (int e = 1; e < 20; ++e)
    CHECK(optim::lr_at(s, e) < optim::lr_at(s, e - 1));
  CHECK_THROWS_AS(optim::lr_at(s, -1), ValueError);
}

TEST_CASE("csv rows have a pinned format") {
  CHECK(std::string(optim::kMetricsHeader) ==
        "epoch,lr,train_loss,test_acc,epoch_seconds,peak_activation_bytes");

  optim::EpochRow row;
  row.epoch = 3;
  row.lr = 0.00096;
  row.train_loss = 0.5;
  row.test_acc = 0.975;
  row.epoch_seconds = 1.234;
  row.peak_activation_bytes = 12345;
  CHECK(optim::csv_row(row) == "3,0.00096,0.5,0.975,1.234,12345");

  optim::EpochRow zero;
  zero.epoch = 0;
  zero.lr = 1e-3;
  zero.train_loss = 0.0;
  zero.test_acc = 1.0 / 3.0;
  zero.epoch_seconds = 2.0;
  zero.peak_activation_bytes = 0;
  CHECK(optim::csv_row(zero) == "0,0.001,0,0.333333,2.000,0");
}

TEST_CASE("metrics sink writes header and rows") {
  fs::path path = fs::temp_directory_path() / "mocaps_test_metrics.csv";
  {
    optim::MetricsCsv sink(path.string());
    optim::EpochRow row;
    row.epoch = 1;
    row.lr = 0.5;
    row.train_loss = 2.0;
    row.test_acc = 0.25;
    row.epoch_seconds = 0.125;
    row.peak_activation_bytes = 64;
    sink.append(row);
  }
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == optim::kMetricsHeader);
  std::getline(in, line);
  CHECK(line == "1,0.5,2,0.25,0.125,64");
  CHECK(!std::getline(in, line));
  fs::remove(path);
}

TEST_CASE("two epochs of training are reproducible") {
  model::NetworkConfig cfg = tiny_config();
  Rng init_rng(73);
  model::ModelParams seed_params = model::init_params(cfg, init_rng);
  Rng dtr(74), dte(75);
  data::Dataset train_set = data::synthetic(2, 32, 8, dtr);
  data::Dataset test_set = data::synthetic(2, 16, 8, dte);

  optim::TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 8;
  opt.seed = 5;
  opt.eval_batch_size = 8;

  model::ModelParams p1 = clone_params(seed_params);
  model::ModelParams p2 = clone_params(seed_params);
  optim::TrainReport r1 = optim::train(cfg, p1, train_set, test_set, opt);
  optim::TrainReport r2 = optim::train(cfg, p2, train_set, test_set, opt);

  REQUIRE(r1.rows.size() == 2);
  REQUIRE(r2.rows.size() == 2);
  for (size_t e = 0; e < 2; ++e) {
    const optim::EpochRow &a = r1.rows[e], &b = r2.rows[e];
    CHECK(a.epoch == static_cast<int>(e));
    CHECK(a.lr == optim::lr_at(opt.schedule, static_cast<int>(e)));
    CHECK(std::isfinite(a.train_loss));
    CHECK(a.train_loss > 0.0);
    CHECK(a.test_acc >= 0.0);
    CHECK(a.test_acc <= 1.0);
    CHECK(a.peak_activation_bytes > 0);
    // Every computed field matches across runs; only wall time may differ.
    CHECK(a.train_loss == b.train_loss);
    CHECK(a.test_acc == b.test_acc);
    CHECK(a.peak_activation_bytes == b.peak_activation_bytes);
  }
  for (const auto& [name, t] : p1.values) {
    CAPTURE(name);
    CHECK(bitwise_equal(t, p2.at(name)));
  }
  p1.check_finite("after two epochs");

  SUBCASE("guards") {
    optim::TrainOptions bad = opt;
    bad.epochs = 0;
    model::ModelParams p = clone_params(seed_params);
    CHECK_THROWS_AS(optim::train(cfg, p, train_set, test_set, bad), ValueError);

    Rng wide_rng(76);
    data::Dataset wide = data::synthetic(3, 12, 8, wide_rng);
    CHECK_THROWS_AS(optim::train(cfg, p, wide, test_set, opt), ValueError);
  }

  SUBCASE("non-finite loss aborts with diagnostics") {
    model::ModelParams poisoned = clone_params(seed_params);
    poisoned.at("stem.w")
        .set_flat(0, std::numeric_limits<double>::quiet_NaN());
    try {
      optim::train(cfg, poisoned, train_set, test_set, opt);
      FAIL("expected the non-finite loss abort");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("non-finite loss") !=
            std::string::npos);
    }
  }
}

TEST_CASE("evaluation accuracy ignores the batch partition") {
  model::NetworkConfig cfg = tiny_config();
  Rng rng(77);
  model::ModelParams params = model::init_params(cfg, rng);
  Rng drng(78);
  data::Dataset test_set = data::synthetic(2, 21, 8, drng);
  data::PreprocessSpec spec;

  double a = optim::evaluate(cfg, params, test_set, 21, spec);
  double b = optim::evaluate(cfg, params, test_set, 8, spec);
  double c = optim::evaluate(cfg, params, test_set, 1, spec);
  CHECK(a == b);
  CHECK(b == c);
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);
}

TEST_CASE("reversible and stored mode keep their loss trajectories together") {
  model::NetworkConfig rev_cfg = tiny_config();
  model::NetworkConfig sto_cfg = rev_cfg;
  sto_cfg.mode = model::Mode::kStored;

  Rng rng(79);
  model::ModelParams rev_p = model::init_params(rev_cfg, rng);
  model::ModelParams sto_p = clone_params(rev_p);

  Rng drng(80);
  data::Dataset ds = data::synthetic(2, 8, 8, drng);
  data::PreprocessSpec spec;
  spec.augment = false;
  Rng unused(0);
  Tensor x = data::preprocess(ds.images, spec, unused, false, DType::kF64);

  optim::AdamState rev_s, sto_s;
  for (int step = 0; step < 200; ++step) {
    autodiff::GradMap rg, sg;
    model::LossBreakdown rl = model::loss_and_grads(x, ds.labels, rev_cfg,
                                                    rev_p, rg);
    model::LossBreakdown sl = model::loss_and_grads(x, ds.labels, sto_cfg,
                                                    sto_p, sg);
    CAPTURE(step);
    CHECK(std::abs(rl.total - sl.total) <=
          1e-3 * std::max(1.0, std::abs(sl.total)));
    optim::adam_step(rev_p, rg, rev_s, 1e-3);
    optim::adam_step(sto_p, sg, sto_s, 1e-3);
  }
  rev_p.check_finite("reversible trajectory");
  sto_p.check_finite("stored trajectory");
}
