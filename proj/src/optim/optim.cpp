#include "mocaps/optim/optim.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

namespace mocaps::optim {
namespace {

template <typename T>
void adam_apply(const Tensor& p, const Tensor& g, const Tensor& m,
                const Tensor& v, Tensor& p2, Tensor& m2, Tensor& v2,
                double lr, const AdamConfig& c, double bc1, double bc2) {
  const T* pp = p.data<T>();
  const T* gp = g.data<T>();
  const T* mp = m.data<T>();
  const T* vp = v.data<T>();
  T* pp2 = p2.mutable_data<T>();
  T* mp2 = m2.mutable_data<T>();
  T* vp2 = v2.mutable_data<T>();
  const int64_t n = p.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    double gd = static_cast<double>(gp[i]);
    double md = c.beta1 * static_cast<double>(mp[i]) + (1.0 - c.beta1) * gd;
    double vd =
        c.beta2 * static_cast<double>(vp[i]) + (1.0 - c.beta2) * gd * gd;
    mp2[i] = static_cast<T>(md);
    vp2[i] = static_cast<T>(vd);
    double mhat = md / bc1;
    double vhat = vd / bc2;
    pp2[i] = static_cast<T>(static_cast<double>(pp[i]) -
                            lr * mhat / (std::sqrt(vhat) + c.epsilon));
  }
}

std::string fmt(const char* spec, double v) {
  char b[64];
  std::snprintf(b, sizeof b, spec, v);
  return b;
}

}  // namespace

void adam_step(model::ModelParams& params, const autodiff::GradMap& grads,
               AdamState& state, double lr) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.config.beta1, state.t);
  const double bc2 = 1.0 - std::pow(state.config.beta2, state.t);
  for (auto& [name, p] : params.values) {
    const Tensor& g = grads.at(name);
    if (g.shape() != p.shape())
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " +
                       g.shape_str() + ", parameter has " + p.shape_str());
    if (g.dtype() != p.dtype())
      throw ValueError("adam_step: gradient dtype mismatch for '" + name +
                       "'");
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      bench::MemSiteScope site(bench::MemSite::kOptimizer);
      mit = state.m.emplace(name, Tensor::zeros(p.shape(), p.dtype())).first;
      state.v.emplace(name, Tensor::zeros(p.shape(), p.dtype()));
    }
    Tensor& m = mit->second;
    Tensor& v = state.v.at(name);
    if (m.shape() != p.shape())
      throw ShapeError("adam_step: stale state for '" + name + "'");

    Tensor p2(p.shape(), p.dtype());
    Tensor m2(p.shape(), p.dtype());
    Tensor v2(p.shape(), p.dtype());
    if (p.dtype() == DType::kF32)
      adam_apply<float>(p, g, m, v, p2, m2, v2, lr, state.config, bc1, bc2);
    else
      adam_apply<double>(p, g, m, v, p2, m2, v2, lr, state.config, bc1, bc2);
    p2.storage()->claim_if_transient(bench::MemSite::kParameter);
    m2.storage()->claim_if_transient(bench::MemSite::kOptimizer);
    v2.storage()->claim_if_transient(bench::MemSite::kOptimizer);
    p = std::move(p2);
    m = std::move(m2);
    v = std::move(v2);
  }
}

double lr_at(const Schedule& s, int epoch) {
  if (epoch < 0) throw ValueError("lr_at: epoch must be >= 0");
  return s.base_lr * std::pow(s.decay, epoch);
}

std::string csv_row(const EpochRow& row) {
  char b[192];
  std::snprintf(b, sizeof b, "%d,%.10g,%.12g,%.6g,%.3f,%llu", row.epoch,
                row.lr, row.train_loss, row.test_acc, row.epoch_seconds,
                static_cast<unsigned long long>(row.peak_activation_bytes));
  return b;
}

MetricsCsv::MetricsCsv(const std::string& path)
    : os_(path, std::ios::trunc), path_(path) {
  if (!os_) throw Error("cannot open metrics file '" + path + "'");
  os_ << kMetricsHeader << '\n' << std::flush;
}

void MetricsCsv::append(const EpochRow& row) {
  os_ << csv_row(row) << '\n' << std::flush;
  if (!os_) throw Error("write to metrics file '" + path_ + "' failed");
}

TrainReport train(const model::NetworkConfig& cfg, model::ModelParams& params,
                  const data::Dataset& train_set,
                  const data::Dataset& test_set, const TrainOptions& opt,
                  MetricsCsv* sink) {
  cfg.validate();
  if (opt.epochs < 1) throw ValueError("train: epochs must be >= 1");
  if (train_set.class_count > cfg.classes)
    throw ValueError("train: dataset has " +
                     std::to_string(train_set.class_count) +
                     " classes, config expects at most " +
                     std::to_string(cfg.classes));
  auto& ledger = bench::MemoryLedger::instance();
  Rng shuffle_rng = Rng::for_stream(opt.seed, 1);
  Rng crop_rng = Rng::for_stream(opt.seed, 2);
  AdamState state;

  TrainReport report;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    const double lr = lr_at(opt.schedule, epoch);
    const auto t0 = std::chrono::steady_clock::now();
    ledger.reset_peak();

    std::vector<data::Batch> epoch_batches =
        data::batches(train_set, opt.batch_size, opt.shuffle, shuffle_rng);
    double loss_sum = 0;
    int64_t seen = 0;
    for (size_t i = 0; i < epoch_batches.size(); ++i) {
      const data::Batch& batch = epoch_batches[i];
      Tensor x = data::preprocess(batch.images, opt.preprocess, crop_rng,
                                  /*train=*/true, cfg.dtype);
      autodiff::GradMap grads;
      model::LossBreakdown lb =
          model::loss_and_grads(x, batch.labels, cfg, params, grads);
      if (!std::isfinite(lb.total))
        throw Error("training aborted: non-finite loss at epoch " +
                    std::to_string(epoch) + ", iteration " +
                    std::to_string(i) + " (lr=" + fmt("%.10g", lr) +
                    ", margin=" + fmt("%.10g", lb.margin) +
                    ", recon=" + fmt("%.10g", lb.recon) +
                    ", total=" + fmt("%.10g", lb.total) + ")");
      adam_step(params, grads, state, lr);
      loss_sum += lb.total * static_cast<double>(batch.labels.size());
      seen += static_cast<int64_t>(batch.labels.size());
    }
    const uint64_t peak = ledger.peak_activation_bytes();

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(seen);
    row.test_acc =
        evaluate(cfg, params, test_set, opt.eval_batch_size, opt.preprocess);
    row.epoch_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    row.peak_activation_bytes = peak;
    report.rows.push_back(row);
    if (sink) sink->append(row);
  }
  return report;
}

double evaluate(const model::NetworkConfig& cfg,
                const model::ModelParams& params,
                const data::Dataset& test_set, int64_t batch_size,
                const data::PreprocessSpec& spec) {
  Rng unused(0);
  std::vector<data::Batch> parts =
      data::batches(test_set, batch_size, /*shuffle=*/false, unused);
  int64_t hits = 0, total = 0;
  for (const data::Batch& batch : parts) {
    Tensor x =
        data::preprocess(batch.images, spec, unused, /*train=*/false,
                         cfg.dtype);
    std::vector<int> pred = model::predict(x, cfg, params);
    for (size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == batch.labels[i]) ++hits;
    total += static_cast<int64_t>(pred.size());
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace mocaps::optim
