#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mocaps/data/data.hpp"
#include "mocaps/model/network.hpp"

namespace mocaps::optim {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment per parameter, created lazily on the first step; t
// counts completed steps (so the first update sees t = 1).
struct AdamState {
  AdamConfig config;
  int64_t t = 0;
  std::map<std::string, Tensor> m, v;
};

// Bias-corrected Adam update over every parameter, in name order. Raises
// MissingGradientError when `grads` lacks a parameter.
void adam_step(model::ModelParams& params, const autodiff::GradMap& grads,
               AdamState& state, double lr);

struct Schedule {
  double base_lr = 1e-3;
  double decay = 0.96;  // per epoch
};
double lr_at(const Schedule& s, int epoch);

struct EpochRow {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;  // sample-weighted mean batch loss
  double test_acc = 0;
  double epoch_seconds = 0;
  uint64_t peak_activation_bytes = 0;  // during this epoch's training steps
};

inline constexpr const char* kMetricsHeader =
    "epoch,lr,train_loss,test_acc,epoch_seconds,peak_activation_bytes";
// One CSV line, '.' decimal separator, no trailing newline. Formats are
// fixed (lr %.10g, loss %.12g, acc %.6g, seconds %.3f) so identical runs
// produce identical files.
std::string csv_row(const EpochRow& row);

// Writes the header on open and one row per append (flushed immediately).
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::string& path);
  void append(const EpochRow& row);

 private:
  std::ofstream os_;
  std::string path_;
};

struct TrainReport {
  std::vector<EpochRow> rows;
};

struct TrainOptions {
  int epochs = 5;
  int64_t batch_size = 128;
  Schedule schedule;
  uint64_t seed = 0;
  data::PreprocessSpec preprocess;
  bool shuffle = true;
  int64_t eval_batch_size = 256;
};

// Epochs of shuffle/preprocess/loss_and_grads/adam_step with an evaluation
// after each epoch. Shuffling draws from stream 1 of the seed, crop offsets
// from stream 2. A non-finite loss aborts with the iteration, lr, and loss
// components in the message.
TrainReport train(const model::NetworkConfig& cfg, model::ModelParams& params,
                  const data::Dataset& train_set,
                  const data::Dataset& test_set, const TrainOptions& opt,
                  MetricsCsv* sink = nullptr);

// Fraction of samples whose argmax class norm equals the label. Evaluation
// preprocessing is deterministic, so the batch partition does not matter.
double evaluate(const model::NetworkConfig& cfg,
                const model::ModelParams& params,
                const data::Dataset& test_set, int64_t batch_size,
                const data::PreprocessSpec& spec);

}  // namespace mocaps::optim
