#pragma once

#include <string>
#include <vector>

#include "mocaps/data/data.hpp"
#include "mocaps/model/network.hpp"
#include "mocaps/optim/optim.hpp"

namespace mocaps::bench {

// Least-squares line through (x, y); needs at least two points.
struct SlopeFit {
  std::vector<double> x, y;
  double slope = 0;
  double intercept = 0;
};
SlopeFit fit_line(std::vector<double> x, std::vector<double> y);

// ---- memory ----

struct MemoryRow {
  int n_blocks = 0;
  model::Mode mode = model::Mode::kStored;
  uint64_t peak_bytes = 0;           // activation peak over one train step
  uint64_t forward_exit_bytes = 0;   // live activations when forward ended
};

struct MemoryReport {
  std::vector<MemoryRow> rows;
  SlopeFit stored_fit, reversible_fit;  // peak bytes vs depth
  double slope_ratio = 0;               // reversible / stored
};

// One deterministic train step per (depth, mode): fresh params, the same
// stream-4 input batch, ledger peak reset before the step. Memory numbers
// are exact and reproducible; nothing here is timed.
MemoryReport measure_memory(const model::NetworkConfig& base,
                            const std::vector<int>& depths,
                            const std::vector<model::Mode>& modes,
                            int64_t batch_size, uint64_t seed);

// ---- time ----

struct TimeRow {
  int n_blocks = 0;
  model::Mode mode = model::Mode::kStored;
  double train_median_s = 0;
  double train_stddev_s = 0;
  double infer_median_s = 0;
  double infer_stddev_s = 0;
};

struct TimeReport {
  std::vector<TimeRow> rows;
  int repeats = 0;
  SlopeFit stored_train_fit, reversible_train_fit;
  double train_slope_ratio = 0;  // reversible / stored, per-block step cost
  double max_infer_ratio = 0;    // worst reversible/stored inference median
  double infer_time_ratio = 0;   // reversible / stored, medians summed over
                                 // depths; averages out per-point jitter
};

// Medians and stddevs of `repeats` timed runs after one warm-up, per
// (depth, mode), for a full train step and an inference pass.
TimeReport measure_time(const model::NetworkConfig& base,
                        const std::vector<int>& depths,
                        const std::vector<model::Mode>& modes, int repeats,
                        int64_t batch_size, uint64_t seed);

// ---- verification harnesses ----

struct InvertRow {
  int n_blocks = 0;
  double max_x_err = 0;
  double max_v_err = 0;
};

struct InvertReport {
  double gamma = 0;
  DType dtype = DType::kF64;
  int trials = 0;
  std::vector<InvertRow> rows;
  double worst = 0;
};

// Round-trip error of the momentum chain: forward with the trajectory
// retained as the oracle, then inversion from the terminal state alone.
// Chain geometry (capsules, dims, routing) comes from `base`; each depth d
// runs a chain of 2*d capsule layers. gamma = 0 raises NotInvertibleError;
// depth 0 is the identity chain and must come back exact.
InvertReport invert_check(const model::NetworkConfig& base,
                          const std::vector<int>& depths, int trials,
                          double gamma, DType dtype, uint64_t seed);

struct EquivRow {
  int n_blocks = 0;
  double max_param_rel_err = 0;
};

struct EquivReport {
  int trials = 0;
  std::vector<EquivRow> rows;
  double worst = 0;
};

// Reversible vs stored gradients over every parameter of the full model at
// float64. include_zero_batch adds an all-zero image batch to the trials.
EquivReport equivalence_check(const model::NetworkConfig& base,
                              const std::vector<int>& depths, int trials,
                              uint64_t seed, bool include_zero_batch = true);

// Loss evaluated without any tape; the oracle for finite differences.
model::LossBreakdown eval_loss(const Tensor& images,
                               const std::vector<int>& labels,
                               const model::NetworkConfig& cfg,
                               const model::ModelParams& params);

struct FdReport {
  int64_t coords_checked = 0;
  double max_rel_err = 0;
  std::string worst_param;
  int64_t worst_coord = -1;
};

// Central finite differences against stored-mode tape gradients, coordinate
// by coordinate. max_coords_per_param = 0 checks every coordinate. The
// comparison floor absorbs FD roundoff on near-zero derivatives: at step h
// the difference quotient carries ~eps*|loss|/h of noise, so coordinates
// below ~1e-7 cannot be certified in relative terms by any step size; the
// default floor matches autodiff::grad_check.
FdReport fd_check_model(const model::NetworkConfig& cfg, int64_t batch_size,
                        uint64_t seed, double step,
                        int64_t max_coords_per_param = 0,
                        double floor = 1e-4);

// ---- emitters ----

std::string format_table(const std::vector<std::string>& headers,
                         const std::vector<std::vector<std::string>>& rows);

std::string memory_table(const MemoryReport& r);
std::string memory_csv(const MemoryReport& r);
std::string time_table(const TimeReport& r);
std::string time_csv(const TimeReport& r);
std::string invert_table(const InvertReport& r);
std::string equiv_table(const EquivReport& r);

// Two-column "x,y" series file for external plotting.
void write_series(const std::string& path, const std::string& header,
                  const std::vector<double>& x, const std::vector<double>& y);

}  // namespace mocaps::bench
