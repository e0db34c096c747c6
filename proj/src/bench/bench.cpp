#include "mocaps/bench/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include "mocaps/bench/memory_ledger.hpp"

namespace mocaps::bench {

SlopeFit fit_line(std::vector<double> x, std::vector<double> y) {
  if (x.size() != y.size())
    throw ValueError("fit_line: x and y sizes differ");
  if (x.size() < 2)
    throw ValueError("fit_line: needs at least two points");
  double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0) throw ValueError("fit_line: x values are all equal");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.x = std::move(x);
  fit.y = std::move(y);
  return fit;
}

namespace {

struct BenchBatch {
  Tensor images;
  std::vector<int> labels;
};

// Deterministic input batch from the bench stream: oriented bars when the
// geometry allows, standard-normal pixels otherwise. Retagged static so the
// batch does not sit inside the activation gauge being measured.
BenchBatch bench_batch(const model::NetworkConfig& cfg, int64_t batch_size,
                       uint64_t seed) {
  if (batch_size < 1) throw ValueError("bench batch size must be >= 1");
  Rng rng = Rng::for_stream(seed, 4);
  BenchBatch out;
  if (cfg.channels == 1 && cfg.height == cfg.width && cfg.height >= 8) {
    data::Dataset ds = data::synthetic(static_cast<int>(cfg.classes),
                                       batch_size, cfg.height, rng);
    data::PreprocessSpec spec;
    Rng crop(0);  // eval path draws nothing
    out.images = data::preprocess(ds.images, spec, crop, false, cfg.dtype);
    out.labels = ds.labels;
  } else {
    out.images = normal_init({batch_size, cfg.channels, cfg.height, cfg.width},
                             0.0, 1.0, rng, cfg.dtype);
    out.labels.resize(batch_size);
    for (int64_t i = 0; i < batch_size; ++i)
      out.labels[i] = static_cast<int>(i % cfg.classes);
  }
  out.images.storage()->retag(MemSite::kStatic);
  return out;
}

model::NetworkConfig config_at(const model::NetworkConfig& base, int depth,
                               model::Mode mode) {
  model::NetworkConfig cfg = base;
  cfg.n_blocks = depth;
  cfg.mode = mode;
  cfg.variant = model::Variant::kMoCapsNet;  // the only variant with modes
  cfg.validate();
  return cfg;
}

double median_of(std::vector<double> v) {
  if (v.empty()) throw ValueError("median of an empty sample");
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double stddev_of(const std::vector<double>& v) {
  if (v.empty()) throw ValueError("stddev of an empty sample");
  double m = 0;
  for (double d : v) m += d;
  m /= static_cast<double>(v.size());
  double ss = 0;
  for (double d : v) ss += (d - m) * (d - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_e(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3e", v);
  return buf;
}

std::string fmt_u64(uint64_t v) { return std::to_string(v); }

}  // namespace

MemoryReport measure_memory(const model::NetworkConfig& base,
                            const std::vector<int>& depths,
                            const std::vector<model::Mode>& modes,
                            int64_t batch_size, uint64_t seed) {
  if (depths.empty()) throw ValueError("measure_memory: no depths given");
  if (modes.empty()) throw ValueError("measure_memory: no modes given");
  MemoryReport rep;
  MemoryLedger& ledger = MemoryLedger::instance();
  BenchBatch batch = bench_batch(base, batch_size, seed);
  std::map<model::Mode, std::vector<double>> peaks;
  std::vector<double> xs;
  for (int d : depths) xs.push_back(static_cast<double>(d));

  for (model::Mode mode : modes) {
    for (int d : depths) {
      model::NetworkConfig cfg = config_at(base, d, mode);
      Rng prng = Rng::for_stream(seed, 0);
      model::ModelParams params = model::init_params(cfg, prng);
      optim::AdamState adam;
      autodiff::GradMap grads;
      ledger.reset_peak();
      model::loss_and_grads(batch.images, batch.labels, cfg, params, grads);
      MemoryRow row;
      row.n_blocks = d;
      row.mode = mode;
      row.peak_bytes = ledger.peak_activation_bytes();
      row.forward_exit_bytes = ledger.phase_exit_gauge(Phase::kForward);
      optim::adam_step(params, grads, adam, 1e-3);
      rep.rows.push_back(row);
      peaks[mode].push_back(static_cast<double>(row.peak_bytes));
    }
  }

  if (depths.size() >= 2) {
    auto it_s = peaks.find(model::Mode::kStored);
    auto it_r = peaks.find(model::Mode::kReversible);
    if (it_s != peaks.end()) rep.stored_fit = fit_line(xs, it_s->second);
    if (it_r != peaks.end()) rep.reversible_fit = fit_line(xs, it_r->second);
    if (it_s != peaks.end() && it_r != peaks.end() && rep.stored_fit.slope != 0)
      rep.slope_ratio = rep.reversible_fit.slope / rep.stored_fit.slope;
  }
  return rep;
}

TimeReport measure_time(const model::NetworkConfig& base,
                        const std::vector<int>& depths,
                        const std::vector<model::Mode>& modes, int repeats,
                        int64_t batch_size, uint64_t seed) {
  if (depths.empty()) throw ValueError("measure_time: no depths given");
  if (modes.empty()) throw ValueError("measure_time: no modes given");
  if (repeats < 1) throw ValueError("measure_time: repeats must be >= 1");
  TimeReport rep;
  rep.repeats = repeats;
  BenchBatch batch = bench_batch(base, batch_size, seed);
  std::map<model::Mode, std::vector<double>> train_medians;
  std::map<std::pair<int, int>, double> infer_median;  // (depth, mode)
  std::vector<double> xs;
  for (int d : depths) xs.push_back(static_cast<double>(d));

  // Modes alternate sample by sample on one shared model per depth, so a
  // load burst lands on both sides of the ratio instead of skewing whichever
  // mode owned that stretch of wall clock. Sharing the parameters (and the
  // optimizer trajectory they advance along) is safe here: step cost depends
  // on shapes, not values.
  for (int d : depths) {
    std::map<int, model::NetworkConfig> cfgs;
    for (model::Mode mode : modes)
      cfgs.emplace(static_cast<int>(mode), config_at(base, d, mode));
    Rng prng = Rng::for_stream(seed, 0);
    model::ModelParams params =
        model::init_params(cfgs.begin()->second, prng);
    optim::AdamState adam;

    auto train_step = [&](const model::NetworkConfig& cfg) {
      autodiff::GradMap grads;
      model::loss_and_grads(batch.images, batch.labels, cfg, params, grads);
      optim::adam_step(params, grads, adam, 1e-3);
    };
    std::map<int, std::vector<double>> ts, is;
    for (auto& [m, cfg] : cfgs) train_step(cfg);  // warm-up
    for (int r = 0; r < repeats; ++r) {
      for (auto& [m, cfg] : cfgs) {
        auto t0 = std::chrono::steady_clock::now();
        train_step(cfg);
        ts[m].push_back(seconds_since(t0));
      }
    }
    for (auto& [m, cfg] : cfgs) model::predict(batch.images, cfg, params);
    for (int r = 0; r < repeats; ++r) {
      for (auto& [m, cfg] : cfgs) {
        auto t0 = std::chrono::steady_clock::now();
        model::predict(batch.images, cfg, params);
        is[m].push_back(seconds_since(t0));
      }
    }

    for (model::Mode mode : modes) {
      int m = static_cast<int>(mode);
      TimeRow row;
      row.n_blocks = d;
      row.mode = mode;
      row.train_median_s = median_of(ts[m]);
      row.train_stddev_s = stddev_of(ts[m]);
      row.infer_median_s = median_of(is[m]);
      row.infer_stddev_s = stddev_of(is[m]);
      rep.rows.push_back(row);
      train_medians[mode].push_back(row.train_median_s);
      infer_median[{d, m}] = row.infer_median_s;
    }
  }

  bool have_s = train_medians.count(model::Mode::kStored) > 0;
  bool have_r = train_medians.count(model::Mode::kReversible) > 0;
  if (depths.size() >= 2) {
    if (have_s)
      rep.stored_train_fit = fit_line(xs, train_medians[model::Mode::kStored]);
    if (have_r)
      rep.reversible_train_fit =
          fit_line(xs, train_medians[model::Mode::kReversible]);
    if (have_s && have_r && rep.stored_train_fit.slope != 0)
      rep.train_slope_ratio =
          rep.reversible_train_fit.slope / rep.stored_train_fit.slope;
  }
  if (have_s && have_r) {
    double sum_s = 0, sum_r = 0;
    for (int d : depths) {
      double s = infer_median[{d, static_cast<int>(model::Mode::kStored)}];
      double r = infer_median[{d, static_cast<int>(model::Mode::kReversible)}];
      if (s > 0) rep.max_infer_ratio = std::max(rep.max_infer_ratio, r / s);
      sum_s += s;
      sum_r += r;
    }
    if (sum_s > 0) rep.infer_time_ratio = sum_r / sum_s;
  }
  return rep;
}

InvertReport invert_check(const model::NetworkConfig& base,
                          const std::vector<int>& depths, int trials,
                          double gamma, DType dtype, uint64_t seed) {
  if (gamma == 0)
    throw rev::NotInvertibleError(
        "invert_check: gamma = 0 drops the velocity, the chain has no "
        "inverse");
  if (gamma < 0 || gamma > 1)
    throw ValueError("invert_check: gamma must lie in (0, 1]");
  if (trials < 1) throw ValueError("invert_check: trials must be >= 1");
  if (depths.empty()) throw ValueError("invert_check: no depths given");

  InvertReport rep;
  rep.gamma = gamma;
  rep.dtype = dtype;
  rep.trials = trials;
  Rng rng = Rng::for_stream(seed, 4);
  const int64_t B = 4;
  const int64_t N = base.capsules_per_layer;
  const int64_t D = base.capsule_dim;
  rev::MomentumConfig mc{gamma, base.routing_iterations};

  for (int d : depths) {
    if (d < 0) throw ValueError("invert_check: negative depth");
    double worst_x = 0, worst_v = 0;
    for (int t = 0; t < trials; ++t) {
      std::vector<rev::ChainLayer> layers;
      for (int l = 0; l < 2 * d; ++l)
        // Weights spread enough that squash operates mid-range rather than
        // in its quadratic tail; the round trip should survive real motion.
        layers.push_back({"chain." + std::to_string(l) + ".w",
                          normal_init({N, N, D, D}, 0.0, 0.1, rng, dtype)});
      Tensor x0 = normal_init({B, N, D}, 0.0, 1.0, rng, dtype);

      std::vector<rev::ChainState> fwd;
      nn::EvalCtx cx;
      rev::momentum_chain(cx, x0, layers, mc, &fwd);
      rev::ReversibleChain chain(layers, mc);
      std::vector<rev::ChainState> inv = chain.invert_trajectory(fwd.back());
      if (inv.size() != fwd.size())
        throw Error("invert_check: trajectory length mismatch");

      // Absolute round-trip error normalized by the trajectory's own
      // magnitude (v starts at exactly zero, so per-tensor relative error
      // would divide the first velocity by itself).
      double scale_x = 0, scale_v = 0, err_x = 0, err_v = 0;
      for (size_t i = 0; i < fwd.size(); ++i) {
        scale_x = std::max(scale_x, max_abs(fwd[i].x));
        scale_v = std::max(scale_v, max_abs(fwd[i].v));
        err_x = std::max(err_x, max_abs_diff(fwd[i].x, inv[i].x));
        err_v = std::max(err_v, max_abs_diff(fwd[i].v, inv[i].v));
      }
      worst_x = std::max(worst_x, scale_x > 0 ? err_x / scale_x : err_x);
      worst_v = std::max(worst_v, scale_v > 0 ? err_v / scale_v : err_v);
    }
    rep.rows.push_back({d, worst_x, worst_v});
    rep.worst = std::max({rep.worst, worst_x, worst_v});
  }
  return rep;
}

EquivReport equivalence_check(const model::NetworkConfig& base,
                              const std::vector<int>& depths, int trials,
                              uint64_t seed, bool include_zero_batch) {
  if (trials < 1) throw ValueError("equivalence_check: trials must be >= 1");
  if (depths.empty()) throw ValueError("equivalence_check: no depths given");
  EquivReport rep;
  rep.trials = trials;
  const int64_t B = 2;

  for (int d : depths) {
    model::NetworkConfig cfg = config_at(base, d, model::Mode::kStored);
    cfg.dtype = DType::kF64;
    cfg.validate();
    int total = trials + (include_zero_batch ? 1 : 0);
    double worst = 0;
    for (int t = 0; t < total; ++t) {
      uint64_t trial_seed = seed + 7919u * static_cast<uint64_t>(d) +
                            static_cast<uint64_t>(t);
      Rng prng = Rng::for_stream(trial_seed, 0);
      model::ModelParams params = model::init_params(cfg, prng);

      Tensor images;
      std::vector<int> labels;
      if (t == trials) {  // the all-zero batch
        images = Tensor::zeros({B, cfg.channels, cfg.height, cfg.width},
                               cfg.dtype);
        labels.resize(B);
        for (int64_t i = 0; i < B; ++i)
          labels[i] = static_cast<int>(i % cfg.classes);
      } else {
        BenchBatch batch = bench_batch(cfg, B, trial_seed);
        images = batch.images;
        labels = batch.labels;
      }

      autodiff::GradMap grads_rev, grads_stored;
      model::NetworkConfig cr = cfg;
      cr.mode = model::Mode::kReversible;
      model::NetworkConfig cs = cfg;
      cs.mode = model::Mode::kStored;
      model::loss_and_grads(images, labels, cr, params, grads_rev);
      model::loss_and_grads(images, labels, cs, params, grads_stored);
      if (grads_rev.size() != grads_stored.size())
        throw Error("equivalence_check: gradient sets differ in size");
      for (const auto& [name, g] : grads_stored) {
        const Tensor* other = grads_rev.find(name);
        if (!other)
          throw Error("equivalence_check: reversible pass missed " + name);
        worst = std::max(worst, max_rel_diff(g, *other));
      }
    }
    rep.rows.push_back({d, worst});
    rep.worst = std::max(rep.worst, worst);
  }
  return rep;
}

model::LossBreakdown eval_loss(const Tensor& images,
                               const std::vector<int>& labels,
                               const model::NetworkConfig& cfg,
                               const model::ModelParams& params) {
  nn::EvalCtx cx;
  Tensor x = model::front_stage(cx, cfg, params, images);
  Tensor chain_out = model::chain_stage(cx, cfg, params, x);
  auto [caps, norms] = model::head_stage(cx, cfg, params, chain_out);
  Tensor mask =
      nn::capsule_mask(labels, cfg.classes, cfg.capsule_dim, cfg.dtype);
  Tensor recon = model::recon_stage(cx, cfg, params, caps, mask);
  Tensor onehot = nn::one_hot(labels, cfg.classes, cfg.dtype);
  Tensor pixels = images.reshape({images.dim(0), cfg.pixels()});
  Tensor margin = nn::margin_loss(cx, norms, onehot, cfg.margin);
  Tensor rloss = nn::reconstruction_loss(cx, recon, pixels);
  Tensor total = nn::total_loss(cx, margin, rloss, cfg.lambda_recon);
  return {margin.item(), rloss.item(), total.item()};
}

FdReport fd_check_model(const model::NetworkConfig& cfg0, int64_t batch_size,
                        uint64_t seed, double step,
                        int64_t max_coords_per_param, double floor) {
  if (step <= 0) throw ValueError("fd_check_model: step must be positive");
  model::NetworkConfig cfg = cfg0;
  cfg.dtype = DType::kF64;
  cfg.mode = model::Mode::kStored;
  cfg.validate();
  Rng prng = Rng::for_stream(seed, 0);
  model::ModelParams params = model::init_params(cfg, prng);
  // Nudge every parameter off the init point. Fresh biases are zero, which
  // parks the decoder's relu pre-activations exactly on the kink -- there a
  // central difference straddles the corner and legitimately disagrees with
  // the subgradient. A generic point has no such coincidences.
  for (auto& [name, p] : params.values) {
    Tensor noise = normal_init(p.shape(), 0.0, 0.1, prng, p.dtype());
    params.values[name] = kernels::add(p, noise);
  }
  BenchBatch batch = bench_batch(cfg, batch_size, seed);

  autodiff::GradMap grads;
  model::loss_and_grads(batch.images, batch.labels, cfg, params, grads);

  FdReport rep;
  for (auto& [name, p] : params.values) {
    const Tensor* g = grads.find(name);
    if (!g) throw autodiff::MissingGradientError("no gradient for " + name);
    int64_t n = p.size();
    int64_t count =
        max_coords_per_param > 0 ? std::min(n, max_coords_per_param) : n;
    for (int64_t k = 0; k < count; ++k) {
      int64_t i = count == n ? k : (k * n) / count;
      double orig = p.flat(i);
      p.set_flat(i, orig + step);
      double lp = eval_loss(batch.images, batch.labels, cfg, params).total;
      p.set_flat(i, orig - step);
      double lm = eval_loss(batch.images, batch.labels, cfg, params).total;
      p.set_flat(i, orig);
      double fd = (lp - lm) / (2 * step);
      double an = g->flat(i);
      double rel = std::fabs(an - fd) /
                   std::max({std::fabs(an), std::fabs(fd), floor});
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name;
        rep.worst_coord = i;
      }
      ++rep.coords_checked;
    }
  }
  return rep;
}

// ---- emitters ----

std::string format_table(const std::vector<std::string>& headers,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> width(headers.size());
  for (size_t c = 0; c < headers.size(); ++c) width[c] = headers[c].size();
  for (const auto& row : rows) {
    if (row.size() != headers.size())
      throw ValueError("format_table: ragged row");
    for (size_t c = 0; c < row.size(); ++c)
      width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& row) {
    for (size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      os << std::string(width[c] - row[c].size(), ' ') << row[c];
    }
    os << '\n';
  };
  emit(headers);
  size_t total = 0;
  for (size_t c = 0; c < width.size(); ++c)
    total += width[c] + (c ? 2 : 0);
  os << std::string(total, '-') << '\n';
  for (const auto& row : rows) emit(row);
  return os.str();
}

std::string memory_table(const MemoryReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const MemoryRow& row : r.rows)
    rows.push_back({std::to_string(row.n_blocks), model::mode_name(row.mode),
                    fmt_u64(row.peak_bytes), fmt_u64(row.forward_exit_bytes)});
  std::string out = format_table(
      {"n_blocks", "mode", "peak_bytes", "forward_exit_bytes"}, rows);
  if (!r.stored_fit.x.empty())
    out += "stored slope:      " + fmt_g(r.stored_fit.slope) +
           " bytes/block\n";
  if (!r.reversible_fit.x.empty())
    out += "reversible slope:  " + fmt_g(r.reversible_fit.slope) +
           " bytes/block\n";
  if (r.slope_ratio != 0)
    out += "slope ratio (reversible/stored): " + fmt_g(r.slope_ratio) + "\n";
  return out;
}

std::string memory_csv(const MemoryReport& r) {
  std::string out = "n_blocks,mode,peak_bytes,forward_exit_bytes\n";
  for (const MemoryRow& row : r.rows)
    out += std::to_string(row.n_blocks) + "," + model::mode_name(row.mode) +
           "," + fmt_u64(row.peak_bytes) + "," +
           fmt_u64(row.forward_exit_bytes) + "\n";
  return out;
}

std::string time_table(const TimeReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const TimeRow& row : r.rows)
    rows.push_back({std::to_string(row.n_blocks), model::mode_name(row.mode),
                    fmt_g(row.train_median_s), fmt_g(row.train_stddev_s),
                    fmt_g(row.infer_median_s), fmt_g(row.infer_stddev_s)});
  std::string out = format_table({"n_blocks", "mode", "train_median_s",
                                  "train_stddev_s", "infer_median_s",
                                  "infer_stddev_s"},
                                 rows);
  out += "repeats per cell: " + std::to_string(r.repeats) + "\n";
  if (r.train_slope_ratio != 0)
    out += "train slope ratio (reversible/stored): " +
           fmt_g(r.train_slope_ratio) + "\n";
  if (r.max_infer_ratio != 0)
    out += "worst inference ratio (reversible/stored): " +
           fmt_g(r.max_infer_ratio) + "\n";
  if (r.infer_time_ratio != 0)
    out += "total inference ratio (reversible/stored): " +
           fmt_g(r.infer_time_ratio) + "\n";
  return out;
}

std::string time_csv(const TimeReport& r) {
  std::string out =
      "n_blocks,mode,train_median_s,train_stddev_s,infer_median_s,"
      "infer_stddev_s\n";
  char buf[160];
  for (const TimeRow& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g,%.9g\n",
                  row.n_blocks, model::mode_name(row.mode), row.train_median_s,
                  row.train_stddev_s, row.infer_median_s, row.infer_stddev_s);
    out += buf;
  }
  return out;
}

std::string invert_table(const InvertReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const InvertRow& row : r.rows)
    rows.push_back({std::to_string(row.n_blocks), fmt_e(row.max_x_err),
                    fmt_e(row.max_v_err)});
  std::string out = "gamma=" + fmt_g(r.gamma) +
                    " dtype=" + dtype_name(r.dtype) +
                    " trials=" + std::to_string(r.trials) + "\n";
  out += format_table({"n_blocks", "max_x_err", "max_v_err"}, rows);
  out += "worst: " + fmt_e(r.worst) + "\n";
  return out;
}

std::string equiv_table(const EquivReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const EquivRow& row : r.rows)
    rows.push_back(
        {std::to_string(row.n_blocks), fmt_e(row.max_param_rel_err)});
  std::string out = "trials=" + std::to_string(r.trials) + "\n";
  out += format_table({"n_blocks", "max_param_rel_err"}, rows);
  out += "worst: " + fmt_e(r.worst) + "\n";
  return out;
}

void write_series(const std::string& path, const std::string& header,
                  const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw ValueError("write_series: x and y sizes differ");
  std::ofstream os(path);
  if (!os) throw Error("write_series: cannot open " + path);
  os << header << '\n';
  char buf[96];
  for (size_t i = 0; i < x.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", x[i], y[i]);
    os << buf;
  }
  os.flush();
  if (!os) throw Error("write_series: write failed for " + path);
}

}  // namespace mocaps::bench
