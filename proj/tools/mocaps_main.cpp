#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "mocaps/bench/bench.hpp"
#include "mocaps/model/checkpoint.hpp"

using namespace mocaps;

namespace {

// Anything that should land on exit code 2 rather than 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string dataset = "synthetic";
  std::string data_dir;  // empty -> $MOCAPS_DATA_DIR -> ./data
  std::string variant = "mocapsnet";
  int blocks = 1;
  double gamma = 0.9;
  int64_t capsules = 32;
  int64_t capsule_dim = 16;
  int routing_iters = 3;
  int64_t batch_size = 128;
  double lr = 1e-3;
  double lr_decay = 0.96;
  int epochs = 5;
  double lambda_recon = 5e-4;
  uint64_t seed = 0;
  std::string dtype = "f32";
  std::string mode = "reversible";
  std::string out_dir = "runs";

  // command-specific
  std::string config_file;
  std::string checkpoint;
  bool emit_plot = false;
  int repeats = 5;
  int trials_invert = 20;
  int trials_equiv = 10;
  double tol_invert = 1e-6;
  double tol_equiv = 1e-6;
  double tol_grad = 1e-4;
  double fd_step = 1e-6;
};

const std::vector<std::string>& valid_keys() {
  static const std::vector<std::string> keys = {
      "dataset",    "data_dir",   "variant",       "blocks",
      "gamma",      "capsules",   "capsule_dim",   "routing_iters",
      "batch_size", "lr",         "lr_decay",      "epochs",
      "lambda_recon", "seed",     "dtype",         "mode",
      "out_dir"};
  return keys;
}

std::string key_list() {
  std::string out;
  for (const std::string& k : valid_keys()) {
    if (!out.empty()) out += ", ";
    out += k;
  }
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Flat key=value lines; '#' starts a comment, blank lines are fine, later
// duplicates win.
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(line_no) +
                       ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    bool known = false;
    for (const std::string& k : valid_keys()) known = known || k == key;
    if (!known)
      throw UsageError(path + ":" + std::to_string(line_no) +
                       ": unknown key '" + key + "' (valid keys: " +
                       key_list() + ")");
    kv[key] = val;
  }
  return kv;
}

template <class T, class Fn>
T parse_as(const std::string& key, const std::string& val, Fn fn) {
  try {
    size_t used = 0;
    T out = fn(val, &used);
    if (used != val.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw UsageError("config: invalid value '" + val + "' for key '" + key +
                     "'");
  }
}

int parse_int(const std::string& k, const std::string& v) {
  return parse_as<int>(k, v, [](const std::string& s, size_t* u) {
    return std::stoi(s, u);
  });
}
int64_t parse_i64(const std::string& k, const std::string& v) {
  return parse_as<int64_t>(k, v, [](const std::string& s, size_t* u) {
    return std::stoll(s, u);
  });
}
double parse_f64(const std::string& k, const std::string& v) {
  return parse_as<double>(k, v, [](const std::string& s, size_t* u) {
    return std::stod(s, u);
  });
}
uint64_t parse_u64(const std::string& k, const std::string& v) {
  return parse_as<uint64_t>(k, v, [](const std::string& s, size_t* u) {
    return std::stoull(s, u);
  });
}

void apply_config(Options& o, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "dataset") o.dataset = v;
    else if (k == "data_dir") o.data_dir = v;
    else if (k == "variant") o.variant = v;
    else if (k == "blocks") o.blocks = parse_int(k, v);
    else if (k == "gamma") o.gamma = parse_f64(k, v);
    else if (k == "capsules") o.capsules = parse_i64(k, v);
    else if (k == "capsule_dim") o.capsule_dim = parse_i64(k, v);
    else if (k == "routing_iters") o.routing_iters = parse_int(k, v);
    else if (k == "batch_size") o.batch_size = parse_i64(k, v);
    else if (k == "lr") o.lr = parse_f64(k, v);
    else if (k == "lr_decay") o.lr_decay = parse_f64(k, v);
    else if (k == "epochs") o.epochs = parse_int(k, v);
    else if (k == "lambda_recon") o.lambda_recon = parse_f64(k, v);
    else if (k == "seed") o.seed = parse_u64(k, v);
    else if (k == "dtype") o.dtype = v;
    else if (k == "mode") o.mode = v;
    else if (k == "out_dir") o.out_dir = v;
  }
}

// Covers values that arrived via the config file and so bypassed the CLI
// validators.
void validate_options(const Options& o) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw UsageError(msg);
  };
  need(o.dataset == "synthetic" || o.dataset == "mnist" ||
           o.dataset == "cifar10",
       "unknown dataset '" + o.dataset +
           "' (expected synthetic, mnist, or cifar10)");
  need(o.gamma >= 0.0 && o.gamma <= 1.0, "gamma must lie in [0, 1]");
  need(o.blocks >= 1, "blocks must be >= 1");
  need(o.capsules >= 1, "capsules must be >= 1");
  need(o.capsule_dim >= 1, "capsule_dim must be >= 1");
  need(o.routing_iters >= 1, "routing_iters must be >= 1");
  need(o.batch_size >= 1, "batch_size must be >= 1");
  need(o.lr > 0, "lr must be positive");
  need(o.lr_decay > 0 && o.lr_decay <= 1, "lr_decay must lie in (0, 1]");
  need(o.epochs >= 1, "epochs must be >= 1");
  need(o.lambda_recon >= 0, "lambda_recon must be >= 0");
  try {
    model::variant_from_name(o.variant);
    model::mode_from_name(o.mode);
    dtype_from_name(o.dtype);
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
}

model::NetworkConfig make_config(const Options& o) {
  model::NetworkConfig cfg = model::NetworkConfig::for_dataset(o.dataset);
  cfg.n_blocks = o.blocks;
  cfg.gamma = o.gamma;
  cfg.capsules_per_layer = o.capsules;
  cfg.capsule_dim = o.capsule_dim;
  cfg.routing_iterations = o.routing_iters;
  cfg.lambda_recon = o.lambda_recon;
  cfg.variant = model::variant_from_name(o.variant);
  cfg.mode = model::mode_from_name(o.mode);
  cfg.dtype = dtype_from_name(o.dtype);
  cfg.validate();
  return cfg;
}

// check-equivalence runs the full pipeline but narrows the width-only
// internals (not CLI knobs) so float64 dual-mode sweeps finish at desk
// scale. The chain itself keeps the configured capsule geometry.
model::NetworkConfig verify_config(const Options& o) {
  model::NetworkConfig cfg = make_config(o);
  cfg.stem_filters = 8;
  cfg.primary_groups = 2;
  cfg.primary_dim = 4;
  cfg.recon_hidden1 = 32;
  cfg.recon_hidden2 = 32;
  cfg.dtype = DType::kF64;
  cfg.validate();
  return cfg;
}

// Finite differences need a model small enough to probe coordinate by
// coordinate; gamma/blocks/routing still come from the command line.
model::NetworkConfig tiny_fd_config(const Options& o) {
  model::NetworkConfig cfg;
  cfg.channels = 1;
  cfg.height = cfg.width = 8;
  cfg.classes = 2;
  cfg.stem_filters = 4;
  cfg.stem_kernel = 3;
  cfg.stem_stride = 1;
  cfg.primary_groups = 2;
  cfg.primary_dim = 2;
  cfg.primary_kernel = 3;
  cfg.primary_stride = 2;
  cfg.capsules_per_layer = 4;
  cfg.capsule_dim = 4;
  cfg.n_blocks = o.blocks;
  cfg.gamma = o.gamma;
  cfg.routing_iterations = o.routing_iters;
  cfg.recon_hidden1 = 8;
  cfg.recon_hidden2 = 8;
  // Heavier reconstruction weight than the training default so the decoder
  // gradients sit well above the finite-difference noise floor.
  cfg.lambda_recon = 0.05;
  cfg.variant = model::Variant::kMoCapsNet;
  cfg.mode = model::Mode::kStored;
  cfg.dtype = DType::kF64;
  cfg.validate();
  return cfg;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_resolved(const Options& o, const std::string& command) {
  std::filesystem::create_directories(o.out_dir);
  std::string path = o.out_dir + "/resolved_config.txt";
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "command=" << command << "\n"
     << "dataset=" << o.dataset << "\n"
     << "data_dir=" << o.data_dir << "\n"
     << "variant=" << o.variant << "\n"
     << "blocks=" << o.blocks << "\n"
     << "gamma=" << fmt(o.gamma) << "\n"
     << "capsules=" << o.capsules << "\n"
     << "capsule_dim=" << o.capsule_dim << "\n"
     << "routing_iters=" << o.routing_iters << "\n"
     << "batch_size=" << o.batch_size << "\n"
     << "lr=" << fmt(o.lr) << "\n"
     << "lr_decay=" << fmt(o.lr_decay) << "\n"
     << "epochs=" << o.epochs << "\n"
     << "lambda_recon=" << fmt(o.lambda_recon) << "\n"
     << "seed=" << o.seed << "\n"
     << "dtype=" << o.dtype << "\n"
     << "mode=" << o.mode << "\n"
     << "out_dir=" << o.out_dir << "\n";
  os.flush();
  if (!os) throw Error("write failed for " + path);
}

std::string resolve_data_dir(const Options& o) {
  if (!o.data_dir.empty()) return o.data_dir;
  if (const char* env = std::getenv("MOCAPS_DATA_DIR"))
    if (*env) return env;
  return "data";
}

void require_file(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw data::DataError("required data file missing: " + path +
                          " (point --data_dir or MOCAPS_DATA_DIR at it)");
}

std::pair<data::Dataset, data::Dataset> load_datasets(const Options& o) {
  if (o.dataset == "synthetic") {
    Rng rng = Rng::for_stream(o.seed, 3);
    data::Dataset train = data::synthetic(10, 1024, 28, rng);
    data::Dataset test = data::synthetic(10, 256, 28, rng);
    return {std::move(train), std::move(test)};
  }
  std::string dir = resolve_data_dir(o);
  if (o.dataset == "mnist") {
    std::string ti = dir + "/train-images-idx3-ubyte";
    std::string tl = dir + "/train-labels-idx1-ubyte";
    std::string ei = dir + "/t10k-images-idx3-ubyte";
    std::string el = dir + "/t10k-labels-idx1-ubyte";
    for (const std::string& p : {ti, tl, ei, el}) require_file(p);
    return {data::load_idx(ti, tl), data::load_idx(ei, el)};
  }
  return {data::load_cifar10(dir, true), data::load_cifar10(dir, false)};
}

std::vector<int> depth_sweep(int max_blocks) {
  std::vector<int> depths;
  for (int d = 1; d <= max_blocks; ++d) depths.push_back(d);
  return depths;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << content;
  os.flush();
  if (!os) throw Error("write failed for " + path);
}

int run_train(const Options& o) {
  model::NetworkConfig cfg = make_config(o);
  auto [train_set, test_set] = load_datasets(o);
  Rng prng = Rng::for_stream(o.seed, 0);
  model::ModelParams params = model::init_params(cfg, prng);
  std::printf("%s %s mode, %d block(s), %lld params, train %lld / test %lld\n",
              model::variant_name(cfg.variant), model::mode_name(cfg.mode),
              cfg.n_blocks, (long long)params.total_elements(),
              (long long)train_set.size(), (long long)test_set.size());

  optim::TrainOptions topt;
  topt.epochs = o.epochs;
  topt.batch_size = o.batch_size;
  topt.schedule = {o.lr, o.lr_decay};
  topt.seed = o.seed;
  optim::MetricsCsv csv(o.out_dir + "/metrics.csv");
  optim::TrainReport rep =
      optim::train(cfg, params, train_set, test_set, topt, &csv);
  for (const optim::EpochRow& r : rep.rows)
    std::printf(
        "epoch %d  lr %.6g  train_loss %.6f  test_acc %.4f  %.1fs  peak %llu "
        "bytes\n",
        r.epoch, r.lr, r.train_loss, r.test_acc, r.epoch_seconds,
        (unsigned long long)r.peak_activation_bytes);
  std::string ckpt = o.out_dir + "/model.mocp";
  model::checkpoint_save(params, ckpt);
  std::printf("wrote %s and %s/metrics.csv\n", ckpt.c_str(),
              o.out_dir.c_str());
  return 0;
}

int run_eval(const Options& o) {
  model::NetworkConfig cfg = make_config(o);
  model::ModelParams params = model::checkpoint_load(o.checkpoint, cfg.dtype);
  model::validate_params(cfg, params);
  auto [train_set, test_set] = load_datasets(o);
  (void)train_set;
  double acc = optim::evaluate(cfg, params, test_set, o.batch_size, {});
  std::printf("test accuracy: %.4f (%lld samples)\n", acc,
              (long long)test_set.size());
  return 0;
}

int run_bench_memory(const Options& o, bool batch_from_user) {
  model::NetworkConfig cfg = make_config(o);
  int64_t bs = batch_from_user ? o.batch_size : 32;
  std::vector<int> depths = depth_sweep(o.blocks);
  bench::MemoryReport rep = bench::measure_memory(
      cfg, depths, {model::Mode::kStored, model::Mode::kReversible}, bs,
      o.seed);
  std::fputs(bench::memory_table(rep).c_str(), stdout);
  write_text(o.out_dir + "/memory.csv", bench::memory_csv(rep));
  if (o.emit_plot) {
    for (model::Mode m : {model::Mode::kStored, model::Mode::kReversible}) {
      std::vector<double> x, y;
      for (const bench::MemoryRow& r : rep.rows)
        if (r.mode == m) {
          x.push_back(r.n_blocks);
          y.push_back(static_cast<double>(r.peak_bytes));
        }
      bench::write_series(
          o.out_dir + "/memory_" + model::mode_name(m) + ".csv",
          "n_blocks,peak_bytes", x, y);
    }
  }
  return 0;
}

int run_bench_time(const Options& o, bool batch_from_user) {
  model::NetworkConfig cfg = make_config(o);
  int64_t bs = batch_from_user ? o.batch_size : 32;
  std::vector<int> depths = depth_sweep(o.blocks);
  bench::TimeReport rep = bench::measure_time(
      cfg, depths, {model::Mode::kStored, model::Mode::kReversible},
      o.repeats, bs, o.seed);
  std::fputs(bench::time_table(rep).c_str(), stdout);
  write_text(o.out_dir + "/time.csv", bench::time_csv(rep));
  if (o.emit_plot) {
    for (model::Mode m : {model::Mode::kStored, model::Mode::kReversible}) {
      std::vector<double> x, y;
      for (const bench::TimeRow& r : rep.rows)
        if (r.mode == m) {
          x.push_back(r.n_blocks);
          y.push_back(r.train_median_s);
        }
      bench::write_series(o.out_dir + "/time_" + model::mode_name(m) + ".csv",
                          "n_blocks,train_median_s", x, y);
    }
  }
  return 0;
}

int run_check_invert(const Options& o) {
  if (o.gamma == 0)
    throw UsageError("gamma = 0 is not invertible; pick gamma in (0, 1]");
  model::NetworkConfig cfg = make_config(o);
  bench::InvertReport rep =
      bench::invert_check(cfg, depth_sweep(o.blocks), o.trials_invert,
                          o.gamma, cfg.dtype, o.seed);
  std::fputs(bench::invert_table(rep).c_str(), stdout);
  if (rep.worst <= o.tol_invert) {
    std::printf("OK: worst round-trip error %.3e <= %.3e\n", rep.worst,
                o.tol_invert);
    return 0;
  }
  std::printf("FAILED: worst round-trip error %.3e > %.3e\n", rep.worst,
              o.tol_invert);
  return 3;
}

int run_check_grad(const Options& o) {
  model::NetworkConfig cfg = tiny_fd_config(o);
  Rng prng = Rng::for_stream(o.seed, 0);
  std::printf("tiny model: %lld params, central differences, step %.3g\n",
              (long long)model::init_params(cfg, prng).total_elements(),
              o.fd_step);
  bench::FdReport rep = bench::fd_check_model(cfg, 2, o.seed, o.fd_step, 0);
  std::printf("checked %lld coordinates, max rel err %.3e (worst %s[%lld])\n",
              (long long)rep.coords_checked, rep.max_rel_err,
              rep.worst_param.c_str(), (long long)rep.worst_coord);
  if (rep.max_rel_err <= o.tol_grad) {
    std::printf("OK: %.3e <= %.3e\n", rep.max_rel_err, o.tol_grad);
    return 0;
  }
  std::printf("FAILED: %.3e > %.3e\n", rep.max_rel_err, o.tol_grad);
  return 3;
}

int run_check_equivalence(const Options& o) {
  model::NetworkConfig cfg = verify_config(o);
  bench::EquivReport rep = bench::equivalence_check(
      cfg, depth_sweep(o.blocks), o.trials_equiv, o.seed, true);
  std::fputs(bench::equiv_table(rep).c_str(), stdout);
  if (rep.worst <= o.tol_equiv) {
    std::printf("OK: worst gradient mismatch %.3e <= %.3e\n", rep.worst,
                o.tol_equiv);
    return 0;
  }
  std::printf("FAILED: worst gradient mismatch %.3e > %.3e\n", rep.worst,
              o.tol_equiv);
  return 3;
}

int run(int argc, char** argv) {
  Options o;

  // The config file seeds the defaults, so explicit flags override it.
  std::string config_path;
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) config_path = argv[i + 1];
    else if (arg.rfind("--config=", 0) == 0) config_path = arg.substr(9);
  }
  std::map<std::string, std::string> file_kv;
  if (!config_path.empty()) {
    file_kv = read_config_file(config_path);
    apply_config(o, file_kv);
  }

  CLI::App app{"momentum-reversible residual capsule networks"};
  app.fallthrough();
  app.add_option("--config", o.config_file,
                 "flat key=value config file; command-line flags override it");
  app.add_option("--dataset", o.dataset, "synthetic | mnist | cifar10")
      ->capture_default_str();
  app.add_option("--data_dir", o.data_dir,
                 "dataset directory (default: $MOCAPS_DATA_DIR, then ./data)");
  app.add_option("--variant", o.variant, "mocapsnet | rescapsnet | capsnet")
      ->capture_default_str();
  app.add_option("--blocks", o.blocks,
                 "residual blocks; bench/check commands sweep 1..blocks")
      ->capture_default_str();
  app.add_option("--gamma", o.gamma, "velocity retention factor")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--capsules", o.capsules, "capsules per chain layer")
      ->capture_default_str();
  app.add_option("--capsule_dim", o.capsule_dim, "capsule dimensionality")
      ->capture_default_str();
  app.add_option("--routing_iters", o.routing_iters, "routing iterations")
      ->capture_default_str();
  app.add_option("--batch_size", o.batch_size,
                 "training batch size (bench commands default to 32)")
      ->capture_default_str();
  app.add_option("--lr", o.lr, "base learning rate")->capture_default_str();
  app.add_option("--lr_decay", o.lr_decay, "per-epoch lr decay factor")
      ->capture_default_str();
  app.add_option("--epochs", o.epochs, "training epochs")->capture_default_str();
  app.add_option("--lambda_recon", o.lambda_recon,
                 "reconstruction loss weight")
      ->capture_default_str();
  app.add_option("--seed", o.seed, "master seed")->capture_default_str();
  app.add_option("--dtype", o.dtype, "f32 | f64")->capture_default_str();
  app.add_option("--mode", o.mode, "reversible | stored")
      ->capture_default_str();
  app.add_option("--out_dir", o.out_dir,
                 "output directory (resolved_config.txt, metrics, ...)")
      ->capture_default_str();

  CLI::App* train =
      app.add_subcommand("train", "train; writes metrics.csv and model.mocp");
  CLI::App* eval =
      app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file to load")
      ->required();
  CLI::App* bmem = app.add_subcommand(
      "bench-memory", "peak activation bytes vs depth, stored vs reversible");
  bmem->add_flag("--emit-plot-data", o.emit_plot,
                 "also write per-mode x,y series files");
  CLI::App* btime = app.add_subcommand(
      "bench-time", "train-step and inference seconds vs depth");
  btime->add_option("--repeats", o.repeats, "timed repeats per cell")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  btime->add_flag("--emit-plot-data", o.emit_plot,
                  "also write per-mode x,y series files");
  CLI::App* cinv = app.add_subcommand(
      "check-invert", "momentum chain round-trip inversion error");
  cinv->add_option("--trials", o.trials_invert, "random trials per depth")
      ->capture_default_str();
  cinv->add_option("--tolerance", o.tol_invert,
                   "worst acceptable relative error")
      ->capture_default_str();
  CLI::App* cgrad = app.add_subcommand(
      "check-grad",
      "tape gradients vs central finite differences on a tiny model");
  cgrad->add_option("--step", o.fd_step, "finite-difference step")
      ->capture_default_str();
  cgrad->add_option("--tolerance", o.tol_grad,
                    "worst acceptable relative error")
      ->capture_default_str();
  CLI::App* cequiv = app.add_subcommand(
      "check-equivalence",
      "reversible vs stored gradients on a desk-scale float64 model");
  cequiv->add_option("--trials", o.trials_equiv, "random trials per depth")
      ->capture_default_str();
  cequiv->add_option("--tolerance", o.tol_equiv,
                     "worst acceptable relative error")
      ->capture_default_str();
  app.require_subcommand(0, 1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return 2;
  }
  validate_options(o);
  bool batch_from_user =
      app.count("--batch_size") > 0 || file_kv.count("batch_size") > 0;

  std::string cmd = app.get_subcommands()[0]->get_name();
  write_resolved(o, cmd);
  if (cmd == "train") return run_train(o);
  if (cmd == "eval") return run_eval(o);
  if (cmd == "bench-memory") return run_bench_memory(o, batch_from_user);
  if (cmd == "bench-time") return run_bench_time(o, batch_from_user);
  if (cmd == "check-invert") return run_check_invert(o);
  if (cmd == "check-grad") return run_check_grad(o);
  if (cmd == "check-equivalence") return run_check_equivalence(o);
  (void)train;
  throw UsageError("unknown command " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
