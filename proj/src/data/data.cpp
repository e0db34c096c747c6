#include "mocaps/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace mocaps::data {
namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  is.seekg(0, std::ios::end);
  std::streamoff size = is.tellg();
  is.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<size_t>(size));
  if (size > 0) {
    is.read(reinterpret_cast<char*>(buf.data()), size);
    if (!is) throw DataError("read of '" + path + "' failed");
  }
  return buf;
}

uint32_t be32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void push_be32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

std::string hex32(uint32_t v) {
  char b[16];
  std::snprintf(b, sizeof b, "0x%08x", v);
  return b;
}

void write_file(const std::string& path,
                const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  os.close();
  if (!os) throw DataError("write to '" + path + "' failed");
}

int max_label_plus_one(const std::vector<int>& labels) {
  int m = -1;
  for (int l : labels) m = std::max(m, l);
  return m + 1;
}

// Crops (when offsets are given) and normalizes one batch.
template <typename TIn, typename TOut>
void preprocess_fill(const Tensor& images, Tensor& out, bool do_crop,
                     int64_t pad, const std::vector<int64_t>& dy,
                     const std::vector<int64_t>& dx, double eps) {
  const int64_t b_count = images.dim(0), c_count = images.dim(1),
                h = images.dim(2), w = images.dim(3);
  const int64_t ch = out.dim(2), cw = out.dim(3);
  const TIn* src = images.data<TIn>();
  TOut* dst = out.mutable_data<TOut>();
  const int64_t in_img = c_count * h * w, out_img = c_count * ch * cw;
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < b_count; ++b) {
    const TIn* sp = src + b * in_img;
    TOut* dp = dst + b * out_img;
    if (do_crop) {
      for (int64_t c = 0; c < c_count; ++c)
        for (int64_t y = 0; y < ch; ++y)
          for (int64_t x = 0; x < cw; ++x) {
            int64_t sy = y + dy[b] - pad, sx = x + dx[b] - pad;
            double v = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                           ? static_cast<double>(sp[(c * h + sy) * w + sx])
                           : 0.0;
            dp[(c * ch + y) * cw + x] = static_cast<TOut>(v);
          }
    } else {
      for (int64_t i = 0; i < out_img; ++i)
        dp[i] = static_cast<TOut>(sp[i]);
    }
    double sum = 0;
    for (int64_t i = 0; i < out_img; ++i) sum += static_cast<double>(dp[i]);
    double mean = sum / static_cast<double>(out_img);
    double ss = 0;
    for (int64_t i = 0; i < out_img; ++i) {
      double d = static_cast<double>(dp[i]) - mean;
      ss += d * d;
    }
    double denom = std::sqrt(ss / static_cast<double>(out_img)) + eps;
    for (int64_t i = 0; i < out_img; ++i)
      dp[i] = static_cast<TOut>((static_cast<double>(dp[i]) - mean) / denom);
  }
}

}  // namespace

Tensor preprocess(const Tensor& images, const PreprocessSpec& spec, Rng& rng,
                  bool train, DType out_dtype) {
  if (images.rank() != 4)
    throw ShapeError("preprocess: images must be [B,C,H,W], got " +
                     images.shape_str());
  if (spec.pad < 0) throw ValueError("preprocess: pad must be >= 0");
  const int64_t b_count = images.dim(0), h = images.dim(2), w = images.dim(3);
  const bool do_crop = train && spec.augment;
  int64_t ch = h, cw = w;
  if (do_crop && spec.crop > 0) ch = cw = spec.crop;
  if (do_crop && (ch > h + 2 * spec.pad || cw > w + 2 * spec.pad))
    throw ValueError("preprocess: crop side larger than the padded canvas");

  // Offsets are drawn up front, one (dy, dx) pair per image in batch order,
  // so the stream consumption is independent of the fill loop's schedule.
  std::vector<int64_t> dy(static_cast<size_t>(b_count), 0),
      dx(static_cast<size_t>(b_count), 0);
  if (do_crop)
    for (int64_t b = 0; b < b_count; ++b) {
      dy[static_cast<size_t>(b)] = rng.uniform_int(h + 2 * spec.pad - ch + 1);
      dx[static_cast<size_t>(b)] = rng.uniform_int(w + 2 * spec.pad - cw + 1);
    }

  Tensor out({b_count, images.dim(1), ch, cw}, out_dtype);
  if (images.dtype() == DType::kF32 && out_dtype == DType::kF32)
    preprocess_fill<float, float>(images, out, do_crop, spec.pad, dy, dx,
                                  spec.epsilon);
  else if (images.dtype() == DType::kF32 && out_dtype == DType::kF64)
    preprocess_fill<float, double>(images, out, do_crop, spec.pad, dy, dx,
                                   spec.epsilon);
  else if (images.dtype() == DType::kF64 && out_dtype == DType::kF32)
    preprocess_fill<double, float>(images, out, do_crop, spec.pad, dy, dx,
                                   spec.epsilon);
  else
    preprocess_fill<double, double>(images, out, do_crop, spec.pad, dy, dx,
                                    spec.epsilon);
  return out;
}

std::vector<Batch> batches(const Dataset& ds, int64_t batch_size, bool shuffle,
                           Rng& rng) {
  const int64_t n = ds.size();
  if (n == 0) throw DataError("batches: empty dataset");
  if (static_cast<int64_t>(ds.labels.size()) != n)
    throw DataError("batches: " + std::to_string(n) + " images but " +
                    std::to_string(ds.labels.size()) + " labels");
  if (batch_size < 1) throw ValueError("batches: batch_size must be >= 1");

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle)
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(rng.uniform_int(i + 1))]);

  bench::MemSiteScope site(bench::MemSite::kStatic);
  const size_t row_bytes = static_cast<size_t>(ds.images.dim(1)) *
                           static_cast<size_t>(ds.images.dim(2)) *
                           static_cast<size_t>(ds.images.dim(3)) *
                           dtype_size(ds.images.dtype());
  const std::byte* src = ds.images.storage()->data();
  std::vector<Batch> out;
  out.reserve(static_cast<size_t>((n + batch_size - 1) / batch_size));
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t b = std::min(batch_size, n - start);
    Batch batch;
    batch.images = Tensor({b, ds.images.dim(1), ds.images.dim(2),
                           ds.images.dim(3)},
                          ds.images.dtype());
    std::byte* dst = batch.images.storage()->data();
    batch.labels.resize(static_cast<size_t>(b));
    for (int64_t k = 0; k < b; ++k) {
      int64_t s = order[static_cast<size_t>(start + k)];
      std::memcpy(dst + static_cast<size_t>(k) * row_bytes,
                  src + static_cast<size_t>(s) * row_bytes, row_bytes);
      batch.labels[static_cast<size_t>(k)] =
          ds.labels[static_cast<size_t>(s)];
    }
    out.push_back(std::move(batch));
  }
  return out;
}

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::vector<unsigned char> ib = read_file(images_path);
  if (ib.size() < 16)
    throw DataError("'" + images_path + "' is too short for an IDX image header");
  uint32_t magic = be32(ib.data());
  if (magic != 0x00000803u)
    throw DataError("'" + images_path + "' has magic " + hex32(magic) +
                    ", expected 0x00000803");
  uint32_t n = be32(ib.data() + 4);
  uint32_t rows = be32(ib.data() + 8);
  uint32_t cols = be32(ib.data() + 12);
  size_t want = 16 + static_cast<size_t>(n) * rows * cols;
  if (ib.size() < want)
    throw DataError("'" + images_path + "' is truncated: " +
                    std::to_string(ib.size() - 16) + " pixel bytes, header promises " +
                    std::to_string(want - 16));
  if (ib.size() > want)
    throw DataError("'" + images_path + "' has " +
                    std::to_string(ib.size() - want) + " trailing bytes");

  std::vector<unsigned char> lb = read_file(labels_path);
  if (lb.size() < 8)
    throw DataError("'" + labels_path + "' is too short for an IDX label header");
  uint32_t lmagic = be32(lb.data());
  if (lmagic != 0x00000801u)
    throw DataError("'" + labels_path + "' has magic " + hex32(lmagic) +
                    ", expected 0x00000801");
  uint32_t ln = be32(lb.data() + 4);
  if (lb.size() < 8 + ln)
    throw DataError("'" + labels_path + "' is truncated: " +
                    std::to_string(lb.size() - 8) + " label bytes, header promises " +
                    std::to_string(ln));
  if (lb.size() > 8 + ln)
    throw DataError("'" + labels_path + "' has " +
                    std::to_string(lb.size() - 8 - ln) + " trailing bytes");
  if (ln != n)
    throw DataError("count mismatch: " + std::to_string(n) + " images in '" +
                    images_path + "' but " + std::to_string(ln) +
                    " labels in '" + labels_path + "'");

  bench::MemSiteScope site(bench::MemSite::kStatic);
  Dataset ds;
  ds.images = Tensor({n, 1, rows, cols}, DType::kF32);
  float* p = ds.images.mutable_data<float>();
  const int64_t count = ds.images.size();
  for (int64_t i = 0; i < count; ++i)
    p[i] = static_cast<float>(ib[16 + static_cast<size_t>(i)]);
  ds.labels.resize(ln);
  for (uint32_t i = 0; i < ln; ++i)
    ds.labels[i] = static_cast<int>(lb[8 + i]);
  ds.class_count = max_label_plus_one(ds.labels);
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path) {
  if (!ds.images.defined() || ds.images.rank() != 4 || ds.images.dim(1) != 1)
    throw DataError("save_idx writes single-channel [N,1,H,W] images");
  if (ds.size() != static_cast<int64_t>(ds.labels.size()))
    throw DataError("save_idx: image/label count mismatch");

  std::vector<unsigned char> ib;
  ib.reserve(16 + static_cast<size_t>(ds.images.size()));
  push_be32(ib, 0x00000803u);
  push_be32(ib, static_cast<uint32_t>(ds.images.dim(0)));
  push_be32(ib, static_cast<uint32_t>(ds.images.dim(2)));
  push_be32(ib, static_cast<uint32_t>(ds.images.dim(3)));
  for (int64_t i = 0; i < ds.images.size(); ++i) {
    double v = ds.images.flat(i);
    if (v != std::floor(v) || v < 0 || v > 255)
      throw DataError("save_idx: pixel " + std::to_string(i) +
                      " is not an integer in [0, 255]");
    ib.push_back(static_cast<unsigned char>(v));
  }
  write_file(images_path, ib);

  std::vector<unsigned char> lb;
  lb.reserve(8 + ds.labels.size());
  push_be32(lb, 0x00000801u);
  push_be32(lb, static_cast<uint32_t>(ds.labels.size()));
  for (int l : ds.labels) {
    if (l < 0 || l > 255)
      throw DataError("save_idx: label " + std::to_string(l) +
                      " does not fit a byte");
    lb.push_back(static_cast<unsigned char>(l));
  }
  write_file(labels_path, lb);
}

Dataset load_cifar10_bin(const std::string& path) {
  std::vector<unsigned char> buf = read_file(path);
  constexpr size_t kRecord = 3073;
  if (buf.empty() || buf.size() % kRecord != 0)
    throw DataError("'" + path + "' size " + std::to_string(buf.size()) +
                    " is not a multiple of the 3073-byte record");
  const int64_t n = static_cast<int64_t>(buf.size() / kRecord);
  bench::MemSiteScope site(bench::MemSite::kStatic);
  Dataset ds;
  ds.images = Tensor({n, 3, 32, 32}, DType::kF32);
  ds.labels.resize(static_cast<size_t>(n));
  ds.class_count = 10;
  float* p = ds.images.mutable_data<float>();
  for (int64_t i = 0; i < n; ++i) {
    const unsigned char* rec = buf.data() + static_cast<size_t>(i) * kRecord;
    if (rec[0] > 9)
      throw DataError("'" + path + "' record " + std::to_string(i) +
                      " has label " + std::to_string(rec[0]));
    ds.labels[static_cast<size_t>(i)] = rec[0];
    float* img = p + i * 3072;
    for (int64_t j = 0; j < 3072; ++j)
      img[j] = static_cast<float>(rec[1 + j]);
  }
  return ds;
}

Dataset load_cifar10(const std::string& dir, bool train) {
  std::vector<std::string> files;
  if (train)
    for (int i = 1; i <= 5; ++i)
      files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
  else
    files.push_back(dir + "/test_batch.bin");

  std::vector<Dataset> parts;
  int64_t total = 0;
  for (const std::string& f : files) {
    parts.push_back(load_cifar10_bin(f));
    total += parts.back().size();
  }
  if (parts.size() == 1) return std::move(parts.front());

  bench::MemSiteScope site(bench::MemSite::kStatic);
  Dataset ds;
  ds.images = Tensor({total, 3, 32, 32}, DType::kF32);
  ds.labels.reserve(static_cast<size_t>(total));
  ds.class_count = 10;
  float* p = ds.images.mutable_data<float>();
  for (const Dataset& part : parts) {
    std::memcpy(p, part.images.data<float>(),
                static_cast<size_t>(part.images.size()) * sizeof(float));
    p += part.images.size();
    ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
  }
  return ds;
}

Dataset synthetic(int classes, int64_t n, int64_t size, Rng& rng) {
  if (classes < 2) throw ValueError("synthetic: classes must be >= 2");
  if (n < 1) throw ValueError("synthetic: n must be >= 1");
  if (size < 8) throw ValueError("synthetic: size must be >= 8");

  bench::MemSiteScope site(bench::MemSite::kStatic);
  Dataset ds;
  ds.images = Tensor({n, 1, size, size}, DType::kF32);
  ds.labels.resize(static_cast<size_t>(n));
  ds.class_count = classes;
  float* p = ds.images.mutable_data<float>();

  const double half_len = 0.38 * static_cast<double>(size);
  const double half_thick = 1.1;
  const double pi = 3.14159265358979323846;
  for (int64_t i = 0; i < n; ++i) {
    int label = static_cast<int>(i % classes);
    ds.labels[static_cast<size_t>(i)] = label;
    double theta = pi * label / classes;
    double ux = std::cos(theta), uy = std::sin(theta);
    // Draw order per sample: dy, dx jitter, then per-pixel noise row-major.
    double cy = (size - 1) / 2.0 + static_cast<double>(rng.uniform_int(3) - 1);
    double cx = (size - 1) / 2.0 + static_cast<double>(rng.uniform_int(3) - 1);
    float* img = p + i * size * size;
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double px = x - cx, py = y - cy;
        double along = px * ux + py * uy;
        double across = std::abs(-px * uy + py * ux);
        double v = (std::abs(along) <= half_len && across <= half_thick)
                       ? 255.0
                       : 0.0;
        v += rng.uniform() * 30.0;
        img[y * size + x] = static_cast<float>(std::floor(std::min(v, 255.0)));
      }
  }
  return ds;
}

double centroid_accuracy(const Dataset& train, const Dataset& test) {
  if (train.size() == 0 || test.size() == 0)
    throw DataError("centroid_accuracy: empty dataset");
  if (train.class_count < 1 || train.class_count != test.class_count)
    throw DataError("centroid_accuracy: class counts disagree");
  const int64_t pix = train.images.size() / train.size();
  if (pix != test.images.size() / test.size())
    throw DataError("centroid_accuracy: image geometry disagrees");

  const int k = train.class_count;
  std::vector<double> centroid(static_cast<size_t>(k) * pix, 0.0);
  std::vector<int64_t> count(static_cast<size_t>(k), 0);
  for (int64_t i = 0; i < train.size(); ++i) {
    int c = train.labels[static_cast<size_t>(i)];
    double* cp = centroid.data() + static_cast<size_t>(c) * pix;
    for (int64_t j = 0; j < pix; ++j)
      cp[j] += train.images.flat(i * pix + j);
    ++count[static_cast<size_t>(c)];
  }
  for (int c = 0; c < k; ++c) {
    if (count[static_cast<size_t>(c)] == 0) continue;
    double* cp = centroid.data() + static_cast<size_t>(c) * pix;
    for (int64_t j = 0; j < pix; ++j)
      cp[j] /= static_cast<double>(count[static_cast<size_t>(c)]);
  }

  int64_t hits = 0;
  for (int64_t i = 0; i < test.size(); ++i) {
    int best = 0;
    double best_d = 0;
    for (int c = 0; c < k; ++c) {
      const double* cp = centroid.data() + static_cast<size_t>(c) * pix;
      double d = 0;
      for (int64_t j = 0; j < pix; ++j) {
        double diff = test.images.flat(i * pix + j) - cp[j];
        d += diff * diff;
      }
      if (c == 0 || d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (best == test.labels[static_cast<size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

}  // namespace mocaps::data
