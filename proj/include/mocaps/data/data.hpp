#pragma once

#include <string>
#include <vector>

#include "mocaps/tensor/rng.hpp"
#include "mocaps/tensor/tensor.hpp"

namespace mocaps::data {

struct DataError : Error {
  using Error::Error;
};

// Raw samples at rest: pixel values in [0, 255] as float32, one label per
// image. Preprocessing happens per batch, not here.
struct Dataset {
  Tensor images;            // [N,C,H,W]
  std::vector<int> labels;  // each in [0, class_count)
  int class_count = 0;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

struct PreprocessSpec {
  int pad = 2;        // zero padding on all borders before cropping
  int crop = 0;       // crop side; 0 means the original size
  bool augment = true;  // pad+random-crop on training batches
  double epsilon = 1e-8;  // stddev guard for constant images
};

// Training batches are zero-padded, randomly cropped (one dy then dx draw
// per image, in batch order), and normalized per image to zero mean and
// unit variance. Evaluation batches are only normalized; `rng` is untouched.
Tensor preprocess(const Tensor& images, const PreprocessSpec& spec, Rng& rng,
                  bool train, DType out_dtype = DType::kF32);

struct Batch {
  Tensor images;  // [b,C,H,W] raw pixels
  std::vector<int> labels;
};

// Splits an epoch into batches covering every sample exactly once; the
// final short batch is kept. Shuffling is a Fisher-Yates pass on `rng`.
std::vector<Batch> batches(const Dataset& ds, int64_t batch_size,
                           bool shuffle, Rng& rng);

// Big-endian IDX pair (image magic 0x00000803, label magic 0x00000801).
// Parsing is strict: truncated or oversized files and image/label count
// mismatches raise DataError. class_count = max label + 1.
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);
// Inverse of load_idx; pixel values must be integers in [0, 255].
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path);

// Standard CIFAR-10 binary batches (3073-byte records: label byte + 3072
// RGB bytes). Loads one .bin file.
Dataset load_cifar10_bin(const std::string& path);
// data_batch_1..5.bin concatenated (train=true) or test_batch.bin.
Dataset load_cifar10(const std::string& dir, bool train);

// Oriented-bar images: class k is a bar rotated by k*pi/classes about the
// (jittered) center, plus low-amplitude pixel noise. Labels are assigned
// round-robin, so the histogram is uniform to within one sample.
Dataset synthetic(int classes, int64_t n, int64_t size, Rng& rng);

// Mean image per class, L2-nearest-centroid classification accuracy; the
// learnability yardstick for synthetic data.
double centroid_accuracy(const Dataset& train, const Dataset& test);

}  // namespace mocaps::data
