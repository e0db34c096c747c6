#include "mocaps/tensor/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace mocaps {

const char* dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

DType dtype_from_name(const std::string& name) {
  if (name == "f32" || name == "float32") return DType::kF32;
  if (name == "f64" || name == "float64") return DType::kF64;
  throw ValueError("unknown dtype '" + name + "' (expected f32 or f64)");
}

Storage::Storage(size_t bytes)
    : bytes_(bytes),
      site_(bench::current_mem_site()),
      data_(new std::byte[bytes]) {
  bench::MemoryLedger::instance().on_alloc(bytes_, site_);
}

Storage::~Storage() {
  bench::MemoryLedger::instance().on_free(bytes_, site_);
}

void Storage::retag(bench::MemSite to) {
  bench::MemoryLedger::instance().on_retag(bytes_, site_, to);
  site_ = to;
}

void Storage::claim_if_transient(bench::MemSite to) {
  if (site_ == bench::MemSite::kTransient) retag(to);
}

int64_t shape_size(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  int64_t n = shape_size(shape_);
  storage_ = std::make_shared<Storage>(static_cast<size_t>(n) * dtype_size(dtype_));
}

Tensor Tensor::zeros(std::vector<int64_t> shape, DType dtype) {
  Tensor t(std::move(shape), dtype);
  std::memset(t.storage_->data(), 0, t.storage_->bytes());
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  int64_t n = t.size();
  if (dtype == DType::kF32) {
    float* p = t.mutable_data<float>();
    float v = static_cast<float>(value);
    for (int64_t i = 0; i < n; ++i) p[i] = v;
  } else {
    double* p = t.mutable_data<double>();
    for (int64_t i = 0; i < n; ++i) p[i] = value;
  }
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) {
  return full({}, value, dtype);
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values,
                    DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (t.size() != static_cast<int64_t>(values.size()))
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values for shape " + t.shape_str());
  for (int64_t i = 0; i < t.size(); ++i) t.set_flat(i, values[static_cast<size_t>(i)]);
  return t;
}

int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank())
    throw ValueError("dim index " + std::to_string(i) + " out of range for rank " +
                     std::to_string(rank()));
  return shape_[static_cast<size_t>(i)];
}

int64_t Tensor::size() const { return shape_size(shape_); }

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void Tensor::check_dtype(DType expected) const {
  if (!defined()) throw ValueError("access to undefined tensor");
  if (dtype_ != expected)
    throw ShapeError(std::string("tensor is ") + dtype_name(dtype_) +
                     ", accessed as " + dtype_name(expected));
}

double Tensor::item() const {
  if (size() != 1)
    throw ShapeError("item() on tensor of size " + std::to_string(size()));
  return flat(0);
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != rank())
    throw ValueError("at(): " + std::to_string(index.size()) +
                     " indices for rank " + std::to_string(rank()));
  int64_t off = 0;
  int i = 0;
  for (int64_t idx : index) {
    int64_t d = shape_[static_cast<size_t>(i)];
    if (idx < 0 || idx >= d)
      throw ValueError("at(): index " + std::to_string(idx) +
                       " out of range for dim " + std::to_string(d));
    off = off * d + idx;
    ++i;
  }
  return flat(off);
}

double Tensor::flat(int64_t i) const {
  if (dtype_ == DType::kF32) return static_cast<double>(data<float>()[i]);
  return data<double>()[i];
}

void Tensor::set_flat(int64_t i, double v) {
  if (dtype_ == DType::kF32)
    mutable_data<float>()[i] = static_cast<float>(v);
  else
    mutable_data<double>()[i] = v;
}

Tensor Tensor::reshape(std::vector<int64_t> new_shape) const {
  if (shape_size(new_shape) != size())
    throw ShapeError("reshape " + shape_str() + " -> " +
                     shape_to_string(new_shape) + ": element count differs");
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.dtype_ = dtype_;
  t.storage_ = storage_;
  return t;
}

Tensor Tensor::astype(DType dtype) const {
  Tensor t(shape_, dtype);
  int64_t n = size();
  for (int64_t i = 0; i < n; ++i) t.set_flat(i, flat(i));
  return t;
}

Tensor Tensor::clone() const {
  Tensor t(shape_, dtype_);
  std::memcpy(t.storage_->data(), storage_->data(), storage_->bytes());
  // A copy plays the same role as its source; keep the ledger site so a
  // cloned parameter or dataset does not count as an activation.
  if (t.storage_->site() != storage_->site())
    t.storage_->retag(storage_->site());
  return t;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": dtype mismatch " +
                     dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.flat(i) - b.flat(i)));
  return m;
}

double max_abs(const Tensor& a) {
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.flat(i)));
  return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor) {
  double scale = std::max({max_abs(a), max_abs(b), floor});
  return max_abs_diff(a, b) / scale;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return std::memcmp(a.storage()->data(), b.storage()->data(),
                     a.storage()->bytes()) == 0;
}

}  // namespace mocaps
