#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "mocaps/bench/memory_ledger.hpp"
#include "mocaps/errors.hpp"

namespace mocaps {

enum class DType : uint8_t { kF32, kF64 };

inline size_t dtype_size(DType d) { return d == DType::kF32 ? 4 : 8; }
const char* dtype_name(DType d);
DType dtype_from_name(const std::string& name);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kF32; }
template <>
constexpr DType dtype_of<double>() { return DType::kF64; }

// Reference-counted flat byte buffer. Registers itself with the memory
// ledger under the thread's ambient site on allocation and deregisters on
// destruction; retag() moves it between sites (tape saves and chain
// snapshots claim transient buffers this way).
class Storage {
 public:
  explicit Storage(size_t bytes);
  ~Storage();
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  std::byte* data() { return data_.get(); }
  const std::byte* data() const { return data_.get(); }
  size_t bytes() const { return bytes_; }
  bench::MemSite site() const { return site_; }
  void retag(bench::MemSite to);
  // Claims a scratch buffer for the tape/snapshot; buffers already owned by
  // a persistent site (parameters etc.) keep their tag.
  void claim_if_transient(bench::MemSite to);

 private:
  size_t bytes_;
  bench::MemSite site_;
  std::unique_ptr<std::byte[]> data_;
};

// Dense row-major n-dimensional array. Copying a Tensor shares the storage;
// clone() copies bytes. Kernels allocate a fresh tensor, fill it through
// mutable_data(), and return it; after that a tensor is treated as
// immutable (reshape shares storage, so writes would alias).
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int64_t> shape, DType dtype);  // uninitialized

  static Tensor zeros(std::vector<int64_t> shape, DType dtype = DType::kF32);
  static Tensor full(std::vector<int64_t> shape, double value,
                     DType dtype = DType::kF32);
  static Tensor scalar(double value, DType dtype = DType::kF64);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values,
                     DType dtype = DType::kF32);

  bool defined() const { return storage_ != nullptr; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;
  int64_t size() const;  // element count
  size_t bytes() const { return static_cast<size_t>(size()) * dtype_size(dtype_); }
  DType dtype() const { return dtype_; }
  std::string shape_str() const;

  template <typename T>
  const T* data() const {
    check_dtype(dtype_of<T>());
    return reinterpret_cast<const T*>(storage_->data());
  }
  template <typename T>
  T* mutable_data() {
    check_dtype(dtype_of<T>());
    return reinterpret_cast<T*>(storage_->data());
  }

  // Element access as double regardless of dtype; for tests and small code.
  double item() const;  // requires size() == 1
  double at(std::initializer_list<int64_t> index) const;
  double flat(int64_t i) const;
  void set_flat(int64_t i, double v);

  Tensor reshape(std::vector<int64_t> new_shape) const;  // shares storage
  Tensor astype(DType dtype) const;  // clones even if same dtype
  Tensor clone() const;

  const std::shared_ptr<Storage>& storage() const { return storage_; }
  bool same_storage(const Tensor& other) const {
    return storage_ == other.storage_;
  }

 private:
  void check_dtype(DType expected) const;

  std::vector<int64_t> shape_;
  DType dtype_ = DType::kF32;
  std::shared_ptr<Storage> storage_;
};

int64_t shape_size(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);
void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

// Test/verification helpers.
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);
// max |a-b| / max(max|a|, max|b|, floor); 0 for two all-zero tensors.
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-30);
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace mocaps
