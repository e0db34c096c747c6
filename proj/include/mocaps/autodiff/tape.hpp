#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mocaps/tensor/kernels.hpp"
#include "mocaps/tensor/tensor.hpp"

namespace mocaps::autodiff {

// Raised when an op has no backward rule (e.g. max-reduce on the tape).
struct UnsupportedOpError : Error {
  using Error::Error;
};
struct MissingGradientError : Error {
  using Error::Error;
};

// A tensor plus its slot on a tape. id == -1 means untracked: constants,
// results computed while the tape is paused, and anything produced by the
// plain kernel layer.
struct Value {
  int32_t id = -1;
  Tensor data;
  bool tracked() const { return id >= 0; }
};

// Parameter-name -> gradient tensor. Accumulates across backward calls, which
// the two-stage reversible backward relies on.
class GradMap {
 public:
  void accumulate(const std::string& name, const Tensor& g);
  const Tensor* find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;  // MissingGradientError
  size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  void clear() { grads_.clear(); }

 private:
  std::map<std::string, Tensor> grads_;
};

// Define-by-run reverse-mode tape. Each op computes its output through the
// kernel layer and, when recording, pushes a node whose closure captures just
// the operands its backward rule needs (captured buffers are retagged to the
// tape's ledger site). backward() walks nodes in reverse, freeing each
// intermediate gradient as soon as its node is processed.
class Tape {
 public:
  enum class Mode { kRecord, kPause };

  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const { return mode_; }
  size_t node_count() const { return nodes_.size(); }

  // Runs ops without recording for the scope's lifetime.
  class PauseScope {
   public:
    explicit PauseScope(Tape& t) : tape_(t), prev_(t.mode_) {
      t.mode_ = Mode::kPause;
    }
    ~PauseScope() { tape_.mode_ = prev_; }

   private:
    Tape& tape_;
    Mode prev_;
  };

  // Tracked leaf; its gradient can be fetched via the backward watch list.
  Value input(const Tensor& t);
  // Tracked named leaf; gradients land in the GradMap under this name.
  // Registering the same name twice returns the original slot (and insists
  // on the same tensor).
  Value param(const std::string& name, const Tensor& t);
  static Value constant(const Tensor& t) { return Value{-1, t}; }

  // ---- primitives ----
  Value add(const Value& a, const Value& b);
  Value sub(const Value& a, const Value& b);
  Value mul(const Value& a, const Value& b);
  Value lincomb(double alpha, const Value& a, double beta, const Value& b);
  Value affine(const Value& a, double alpha, double beta);
  Value scale(const Value& a, double s) { return affine(a, s, 0.0); }
  Value matmul(const Value& a, const Value& b);
  Value dense(const Value& x, const Value& w, const Value& b);
  Value conv2d(const Value& x, const Value& w, const Value& b, int stride);
  Value relu(const Value& a);
  Value sigmoid(const Value& a);
  Value reshape(const Value& a, std::vector<int64_t> shape);
  Value primary_reshape(const Value& a, int64_t groups, int64_t caps_dim);
  Value squash(const Value& s);
  Value softmax_last(const Value& a);
  Value caps_norm(const Value& x);
  Value votes(const Value& u, const Value& w);
  Value weighted_sum(const Value& c, const Value& uhat);
  Value agreement(const Value& uhat, const Value& v);
  // Only kSum and kMean have backward rules; kMax/kL2Norm on the tape raise
  // UnsupportedOpError (evaluate those through the kernel layer instead).
  Value reduce(kernels::Reduce op, const Value& a, int axis);

  struct Seed {
    Value value;
    Tensor grad;
  };
  struct BackwardResult {
    // Gradients of watched values, keyed by value id; zeros when no path.
    std::map<int32_t, Tensor> watched;
  };
  // Seeds may target any tracked values; parameter gradients accumulate into
  // `grads`. May be called repeatedly (each call re-walks the whole tape).
  BackwardResult backward(const std::vector<Seed>& seeds, GradMap& grads,
                          const std::vector<Value>& watch = {});

 private:
  struct ValueEntry {
    std::vector<int64_t> shape;
    DType dtype;
    std::string param_name;  // empty unless a named parameter
    bool leaf = false;
  };
  // Fills grads[i] for inputs with needed[i]; untracked slots are skipped.
  using VjpFn = std::function<void(const Tensor& up,
                                   const std::vector<bool>& needed,
                                   std::vector<Tensor>& grads)>;
  struct Node {
    int32_t out;
    std::vector<int32_t> inputs;
    std::vector<bool> needed;
    VjpFn vjp;
  };

  int32_t new_value(const Tensor& t, bool leaf, const std::string& pname = "");
  bool recording(const Value& a) const;
  bool recording(const Value& a, const Value& b) const;
  bool recording(const Value& a, const Value& b, const Value& c) const;
  Value emit(Tensor out, std::vector<int32_t> inputs, VjpFn vjp);
  static Tensor saved(const Tensor& t);  // retags to the tape ledger site

  Mode mode_ = Mode::kRecord;
  std::vector<ValueEntry> values_;
  std::vector<Node> nodes_;
  std::map<std::string, int32_t> param_ids_;
};

// Records f over fresh input leaves; the spec-level "record" operation.
struct Recording {
  std::unique_ptr<Tape> tape;
  std::vector<Value> inputs;
  Value output;
};
template <typename Fn>
Recording record(Fn&& f, const std::vector<Tensor>& inputs) {
  Recording rec;
  rec.tape = std::make_unique<Tape>();
  rec.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) rec.inputs.push_back(rec.tape->input(t));
  rec.output = f(*rec.tape, rec.inputs);
  return rec;
}

}  // namespace mocaps::autodiff
