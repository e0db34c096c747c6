#include "mocaps/autodiff/tape.hpp"

#include <optional>
#include <set>

namespace mocaps::autodiff {

namespace k = mocaps::kernels;

void GradMap::accumulate(const std::string& name, const Tensor& g) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    g.storage()->claim_if_transient(bench::MemSite::kGradient);
    grads_.emplace(name, g);
  } else {
    Tensor sum = k::add(it->second, g);
    sum.storage()->claim_if_transient(bench::MemSite::kGradient);
    it->second = sum;
  }
}

const Tensor* GradMap::find(const std::string& name) const {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& GradMap::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw MissingGradientError("no gradient for parameter '" + name + "'");
  return *t;
}

Tape::~Tape() = default;

int32_t Tape::new_value(const Tensor& t, bool leaf, const std::string& pname) {
  ValueEntry e;
  e.shape = t.shape();
  e.dtype = t.dtype();
  e.param_name = pname;
  e.leaf = leaf;
  values_.push_back(std::move(e));
  return static_cast<int32_t>(values_.size() - 1);
}

bool Tape::recording(const Value& a) const {
  return mode_ == Mode::kRecord && a.tracked();
}
bool Tape::recording(const Value& a, const Value& b) const {
  return mode_ == Mode::kRecord && (a.tracked() || b.tracked());
}
bool Tape::recording(const Value& a, const Value& b, const Value& c) const {
  return mode_ == Mode::kRecord && (a.tracked() || b.tracked() || c.tracked());
}

Tensor Tape::saved(const Tensor& t) {
  t.storage()->claim_if_transient(bench::MemSite::kTape);
  return t;
}

Value Tape::emit(Tensor out, std::vector<int32_t> inputs, VjpFn vjp) {
  int32_t out_id = new_value(out, false);
  Node n;
  n.out = out_id;
  n.needed.reserve(inputs.size());
  for (int32_t id : inputs) n.needed.push_back(id >= 0);
  n.inputs = std::move(inputs);
  n.vjp = std::move(vjp);
  nodes_.push_back(std::move(n));
  return Value{out_id, std::move(out)};
}

Value Tape::input(const Tensor& t) {
  if (!t.defined()) throw ValueError("Tape::input: undefined tensor");
  if (mode_ == Mode::kPause) return constant(t);
  return Value{new_value(t, true), t};
}

Value Tape::param(const std::string& name, const Tensor& t) {
  if (!t.defined()) throw ValueError("Tape::param: undefined tensor");
  if (name.empty()) throw ValueError("Tape::param: empty name");
  if (mode_ == Mode::kPause) return constant(t);
  auto it = param_ids_.find(name);
  if (it != param_ids_.end()) {
    const ValueEntry& e = values_[static_cast<size_t>(it->second)];
    if (e.shape != t.shape() || e.dtype != t.dtype())
      throw ValueError("Tape::param: '" + name +
                       "' re-registered with a different tensor");
    return Value{it->second, t};
  }
  int32_t id = new_value(t, true, name);
  param_ids_[name] = id;
  return Value{id, t};
}

// ---- primitives ----

Value Tape::add(const Value& a, const Value& b) {
  Tensor out = k::add(a.data, b.data);
  if (!recording(a, b)) return constant(out);
  return emit(std::move(out), {a.id, b.id},
              [](const Tensor& up, const std::vector<bool>& need,
                 std::vector<Tensor>& g) {
                if (need[0]) g[0] = up;
                if (need[1]) g[1] = up;
              });
}

Value Tape::sub(const Value& a, const Value& b) {
  Tensor out = k::sub(a.data, b.data);
  if (!recording(a, b)) return constant(out);
  return emit(std::move(out), {a.id, b.id},
              [](const Tensor& up, const std::vector<bool>& need,
                 std::vector<Tensor>& g) {
                if (need[0]) g[0] = up;
                if (need[1]) g[1] = k::scale(up, -1.0);
              });
}

Value Tape::mul(const Value& a, const Value& b) {
  Tensor out = k::mul(a.data, b.data);
  if (!recording(a, b)) return constant(out);
  Tensor cb = a.tracked() ? saved(b.data) : Tensor();
  Tensor ca = b.tracked() ? saved(a.data) : Tensor();
  return emit(std::move(out), {a.id, b.id},
              [ca, cb](const Tensor& up, const std::vector<bool>& need,
                       std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::mul(up, cb);
                if (need[1]) g[1] = k::mul(up, ca);
              });
}

Value Tape::lincomb(double alpha, const Value& a, double beta, const Value& b) {
  Tensor out = k::lincomb(alpha, a.data, beta, b.data);
  if (!recording(a, b)) return constant(out);
  return emit(std::move(out), {a.id, b.id},
              [alpha, beta](const Tensor& up, const std::vector<bool>& need,
                            std::vector<Tensor>& g) {
                // Unit coefficients pass the upstream through bit-exactly.
                if (need[0]) g[0] = alpha == 1.0 ? up : k::scale(up, alpha);
                if (need[1]) g[1] = beta == 1.0 ? up : k::scale(up, beta);
              });
}

Value Tape::affine(const Value& a, double alpha, double beta) {
  Tensor out = k::affine(a.data, alpha, beta);
  if (!recording(a)) return constant(out);
  return emit(std::move(out), {a.id},
              [alpha](const Tensor& up, const std::vector<bool>& need,
                      std::vector<Tensor>& g) {
                if (need[0]) g[0] = alpha == 1.0 ? up : k::scale(up, alpha);
              });
}

Value Tape::matmul(const Value& a, const Value& b) {
  Tensor out = k::matmul(a.data, b.data);
  if (!recording(a, b)) return constant(out);
  Tensor cb = a.tracked() ? saved(b.data) : Tensor();
  Tensor ca = b.tracked() ? saved(a.data) : Tensor();
  return emit(std::move(out), {a.id, b.id},
              [ca, cb](const Tensor& up, const std::vector<bool>& need,
                       std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::matmul(up, k::transpose_last2(cb));
                if (need[1]) g[1] = k::matmul(k::transpose_last2(ca), up);
              });
}

Value Tape::dense(const Value& x, const Value& w, const Value& b) {
  Tensor out = k::dense(x.data, w.data, b.data);
  if (!recording(x, w, b)) return constant(out);
  Tensor cw = x.tracked() ? saved(w.data) : Tensor();
  Tensor cx = w.tracked() ? saved(x.data) : Tensor();
  return emit(std::move(out), {x.id, w.id, b.id},
              [cx, cw](const Tensor& up, const std::vector<bool>& need,
                       std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::dense_vjp_x(up, cw);
                if (need[1]) g[1] = k::dense_vjp_w(up, cx);
                if (need[2]) g[2] = k::dense_vjp_b(up);
              });
}

Value Tape::conv2d(const Value& x, const Value& w, const Value& b, int stride) {
  Tensor out = k::conv2d(x.data, w.data, b.data, stride);
  if (!recording(x, w, b)) return constant(out);
  int64_t H = x.data.dim(2), W = x.data.dim(3);
  int64_t KH = w.data.dim(2), KW = w.data.dim(3);
  Tensor cw = x.tracked() ? saved(w.data) : Tensor();
  Tensor cx = w.tracked() ? saved(x.data) : Tensor();
  return emit(std::move(out), {x.id, w.id, b.id},
              [cx, cw, stride, H, W, KH, KW](const Tensor& up,
                                             const std::vector<bool>& need,
                                             std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::conv2d_vjp_x(up, cw, stride, H, W);
                if (need[1]) g[1] = k::conv2d_vjp_w(up, cx, stride, KH, KW);
                if (need[2]) g[2] = k::conv2d_vjp_b(up);
              });
}

Value Tape::relu(const Value& a) {
  Tensor out = k::relu(a.data);
  if (!recording(a)) return constant(out);
  Tensor cx = saved(a.data);
  return emit(std::move(out), {a.id},
              [cx](const Tensor& up, const std::vector<bool>& need,
                   std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::relu_vjp(up, cx);
              });
}

Value Tape::sigmoid(const Value& a) {
  Tensor out = k::sigmoid(a.data);
  if (!recording(a)) return constant(out);
  Tensor cy = saved(out);
  return emit(std::move(out), {a.id},
              [cy](const Tensor& up, const std::vector<bool>& need,
                   std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::sigmoid_vjp(up, cy);
              });
}

Value Tape::reshape(const Value& a, std::vector<int64_t> shape) {
  Tensor out = a.data.reshape(std::move(shape));
  if (!recording(a)) return constant(out);
  std::vector<int64_t> in_shape = a.data.shape();
  return emit(std::move(out), {a.id},
              [in_shape](const Tensor& up, const std::vector<bool>& need,
                         std::vector<Tensor>& g) {
                if (need[0]) g[0] = up.reshape(in_shape);
              });
}

Value Tape::primary_reshape(const Value& a, int64_t groups, int64_t caps_dim) {
  Tensor out = k::primary_reshape(a.data, groups, caps_dim);
  if (!recording(a)) return constant(out);
  int64_t h = a.data.dim(2), w = a.data.dim(3);
  return emit(std::move(out), {a.id},
              [groups, caps_dim, h, w](const Tensor& up,
                                       const std::vector<bool>& need,
                                       std::vector<Tensor>& g) {
                if (need[0])
                  g[0] = k::primary_reshape_vjp(up, groups, caps_dim, h, w);
              });
}

Value Tape::squash(const Value& s) {
  Tensor out = k::squash(s.data);
  if (!recording(s)) return constant(out);
  Tensor cs = saved(s.data);
  return emit(std::move(out), {s.id},
              [cs](const Tensor& up, const std::vector<bool>& need,
                   std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::squash_vjp(up, cs);
              });
}

Value Tape::softmax_last(const Value& a) {
  Tensor out = k::softmax_last(a.data);
  if (!recording(a)) return constant(out);
  Tensor cy = saved(out);
  return emit(std::move(out), {a.id},
              [cy](const Tensor& up, const std::vector<bool>& need,
                   std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::softmax_last_vjp(up, cy);
              });
}

Value Tape::caps_norm(const Value& x) {
  Tensor out = k::caps_norm(x.data);
  if (!recording(x)) return constant(out);
  Tensor cx = saved(x.data);
  return emit(std::move(out), {x.id},
              [cx](const Tensor& up, const std::vector<bool>& need,
                   std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::caps_norm_vjp(up, cx);
              });
}

Value Tape::votes(const Value& u, const Value& w) {
  Tensor out = k::votes(u.data, w.data);
  if (!recording(u, w)) return constant(out);
  Tensor cw = u.tracked() ? saved(w.data) : Tensor();
  Tensor cu = w.tracked() ? saved(u.data) : Tensor();
  return emit(std::move(out), {u.id, w.id},
              [cu, cw](const Tensor& up, const std::vector<bool>& need,
                       std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::votes_vjp_u(up, cw);
                if (need[1]) g[1] = k::votes_vjp_w(up, cu);
              });
}

Value Tape::weighted_sum(const Value& c, const Value& uhat) {
  Tensor out = k::weighted_sum(c.data, uhat.data);
  if (!recording(c, uhat)) return constant(out);
  Tensor cuhat = c.tracked() ? saved(uhat.data) : Tensor();
  Tensor cc = uhat.tracked() ? saved(c.data) : Tensor();
  return emit(std::move(out), {c.id, uhat.id},
              [cc, cuhat](const Tensor& up, const std::vector<bool>& need,
                          std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::agreement(cuhat, up);
                if (need[1]) g[1] = k::outer_bij_bjo(cc, up);
              });
}

Value Tape::agreement(const Value& uhat, const Value& v) {
  Tensor out = k::agreement(uhat.data, v.data);
  if (!recording(uhat, v)) return constant(out);
  Tensor cv = uhat.tracked() ? saved(v.data) : Tensor();
  Tensor cuhat = v.tracked() ? saved(uhat.data) : Tensor();
  return emit(std::move(out), {uhat.id, v.id},
              [cuhat, cv](const Tensor& up, const std::vector<bool>& need,
                          std::vector<Tensor>& g) {
                if (need[0]) g[0] = k::outer_bij_bjo(up, cv);
                if (need[1]) g[1] = k::weighted_sum(up, cuhat);
              });
}

Value Tape::reduce(kernels::Reduce op, const Value& a, int axis) {
  if (op != kernels::Reduce::kSum && op != kernels::Reduce::kMean) {
    if (mode_ == Mode::kRecord && a.tracked())
      throw UnsupportedOpError(
          "reduce: only sum and mean have backward rules on the tape; "
          "run max/l2norm through the kernel layer");
  }
  Tensor out = k::reduce(op, a.data, axis);
  if (!recording(a)) return constant(out);
  int norm_axis = axis < 0 ? axis + a.data.rank() : axis;
  int64_t extent = a.data.dim(norm_axis);
  bool mean = op == kernels::Reduce::kMean;
  return emit(std::move(out), {a.id},
              [norm_axis, extent, mean](const Tensor& up,
                                        const std::vector<bool>& need,
                                        std::vector<Tensor>& g) {
                if (!need[0]) return;
                Tensor b = k::broadcast_axis(up, norm_axis, extent);
                g[0] = mean ? k::scale(b, 1.0 / static_cast<double>(extent)) : b;
              });
}

// ---- backward ----

Tape::BackwardResult Tape::backward(const std::vector<Seed>& seeds,
                                    GradMap& grads,
                                    const std::vector<Value>& watch) {
  if (seeds.empty()) throw ValueError("backward: no seeds given");
  std::vector<std::optional<Tensor>> g(values_.size());
  for (const Seed& s : seeds) {
    if (!s.value.tracked())
      throw ValueError("backward: seed targets an untracked value");
    const ValueEntry& e = values_[static_cast<size_t>(s.value.id)];
    if (s.grad.shape() != e.shape || s.grad.dtype() != e.dtype)
      throw ShapeError("backward: seed gradient " + s.grad.shape_str() +
                       " does not match value " + shape_to_string(e.shape));
    auto& slot = g[static_cast<size_t>(s.value.id)];
    slot = slot.has_value() ? k::add(*slot, s.grad) : s.grad;
  }
  std::set<int32_t> watch_ids;
  for (const Value& w : watch) {
    if (!w.tracked())
      throw ValueError("backward: watch entry is not a tracked value");
    watch_ids.insert(w.id);
  }

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const Node& n = *it;
    auto& upstream = g[static_cast<size_t>(n.out)];
    if (!upstream.has_value()) continue;
    std::vector<Tensor> ig(n.inputs.size());
    n.vjp(*upstream, n.needed, ig);
    for (size_t i = 0; i < n.inputs.size(); ++i) {
      int32_t id = n.inputs[i];
      if (id < 0 || !ig[i].defined()) continue;
      auto& slot = g[static_cast<size_t>(id)];
      slot = slot.has_value() ? k::add(*slot, ig[i]) : ig[i];
    }
    // Free the intermediate gradient right away unless someone watches it.
    if (!watch_ids.count(n.out)) upstream.reset();
  }

  for (size_t id = 0; id < values_.size(); ++id) {
    if (!values_[id].param_name.empty() && g[id].has_value())
      grads.accumulate(values_[id].param_name, *g[id]);
  }
  BackwardResult res;
  for (const Value& w : watch) {
    const auto& slot = g[static_cast<size_t>(w.id)];
    if (slot.has_value())
      res.watched[w.id] = *slot;
    else
      res.watched[w.id] = Tensor::zeros(values_[static_cast<size_t>(w.id)].shape,
                                        values_[static_cast<size_t>(w.id)].dtype);
  }
  return res;
}

}  // namespace mocaps::autodiff
