#include "mocaps/autodiff/grad_check.hpp"

#include <cmath>
#include <sstream>

namespace mocaps::autodiff {

namespace {

double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  Tape::PauseScope pause(tape);
  std::vector<Value> vals;
  vals.reserve(inputs.size());
  for (const Tensor& t : inputs) vals.push_back(Tape::constant(t));
  Value out = f(tape, vals);
  return out.data.item();
}

double central_diff(const ScalarFn& f, std::vector<Tensor>& inputs, size_t i,
                    int64_t j, double h) {
  double orig = inputs[i].flat(j);
  inputs[i].set_flat(j, orig + h);
  double fp = eval_scalar(f, inputs);
  inputs[i].set_flat(j, orig - h);
  double fm = eval_scalar(f, inputs);
  inputs[i].set_flat(j, orig);
  return (fp - fm) / (2 * h);
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << ": max_rel_err=" << max_rel_err << " over "
     << coords_checked << " coords, " << failures.size() << " failures, "
     << warnings.size() << " warnings";
  return os.str();
}

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           double tolerance, double step, double floor,
                           int64_t max_coords_per_input) {
  for (const Tensor& t : inputs)
    if (t.dtype() != DType::kF64)
      throw ValueError("grad_check: inputs must be f64");

  // Analytic pass: record once, backward once, watch every input leaf.
  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.input(t));
  Value out = f(tape, leaves);
  if (out.data.size() != 1)
    throw ValueError("grad_check: f must produce a scalar, got " +
                     out.data.shape_str());
  if (!out.tracked())
    throw ValueError("grad_check: f's output does not depend on the inputs");
  GradMap unused;
  Tensor seed = Tensor::full(out.data.shape(), 1.0, DType::kF64);
  auto result = tape.backward({{out, seed}}, unused, leaves);

  GradCheckReport report;
  std::vector<Tensor> probe;
  probe.reserve(inputs.size());
  for (const Tensor& t : inputs) probe.push_back(t.clone());

  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& grad = result.watched.at(leaves[i].id);
    int64_t n = inputs[i].size();
    int64_t stride = 1;
    if (max_coords_per_input > 0 && n > max_coords_per_input)
      stride = (n + max_coords_per_input - 1) / max_coords_per_input;
    for (int64_t j = 0; j < n; j += stride) {
      double analytic = grad.flat(j);
      double fd = central_diff(f, probe, i, j, step);
      double fd_half = central_diff(f, probe, i, j, step / 2);
      double denom = std::max({std::abs(analytic), std::abs(fd), floor});
      double rel = std::abs(analytic - fd) / denom;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
      if (rel > tolerance) {
        report.failures.push_back({i, j, analytic, fd, rel});
        // A central difference that does not settle as h shrinks points at a
        // kink (relu/squash at zero) rather than a wrong backward rule.
        double probe_gap = std::abs(fd - fd_half) /
                           std::max({std::abs(fd), std::abs(fd_half), floor});
        if (probe_gap > 10 * tolerance) {
          std::ostringstream os;
          os << "input " << i << " coord " << j
             << ": finite differences unstable (fd(h)=" << fd
             << ", fd(h/2)=" << fd_half
             << "); suspected nondifferentiable point";
          report.warnings.push_back(os.str());
        }
      }
    }
  }
  report.passed = report.failures.empty();
  return report;
}

}  // namespace mocaps::autodiff
