#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "lcp/tensor.hpp"

namespace lcp {

/// Result of one analytic-vs-central-difference comparison.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double tolerance = 0.0;
  bool pass = true;

  std::string to_string() const {
    return std::string(pass ? "pass" : "FAIL") +
           ": max rel err " + std::to_string(max_rel_error) + " at coord " +
           std::to_string(worst_index) + " (analytic " +
           std::to_string(analytic_at_worst) + ", numeric " +
           std::to_string(numeric_at_worst) + ", tol " +
           std::to_string(tolerance) + ")";
  }
};

/// Checks d f(x) / dx against central finite differences, coordinate by
/// coordinate. `f` must rebuild its graph from the tensor it is handed
/// (define-by-run), and return a taped scalar.
inline GradCheckReport check_gradients(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
    double step, double tol) {
  if (step <= 0.0) throw std::invalid_argument("check_gradients: step must be > 0");

  Tensor probe = x.clone();
  probe.node()->requires_grad = true;
  probe.zero_grad();
  Tensor loss = f(probe);
  backward(loss);
  std::vector<double> analytic = probe.grad();

  // Coordinates whose gradient is orders of magnitude below the vector's
  // largest entry are roundoff-limited in a central difference, so the
  // relative error carries an absolute floor tied to the gradient scale.
  double grad_scale = 0.0;
  for (double g : analytic) grad_scale = std::max(grad_scale, std::abs(g));
  const double floor = std::max(1e-8, 1e-4 * grad_scale);

  GradCheckReport report;
  report.tolerance = tol;
  for (std::int64_t i = 0; i < probe.numel(); ++i) {
    const double xi = x.data()[static_cast<std::size_t>(i)];
    const double h = step * std::max(1.0, std::abs(xi));
    double fp, fm;
    {
      NoGradGuard ng;
      Tensor xp = x.clone();
      xp.data()[static_cast<std::size_t>(i)] = xi + h;
      fp = f(xp).item();
      Tensor xm = x.clone();
      xm.data()[static_cast<std::size_t>(i)] = xi - h;
      fm = f(xm).item();
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

}  // namespace lcp
