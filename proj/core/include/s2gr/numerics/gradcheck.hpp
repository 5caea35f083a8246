#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "s2gr/numerics/tape.hpp"

namespace s2gr::nx {

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool finite = true;
  bool ok(double tol) const { return finite && max_rel_error <= tol; }
};

// Scalar-valued function of several tensor inputs, built on a tape.
using TapeFunction = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Compares reverse-mode gradients with central differences:
/// max over coordinates of |analytic - fd| / max(1, |analytic|).
/// stop_gradient outputs from the base evaluation are replayed during the
/// finite-difference evaluations, so blocked branches stay fixed.
inline GradCheckResult grad_check(const TapeFunction& f, const std::vector<Tensor<double>>& point,
                                  double h = 1e-6) {
  if (!(h > 0.0)) throw ConfigError("grad_check: step h must be positive");
  GradCheckResult result;
  std::vector<Tensor<double>> analytic;
  std::vector<Tensor<double>> recorded;
  {
    Tape<double> tape;
    tape.set_stop_grad_mode(Tape<double>::StopGradMode::kRecord);
    std::vector<Var<double>> in;
    for (const auto& x : point) in.push_back(tape.leaf(x));
    Var<double> y = f(tape, in);
    if (!std::isfinite(y.item())) return {0.0, false};
    tape.backward(y);
    for (const auto& v : in) analytic.push_back(v.grad());
    recorded = tape.recorded_stop_grads();
  }

  auto eval = [&](const std::vector<Tensor<double>>& at) {
    Tape<double> tape(false);
    tape.set_stop_grad_mode(Tape<double>::StopGradMode::kReplay, recorded);
    std::vector<Var<double>> in;
    for (const auto& x : at) in.push_back(tape.constant(x));
    return f(tape, in).item();
  };

  std::vector<Tensor<double>> probe = point;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = 0; j < probe[i].data.size(); ++j) {
      const double x0 = probe[i].data[j];
      probe[i].data[j] = x0 + h;
      const double fp = eval(probe);
      probe[i].data[j] = x0 - h;
      const double fm = eval(probe);
      probe[i].data[j] = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) return {result.max_rel_error, false};
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[i].data[j];
      result.max_rel_error =
          std::max(result.max_rel_error, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
  }
  return result;
}

/// Single-input scalar form, e.g. f(x) = x^2 at x = 3.
inline GradCheckResult grad_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                                  const Tensor<double>& x, double h = 1e-6) {
  return grad_check(
      [&](Tape<double>& t, std::span<const Var<double>> in) { return f(t, in[0]); }, {x}, h);
}

}  // namespace s2gr::nx
