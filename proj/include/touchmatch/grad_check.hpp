#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "touchmatch/autodiff.hpp"

namespace touchmatch {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor analytic;
  Tensor numeric;
};

/// Scalar function of one tensor, built on the tape it is handed.
using ScalarFn = std::function<ad::Var(ad::Tape&, ad::Var)>;

/// Compares the reverse-mode gradient of `fn` at `point` with central
/// differences. Per-coordinate error is |a - n| / max(|a|, |n|, floor); the
/// floor keeps coordinates whose true gradient is ~0 from reporting pure
/// round-off as relative error.
inline GradCheckReport grad_check(const ScalarFn& fn, const Tensor& point, double h = 1e-5,
                                  double floor = 1e-6) {
  auto evaluate = [&](const Tensor& x) {
    ad::Tape tape;
    ad::Var in = tape.leaf(x, false);
    const Tensor& out = fn(tape, in).value();
    if (out.size() != 1) throw DimensionError("grad_check: function must return a scalar");
    return out[0];
  };

  GradCheckReport report;
  {
    ad::Tape tape;
    ad::Var in = tape.leaf(point, true);
    ad::Var out = fn(tape, in);
    if (out.value().size() != 1) throw DimensionError("grad_check: function must return a scalar");
    if (!std::isfinite(out.value()[0])) throw NumericError("grad_check: non-finite function value at point");
    tape.backward(out);
    report.analytic = tape.grad(in);
  }

  report.numeric = Tensor(point.shape());
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    double up = 0.0, down = 0.0;
    try {
      probe[i] = point[i] + h;
      up = evaluate(probe);
      probe[i] = point[i] - h;
      down = evaluate(probe);
    } catch (const NumericError& e) {
      throw NumericError("grad_check: coordinate " + std::to_string(i) + ": " + e.what());
    }
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("grad_check: non-finite function value at coordinate " + std::to_string(i));
    }
    report.numeric[i] = (up - down) / (2.0 * h);
    const double a = report.analytic[i];
    const double n = report.numeric[i];
    const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace touchmatch
