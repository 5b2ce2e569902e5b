#include "ibr/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ibr {

namespace {

template <typename S>
double evaluate(const GraphFn<S>& f, const Tensor<S>& point) {
  Tape<S> tape;
  try {
    const Var<S> y = f(tape, tape.constant(point));
    if (y.value().numel() != 1) throw Error(ErrorCode::loss_not_scalar, "function must be scalar-valued");
    const double v = static_cast<double>(y.value().data[0]);
    if (!std::isfinite(v)) throw Error(ErrorCode::non_finite_evaluation, "function value is not finite");
    return v;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::non_finite) throw Error(ErrorCode::non_finite_evaluation, e.what());
    throw;
  }
}

}  // namespace

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename S>
Tensor<S> analytic_gradient(const GraphFn<S>& f, const Tensor<S>& point) {
  Tape<S> tape;
  const Var<S> x = tape.variable(point);
  const Var<S> y = f(tape, x);
  return tape.backward(y)[x];
}

template <typename S>
Tensor<S> numeric_gradient(const GraphFn<S>& f, const Tensor<S>& point, double step, std::vector<bool>* kinks,
                           double kink_threshold) {
  Tensor<S> g = Tensor<S>::zeros(point.shape);
  if (kinks) kinks->assign(static_cast<std::size_t>(point.numel()), false);
  const double f0 = kinks ? evaluate(f, point) : 0.0;
  Tensor<S> probe = point;
  for (Index i = 0; i < point.numel(); ++i) {
    const S orig = point.data[i];
    probe.data[i] = orig + S(step);
    const double fp = evaluate(f, probe);
    probe.data[i] = orig - S(step);
    const double fm = evaluate(f, probe);
    probe.data[i] = orig;
    const double central = (fp - fm) / (2 * step);
    g.data[i] = S(central);
    if (kinks) {
      const double fwd = (fp - f0) / step, bwd = (f0 - fm) / step;
      (*kinks)[static_cast<std::size_t>(i)] =
          std::abs(fwd - bwd) > kink_threshold * std::max(1.0, std::abs(central));
    }
  }
  return g;
}

template <typename S>
CheckReport finite_diff_check(const GraphFn<S>& f, const Tensor<S>& point, double step, double tolerance,
                              const FiniteDiffOptions& options) {
  CheckReport report;
  std::vector<bool> kinks;
  const Tensor<S> numeric = numeric_gradient(f, point, step, &kinks, options.kink_threshold);
  const Tensor<S> analytic = analytic_gradient(f, point);
  for (Index i = 0; i < point.numel(); ++i) {
    if (kinks[static_cast<std::size_t>(i)]) {
      ++report.skipped_coordinates;
      report.warnings.push_back("coordinate " + std::to_string(i) + " is at a non-smooth point; skipped");
      continue;
    }
    ++report.checked;
    const double err = relative_error(analytic.data[i], numeric.data[i], options.abs_floor);
    if (report.worst_coordinate < 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_coordinate = i;
    }
  }
  report.skipped = report.checked == 0;
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

template Tensor<float> analytic_gradient(const GraphFn<float>&, const Tensor<float>&);
template Tensor<double> analytic_gradient(const GraphFn<double>&, const Tensor<double>&);
template Tensor<float> numeric_gradient(const GraphFn<float>&, const Tensor<float>&, double, std::vector<bool>*,
                                        double);
template Tensor<double> numeric_gradient(const GraphFn<double>&, const Tensor<double>&, double, std::vector<bool>*,
                                         double);
template CheckReport finite_diff_check(const GraphFn<float>&, const Tensor<float>&, double, double,
                                       const FiniteDiffOptions&);
template CheckReport finite_diff_check(const GraphFn<double>&, const Tensor<double>&, double, double,
                                       const FiniteDiffOptions&);

}  // namespace ibr
