#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ibr/core/ops.hpp"

namespace ibr {

template <typename S>
using GraphFn = std::function<Var<S>(Tape<S>&, const Var<S>&)>;

struct FiniteDiffOptions {
  // Denominator floor of the relative error: |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-3;
  // A coordinate is a kink when its one-sided slopes differ by more than
  // kink_threshold * max(1, |central slope|).
  double kink_threshold = 0.05;
};

struct CheckReport {
  double max_rel_error = 0;
  Index worst_coordinate = -1;
  Index checked = 0;
  Index skipped_coordinates = 0;
  bool skipped = false;
  bool passed = false;
  std::vector<std::string> warnings;
};

template <typename S>
Tensor<S> analytic_gradient(const GraphFn<S>& f, const Tensor<S>& point);

// Central differences; also records which coordinates look non-smooth.
template <typename S>
Tensor<S> numeric_gradient(const GraphFn<S>& f, const Tensor<S>& point, double step,
                           std::vector<bool>* kinks = nullptr, double kink_threshold = 0.05);

double relative_error(double analytic, double numeric, double abs_floor);

template <typename S>
CheckReport finite_diff_check(const GraphFn<S>& f, const Tensor<S>& point, double step, double tolerance,
                              const FiniteDiffOptions& options = {});

}  // namespace ibr
