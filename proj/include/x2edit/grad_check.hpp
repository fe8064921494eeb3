#pragma once

#include <functional>
#include <string>

#include "x2edit/rng.hpp"
#include "x2edit/tensor.hpp"

namespace x2edit {

struct GradCheckReport {
    std::string op_name;
    double max_rel_err = 0.0;
    int probe_count = 0;
    double tolerance = 0.0;
    bool pass = false;
};

// Central differences with step h = 1e-5 on randomly chosen coordinates of
// `point`. `loss` must be a pure scalar function of the probed tensor;
// `analytic_grad` is its gradient at `point`, same shape. Relative error is
// |a - f| / max(1e-8, |a|, |f|), reported as the max over probes.
// Non-finite analytic or numeric values raise NumericalError.
GradCheckReport finite_diff_check(const std::string& op_name,
                                  const std::function<Scalar(const Tensor&)>& loss,
                                  const Tensor& analytic_grad,
                                  const Tensor& point,
                                  int probes, double tolerance, Rng& rng);

}  // namespace x2edit
