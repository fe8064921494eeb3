#include "x2edit/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "x2edit/error.hpp"

namespace x2edit {

namespace {
constexpr double kFdStep = 1e-5;
constexpr double kRelErrFloor = 1e-8;
}  // namespace

GradCheckReport finite_diff_check(const std::string& op_name,
                                  const std::function<Scalar(const Tensor&)>& loss,
                                  const Tensor& analytic_grad,
                                  const Tensor& point,
                                  int probes, double tolerance, Rng& rng) {
    if (!analytic_grad.same_shape(point)) {
        throw DimensionError("finite_diff_check: gradient/point shape mismatch");
    }
    if (!analytic_grad.all_finite()) {
        throw NumericalError("finite_diff_check: non-finite analytic gradient for " + op_name);
    }

    const Index n = point.size();
    std::vector<Index> coords;
    if (probes >= n) {
        coords.resize(static_cast<std::size_t>(n));
        std::iota(coords.begin(), coords.end(), Index(0));
    } else {
        // sample distinct coordinates
        std::vector<Index> all(static_cast<std::size_t>(n));
        std::iota(all.begin(), all.end(), Index(0));
        for (int i = 0; i < probes; ++i) {
            const std::size_t j = static_cast<std::size_t>(i) +
                static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
            std::swap(all[static_cast<std::size_t>(i)], all[j]);
        }
        coords.assign(all.begin(), all.begin() + probes);
    }

    Tensor probe_point = point;
    double max_rel = 0.0;
    for (Index c : coords) {
        const Scalar saved = probe_point[c];
        probe_point[c] = saved + kFdStep;
        const Scalar f_plus = loss(probe_point);
        probe_point[c] = saved - kFdStep;
        const Scalar f_minus = loss(probe_point);
        probe_point[c] = saved;

        const Scalar numeric = (f_plus - f_minus) / (2.0 * kFdStep);
        const Scalar analytic = analytic_grad[c];
        if (!std::isfinite(numeric)) {
            throw NumericalError("finite_diff_check: non-finite numeric gradient for " + op_name);
        }
        const double rel = std::abs(analytic - numeric) /
            std::max({kRelErrFloor, std::abs(analytic), std::abs(numeric)});
        max_rel = std::max(max_rel, rel);
    }

    GradCheckReport report;
    report.op_name = op_name;
    report.max_rel_err = max_rel;
    report.probe_count = static_cast<int>(coords.size());
    report.tolerance = tolerance;
    report.pass = max_rel <= tolerance;
    return report;
}

}  // namespace x2edit
