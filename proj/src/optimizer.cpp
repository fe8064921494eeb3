#include "x2edit/optimizer.hpp"

#include <cmath>

#include "x2edit/error.hpp"

namespace x2edit {

AdamState make_adam_state(const DitModel& model) {
    AdamState state;
    state.m = zeros_like(model);
    state.v = zeros_like(model);
    return state;
}

void adam_step(DitModel& model, DitModel& grads, AdamState& state,
               const AdamConfig& cfg, UpdateSet set) {
    auto params = param_refs(model);
    auto gparams = param_refs(grads);
    auto mparams = param_refs(state.m);
    auto vparams = param_refs(state.v);
    if (params.size() != gparams.size() || params.size() != mparams.size()) {
        throw ConsistencyError("optimizer containers disagree with the model layout");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        const bool selected = set == UpdateSet::kTrainable ? params[i].trainable
                                                           : !params[i].trainable;
        if (!selected) {
            continue;
        }
        Tensor& p = *params[i].tensor;
        Tensor& g = *gparams[i].tensor;
        Tensor& m = *mparams[i].tensor;
        Tensor& v = *vparams[i].tensor;
        for (Index j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

double grad_norm(DitModel& grads, UpdateSet set) {
    double sum = 0.0;
    for (const ParamRef& ref : param_refs(grads)) {
        const bool selected =
            set == UpdateSet::kTrainable ? ref.trainable : !ref.trainable;
        if (!selected) {
            continue;
        }
        sum += ref.tensor->vec().squaredNorm();
    }
    return std::sqrt(sum);
}

}  // namespace x2edit
