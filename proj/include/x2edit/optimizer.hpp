#pragma once

#include <cstdint>

#include "x2edit/dit.hpp"

namespace x2edit {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moments live in model-shaped containers so the parameter
// registry pairs them with the model and gradients positionally.
struct AdamState {
    DitModel m;
    DitModel v;
    std::uint64_t step = 0;
};

AdamState make_adam_state(const DitModel& model);

enum class UpdateSet {
    kTrainable,  // adapters, gate, task table
    kBackbone,   // everything else (warm-up phase)
};

// Bias-corrected adaptive-moment update applied to the selected parameter
// set; all other tensors (and their moments) stay untouched.
void adam_step(DitModel& model, DitModel& grads, AdamState& state,
               const AdamConfig& cfg, UpdateSet set);

// Euclidean norm of the gradient over the selected parameter set.
double grad_norm(DitModel& grads, UpdateSet set);

}  // namespace x2edit
