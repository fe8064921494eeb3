#pragma once

#include <string>
#include <vector>

#include "x2edit/dit.hpp"
#include "x2edit/rng.hpp"
#include "x2edit/sampler.hpp"
#include "x2edit/tensor.hpp"

namespace x2edit {

// Deterministic token-field transformations standing in for editing tasks.
// Each kind is invertible or idempotent: negation/swap/flip/shift/scale are
// involutions or bijections, the smoothing kinds are projections, identity
// backs the reserved "other" id.
enum class TransformKind {
    kChannelNegation,  // iparam0: channel, -1 negates all
    kChannelSwap,      // iparam0 <-> iparam1
    kGridFlip,         // iparam0: 0 horizontal, 1 vertical, on the square token grid
    kCyclicShift,      // iparam0: token offset
    kGlobalScale,      // fparam: factor
    kAdditivePattern,  // iparam0: 0 sinusoidal, 1 alternating
    kSmoothing,        // iparam0: 0 = 2x2 block mean, 1 = grid-row mean
    kIdentity,
};

struct SyntheticTaskSpec {
    int task_id = 0;
    TransformKind kind = TransformKind::kIdentity;
    int iparam0 = 0;
    int iparam1 = 0;
    double fparam = 0.0;
    std::string name;
};

// Task ids 0 .. num_tasks-2 cycle through the canonical transform list; the
// last id is the reserved "other" task and maps to identity.
std::vector<SyntheticTaskSpec> default_task_specs(Index num_tasks);

// Applies the task's transformation to a (tokens, d_in) field.
Tensor apply_task_transform(const SyntheticTaskSpec& spec, const Tensor& src);

struct SyntheticDataConfig {
    Index n_src = 16;
    Index n_tgt = 16;
    Index d_in = 8;
    Scalar src_std = 1.0;
};

// Draws b task ids through the balanced sampler, builds source fields from
// seeded Gaussians and applies each task's transformation; eps and t are
// drawn fresh per sample. Task draws, source fields and noise come from
// separate named streams so the sub-seeds stay independent.
std::vector<FlowSample> make_synthetic_batch(const std::vector<SyntheticTaskSpec>& specs,
                                             SamplerState& sampler, Index b,
                                             const SyntheticDataConfig& dc,
                                             Rng& sampler_rng, Rng& data_rng,
                                             Rng& noise_rng);

// Same construction for one explicit task id (validation and sampling paths).
FlowSample make_task_sample(const SyntheticTaskSpec& spec, const SyntheticDataConfig& dc,
                            Rng& data_rng, Rng& noise_rng);

}  // namespace x2edit
