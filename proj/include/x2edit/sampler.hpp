#pragma once

#include <deque>
#include <vector>

#include "x2edit/rng.hpp"
#include "x2edit/tensor.hpp"

namespace x2edit {

// Sliding cache of recent task draws. Draw weights are inversely tied to the
// cached counts, which pushes long-run task frequencies toward uniform even
// from an adversarial starting cache.
struct SamplerState {
    Index num_tasks = 0;
    Index capacity = 1024;
    std::deque<int> cache;
    std::vector<Index> counts;  // per task; sums to cache.size() <= capacity
};

SamplerState make_sampler(Index num_tasks, Index capacity = 1024);

// Draws task t with probability proportional to 1 / (count_t + 1), then
// pushes t into the cache, evicting the oldest entry beyond capacity.
int balanced_sample(SamplerState& state, Rng& rng);

}  // namespace x2edit
