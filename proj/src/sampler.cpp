#include "x2edit/sampler.hpp"

#include "x2edit/error.hpp"

namespace x2edit {

SamplerState make_sampler(Index num_tasks, Index capacity) {
    if (num_tasks < 1 || capacity < 1) {
        throw ParameterError("sampler requires num_tasks >= 1 and capacity >= 1");
    }
    SamplerState s;
    s.num_tasks = num_tasks;
    s.capacity = capacity;
    s.counts.assign(static_cast<std::size_t>(num_tasks), 0);
    return s;
}

int balanced_sample(SamplerState& state, Rng& rng) {
    if (state.num_tasks < 1) {
        throw ParameterError("sampler has an empty task universe");
    }
    double total = 0.0;
    for (Index t = 0; t < state.num_tasks; ++t) {
        total += 1.0 / static_cast<double>(state.counts[static_cast<std::size_t>(t)] + 1);
    }
    const double u = rng.uniform() * total;
    double cum = 0.0;
    int drawn = static_cast<int>(state.num_tasks) - 1;
    for (Index t = 0; t < state.num_tasks; ++t) {
        cum += 1.0 / static_cast<double>(state.counts[static_cast<std::size_t>(t)] + 1);
        if (u < cum) {
            drawn = static_cast<int>(t);
            break;
        }
    }
    state.cache.push_back(drawn);
    ++state.counts[static_cast<std::size_t>(drawn)];
    if (static_cast<Index>(state.cache.size()) > state.capacity) {
        --state.counts[static_cast<std::size_t>(state.cache.front())];
        state.cache.pop_front();
    }
    return drawn;
}

}  // namespace x2edit
