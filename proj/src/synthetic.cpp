#include "x2edit/synthetic.hpp"

#include <cmath>

#include "x2edit/error.hpp"

namespace x2edit {

namespace {

Index square_grid_width(Index tokens) {
    const Index w = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(tokens))));
    if (w * w != tokens) {
        throw TaskSpecError("grid transform requires a square token count, got " +
                            std::to_string(tokens));
    }
    return w;
}

}  // namespace

std::vector<SyntheticTaskSpec> default_task_specs(Index num_tasks) {
    if (num_tasks < 1) {
        throw TaskSpecError("task universe must be nonempty");
    }
    // canonical 14-entry list, interleaved so small universes stay diverse
    const std::vector<SyntheticTaskSpec> canonical = {
        {0, TransformKind::kChannelNegation, -1, 0, 0.0, "negate_all"},
        {0, TransformKind::kGridFlip, 0, 0, 0.0, "hflip"},
        {0, TransformKind::kCyclicShift, 5, 0, 0.0, "shift5"},
        {0, TransformKind::kGlobalScale, 0, 0, 0.5, "scale_half"},
        {0, TransformKind::kChannelSwap, 0, 1, 0.0, "swap01"},
        {0, TransformKind::kAdditivePattern, 0, 0, 0.0, "add_sine"},
        {0, TransformKind::kSmoothing, 0, 0, 0.0, "smooth_block"},
        {0, TransformKind::kChannelNegation, 0, 0, 0.0, "negate_ch0"},
        {0, TransformKind::kGridFlip, 1, 0, 0.0, "vflip"},
        {0, TransformKind::kCyclicShift, 1, 0, 0.0, "shift1"},
        {0, TransformKind::kGlobalScale, 0, 0, 2.0, "scale_double"},
        {0, TransformKind::kChannelSwap, 2, 3, 0.0, "swap23"},
        {0, TransformKind::kAdditivePattern, 1, 0, 0.0, "add_alt"},
        {0, TransformKind::kSmoothing, 1, 0, 0.0, "smooth_rows"},
    };
    std::vector<SyntheticTaskSpec> specs;
    for (Index t = 0; t + 1 < num_tasks; ++t) {
        SyntheticTaskSpec spec = canonical[static_cast<std::size_t>(t) % canonical.size()];
        spec.task_id = static_cast<int>(t);
        specs.push_back(spec);
    }
    SyntheticTaskSpec other;
    other.task_id = static_cast<int>(num_tasks - 1);
    other.kind = TransformKind::kIdentity;
    other.name = "other";
    specs.push_back(other);
    return specs;
}

Tensor apply_task_transform(const SyntheticTaskSpec& spec, const Tensor& src) {
    if (src.rank() != 2) {
        throw TaskSpecError("task transform expects (tokens, d_in)");
    }
    const Index n = src.dim(0);
    const Index d = src.dim(1);
    Tensor out = src;

    switch (spec.kind) {
        case TransformKind::kChannelNegation: {
            if (spec.iparam0 >= static_cast<int>(d)) {
                throw TaskSpecError("negated channel outside d_in");
            }
            for (Index j = 0; j < n; ++j) {
                for (Index c = 0; c < d; ++c) {
                    if (spec.iparam0 < 0 || c == spec.iparam0) {
                        out.at(j, c) = -src.at(j, c);
                    }
                }
            }
            return out;
        }
        case TransformKind::kChannelSwap: {
            const Index a = spec.iparam0 < static_cast<int>(d) ? spec.iparam0 : 0;
            const Index bb = spec.iparam1 < static_cast<int>(d) ? spec.iparam1 : d - 1;
            for (Index j = 0; j < n; ++j) {
                out.at(j, a) = src.at(j, bb);
                out.at(j, bb) = src.at(j, a);
            }
            return out;
        }
        case TransformKind::kGridFlip: {
            const Index w = square_grid_width(n);
            for (Index r = 0; r < w; ++r) {
                for (Index c = 0; c < w; ++c) {
                    const Index from = spec.iparam0 == 0 ? r * w + (w - 1 - c)
                                                         : (w - 1 - r) * w + c;
                    for (Index ch = 0; ch < d; ++ch) {
                        out.at(r * w + c, ch) = src.at(from, ch);
                    }
                }
            }
            return out;
        }
        case TransformKind::kCyclicShift: {
            const Index off = ((spec.iparam0 % static_cast<int>(n)) + static_cast<int>(n)) %
                              static_cast<int>(n);
            for (Index j = 0; j < n; ++j) {
                const Index from = (j + n - off) % n;
                for (Index ch = 0; ch < d; ++ch) {
                    out.at(j, ch) = src.at(from, ch);
                }
            }
            return out;
        }
        case TransformKind::kGlobalScale: {
            out.vec() = src.vec() * spec.fparam;
            return out;
        }
        case TransformKind::kAdditivePattern: {
            for (Index j = 0; j < n; ++j) {
                for (Index ch = 0; ch < d; ++ch) {
                    const double pattern =
                        spec.iparam0 == 0
                            ? std::sin(2.0 * M_PI * static_cast<double>(j) /
                                           static_cast<double>(n) +
                                       0.7 * static_cast<double>(ch))
                            : ((j + ch) % 2 == 0 ? 0.8 : -0.8);
                    out.at(j, ch) = src.at(j, ch) + pattern;
                }
            }
            return out;
        }
        case TransformKind::kSmoothing: {
            const Index w = square_grid_width(n);
            if (spec.iparam0 == 0) {
                if (w % 2 != 0) {
                    throw TaskSpecError("block smoothing requires an even grid width");
                }
                for (Index r = 0; r < w; r += 2) {
                    for (Index c = 0; c < w; c += 2) {
                        for (Index ch = 0; ch < d; ++ch) {
                            const double mean = (src.at(r * w + c, ch) + src.at(r * w + c + 1, ch) +
                                                 src.at((r + 1) * w + c, ch) +
                                                 src.at((r + 1) * w + c + 1, ch)) /
                                                4.0;
                            out.at(r * w + c, ch) = mean;
                            out.at(r * w + c + 1, ch) = mean;
                            out.at((r + 1) * w + c, ch) = mean;
                            out.at((r + 1) * w + c + 1, ch) = mean;
                        }
                    }
                }
            } else {
                for (Index r = 0; r < w; ++r) {
                    for (Index ch = 0; ch < d; ++ch) {
                        double mean = 0.0;
                        for (Index c = 0; c < w; ++c) mean += src.at(r * w + c, ch);
                        mean /= static_cast<double>(w);
                        for (Index c = 0; c < w; ++c) out.at(r * w + c, ch) = mean;
                    }
                }
            }
            return out;
        }
        case TransformKind::kIdentity:
            return out;
    }
    throw TaskSpecError("unknown transform kind");
}

FlowSample make_task_sample(const SyntheticTaskSpec& spec, const SyntheticDataConfig& dc,
                            Rng& data_rng, Rng& noise_rng) {
    if (dc.n_src != dc.n_tgt) {
        throw TaskSpecError("synthetic tasks require n_src == n_tgt");
    }
    FlowSample s;
    s.src = Tensor({dc.n_src, dc.d_in});
    for (Index i = 0; i < s.src.size(); ++i) {
        s.src[i] = data_rng.gaussian(0.0, dc.src_std);
    }
    s.x0 = apply_task_transform(spec, s.src);
    s.eps = Tensor({dc.n_tgt, dc.d_in});
    for (Index i = 0; i < s.eps.size(); ++i) {
        s.eps[i] = noise_rng.gaussian();
    }
    s.t = data_rng.uniform_open01();
    s.y = spec.task_id;
    return s;
}

std::vector<FlowSample> make_synthetic_batch(const std::vector<SyntheticTaskSpec>& specs,
                                             SamplerState& sampler, Index b,
                                             const SyntheticDataConfig& dc,
                                             Rng& sampler_rng, Rng& data_rng,
                                             Rng& noise_rng) {
    if (b < 1) {
        throw ParameterError("batch size must be >= 1");
    }
    if (static_cast<Index>(specs.size()) != sampler.num_tasks) {
        throw TaskSpecError("task spec count disagrees with the sampler universe");
    }
    std::vector<FlowSample> batch;
    batch.reserve(static_cast<std::size_t>(b));
    for (Index i = 0; i < b; ++i) {
        const int task = balanced_sample(sampler, sampler_rng);
        if (task < 0 || task >= static_cast<int>(specs.size())) {
            throw TaskSpecError("sampler drew an unknown task id");
        }
        batch.push_back(make_task_sample(specs[static_cast<std::size_t>(task)], dc,
                                         data_rng, noise_rng));
    }
    return batch;
}

}  // namespace x2edit
