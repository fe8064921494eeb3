#include "x2edit/contrastive.hpp"

#include <cmath>
#include <limits>

#include "x2edit/error.hpp"

namespace x2edit {

namespace {

Scalar metric_factor(ContrastiveMetric metric) {
    return metric == ContrastiveMetric::kSquaredL2 ? 2.0 : 1.0;
}

// D = f * (1 - z z^T) with exact-zero diagonal, clamped to [0, 2f].
Tensor distance_from_normalized(const Tensor& z, ContrastiveMetric metric) {
    const Index b = z.dim(0);
    const Scalar f = metric_factor(metric);
    Tensor dist({b, b});
    dist.mat().noalias() = z.mat() * z.mat().transpose();
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < b; ++j) {
            if (i == j) {
                dist.at(i, j) = 0.0;
            } else {
                dist.at(i, j) = std::clamp(f * (1.0 - dist.at(i, j)), 0.0, 2.0 * f);
            }
        }
    }
    return dist;
}

}  // namespace

std::string to_string(ContrastiveMetric metric) {
    return metric == ContrastiveMetric::kSquaredL2 ? "l2" : "cosine";
}

ContrastiveMetric contrastive_metric_from_string(const std::string& s) {
    if (s == "l2") return ContrastiveMetric::kSquaredL2;
    if (s == "cosine") return ContrastiveMetric::kCosine;
    throw ConfigError("unknown contrastive metric: " + s);
}

Tensor flatten_normalize(const HiddenBatch& hb, L2NormalizeCache* cache) {
    if (hb.h.rank() != 3) {
        throw DimensionError("flatten_normalize expects (b, n, d) hidden states");
    }
    const Index b = hb.h.dim(0);
    const Index m = hb.h.dim(1) * hb.h.dim(2);
    return l2_normalize(hb.h.reshaped({b, m}), cache);
}

DistanceMatrix pairwise_sq_dist(const Tensor& z) {
    return pairwise_distance(z, ContrastiveMetric::kSquaredL2);
}

DistanceMatrix pairwise_distance(const Tensor& z, ContrastiveMetric metric) {
    if (z.rank() != 2) {
        throw DimensionError("pairwise distance expects (b, m) rows");
    }
    return DistanceMatrix{distance_from_normalized(z, metric)};
}

TaskMask build_task_mask(const std::vector<int>& y) {
    const Index b = static_cast<Index>(y.size());
    TaskMask mask;
    mask.m = Tensor({b, b});
    mask.positive_counts.assign(y.size(), 0);
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < b; ++j) {
            if (i != j && y[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(j)]) {
                mask.m.at(i, j) = 1.0;
                ++mask.positive_counts[static_cast<std::size_t>(i)];
            }
        }
    }
    return mask;
}

InfoNceResult task_infonce(const DistanceMatrix& dist, const TaskMask& mask, double tau,
                           bool include_self_term) {
    if (tau <= 0.0) {
        throw ParameterError("task_infonce requires tau > 0");
    }
    const Index b = dist.d.dim(0);
    if (dist.d.rank() != 2 || dist.d.dim(1) != b || mask.m.dim(0) != b || mask.m.dim(1) != b) {
        throw DimensionError("distance/mask extents disagree");
    }

    InfoNceResult result;
    result.per_sample.assign(static_cast<std::size_t>(b), 0.0);
    double sum = 0.0;
    for (Index i = 0; i < b; ++i) {
        if (mask.positive_counts[static_cast<std::size_t>(i)] == 0) {
            continue;
        }
        double numerator = 0.0;
        double denominator = 0.0;
        for (Index j = 0; j < b; ++j) {
            if (i == j && !include_self_term) {
                continue;
            }
            const double e = std::exp(-dist.d.at(i, j) / tau);
            denominator += e;
            if (mask.m.at(i, j) != 0.0) {
                numerator += e;
            }
        }
        const double li = -std::log(numerator / denominator);
        result.per_sample[static_cast<std::size_t>(i)] = li;
        sum += li;
        ++result.active;
    }
    result.loss = result.active > 0 ? sum / result.active : 0.0;
    return result;
}

TaskInfoNceGrad task_infonce_grad(const Tensor& z_raw, const std::vector<int>& y,
                                  const InfoNceOptions& opts) {
    if (opts.tau <= 0.0) {
        throw ParameterError("task_infonce requires tau > 0");
    }
    if (z_raw.rank() != 2) {
        throw DimensionError("task_infonce_grad expects (b, m) raw rows");
    }
    const Index b = z_raw.dim(0);
    if (b != static_cast<Index>(y.size())) {
        throw DimensionError("label count does not match batch");
    }

    L2NormalizeCache norm_cache;
    Tensor z = l2_normalize(z_raw, &norm_cache);
    const Scalar f = metric_factor(opts.metric);

    // raw (pre-clamp) distances to know where the clamp engaged
    Tensor gram({b, b});
    gram.mat().noalias() = z.mat() * z.mat().transpose();

    Tensor dist({b, b});
    Tensor clamp_active({b, b});
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < b; ++j) {
            if (i == j) {
                dist.at(i, j) = 0.0;
                continue;
            }
            const Scalar raw = f * (1.0 - gram.at(i, j));
            const Scalar clamped = std::clamp(raw, 0.0, 2.0 * f);
            dist.at(i, j) = clamped;
            clamp_active.at(i, j) = (raw == clamped) ? 0.0 : 1.0;
        }
    }

    TaskMask mask = build_task_mask(y);

    TaskInfoNceGrad result;
    Tensor ddist({b, b});
    double sum = 0.0;
    for (Index i = 0; i < b; ++i) {
        if (mask.positive_counts[static_cast<std::size_t>(i)] == 0) {
            continue;
        }
        double numerator = 0.0;
        double denominator = 0.0;
        for (Index j = 0; j < b; ++j) {
            if (i == j && !opts.include_self_term) {
                continue;
            }
            const double e = std::exp(-dist.at(i, j) / opts.tau);
            denominator += e;
            if (mask.m.at(i, j) != 0.0) {
                numerator += e;
            }
        }
        sum += -std::log(numerator / denominator);
        ++result.active;

        // d l_i / d D_ij = (1/tau) (e_ij m_ij / N_i - e_ij / K_i); the self
        // term is a constant because D_ii is identically zero.
        for (Index j = 0; j < b; ++j) {
            if (i == j) {
                continue;
            }
            const double e = std::exp(-dist.at(i, j) / opts.tau);
            const double dnum = mask.m.at(i, j) != 0.0 ? e / numerator : 0.0;
            ddist.at(i, j) += (dnum - e / denominator) / opts.tau;
        }
    }
    result.loss = result.active > 0 ? sum / result.active : 0.0;
    result.dz = Tensor(z_raw.shape());
    if (result.active == 0) {
        return result;
    }
    ddist.vec() /= static_cast<double>(result.active);

    // D_ij = f (1 - z_i . z_j): dz = -f (dD + dD^T) z, skipping clamped entries
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < b; ++j) {
            if (clamp_active.at(i, j) != 0.0) {
                ddist.at(i, j) = 0.0;
            }
        }
    }
    Tensor dz_norm(z.shape());
    dz_norm.mat().noalias() = (ddist.mat() + ddist.mat().transpose()) * z.mat() * (-f);
    result.dz = l2_normalize_vjp(norm_cache, dz_norm);
    return result;
}

ShardedInfoNce sharded_task_infonce(const ShardedBatch& sb, const InfoNceOptions& opts,
                                    bool with_grads) {
    if (sb.shards.empty()) {
        throw ShardError("sharded batch has no shards");
    }
    Index total_b = 0;
    Index n = -1, d = -1;
    for (const HiddenBatch& shard : sb.shards) {
        if (shard.h.rank() != 3 || shard.h.dim(0) == 0) {
            throw ShardError("empty or malformed shard");
        }
        if (shard.h.dim(0) != static_cast<Index>(shard.y.size())) {
            throw ConsistencyError("shard labels do not match its batch size");
        }
        if (n < 0) {
            n = shard.h.dim(1);
            d = shard.h.dim(2);
        } else if (shard.h.dim(1) != n || shard.h.dim(2) != d) {
            throw ShardError("shards disagree on token/channel extents");
        }
        total_b += shard.h.dim(0);
    }

    // gather: concatenate shard rows into the global representation set
    const Index m = n * d;
    Tensor global_raw({total_b, m});
    std::vector<int> global_y;
    global_y.reserve(static_cast<std::size_t>(total_b));
    Index row = 0;
    for (const HiddenBatch& shard : sb.shards) {
        const Index sb_rows = shard.h.dim(0);
        std::copy(shard.h.data(), shard.h.data() + sb_rows * m,
                  global_raw.data() + row * m);
        global_y.insert(global_y.end(), shard.y.begin(), shard.y.end());
        row += sb_rows;
    }

    Tensor z = l2_normalize(global_raw);
    Tensor dist = distance_from_normalized(z, opts.metric);
    TaskMask mask = build_task_mask(global_y);
    InfoNceResult global = task_infonce(DistanceMatrix{dist}, mask, opts.tau,
                                        opts.include_self_term);

    ShardedInfoNce result;
    Index offset = 0;
    double weighted_sum = 0.0;
    for (const HiddenBatch& shard : sb.shards) {
        const Index sb_rows = shard.h.dim(0);
        double local_sum = 0.0;
        int local_active = 0;
        for (Index i = 0; i < sb_rows; ++i) {
            if (mask.positive_counts[static_cast<std::size_t>(offset + i)] > 0) {
                local_sum += global.per_sample[static_cast<std::size_t>(offset + i)];
                ++local_active;
            }
        }
        result.worker_losses.push_back(local_active > 0 ? local_sum / local_active : 0.0);
        result.worker_active.push_back(local_active);
        weighted_sum += local_sum;
        offset += sb_rows;
    }
    result.active = global.active;
    result.loss = result.active > 0 ? weighted_sum / result.active : 0.0;

    if (with_grads) {
        // Each worker owns the exact gradient of the global loss restricted to
        // its local rows; gathered remote rows are constants and get none.
        TaskInfoNceGrad global_grad = task_infonce_grad(global_raw, global_y, opts);
        offset = 0;
        for (const HiddenBatch& shard : sb.shards) {
            const Index sb_rows = shard.h.dim(0);
            Tensor wg({total_b, m});
            std::copy(global_grad.dz.data() + offset * m,
                      global_grad.dz.data() + (offset + sb_rows) * m,
                      wg.data() + offset * m);
            result.worker_grads.push_back(std::move(wg));
            offset += sb_rows;
        }
    }
    return result;
}

MultiLayerTaskLoss multi_layer_task_loss(const std::vector<HiddenBatch>& hidden,
                                         const InfoNceOptions& opts,
                                         bool average_layers, bool with_grads) {
    MultiLayerTaskLoss result;
    if (hidden.empty()) {
        return result;
    }
    const std::vector<int>& y = hidden.front().y;
    const Index b = hidden.front().h.dim(0);
    for (const HiddenBatch& hb : hidden) {
        if (hb.y != y || hb.h.dim(0) != b) {
            throw ConsistencyError("hidden layers disagree on labels or batch size");
        }
    }
    const double weight =
        average_layers ? 1.0 / static_cast<double>(hidden.size()) : 1.0;
    for (const HiddenBatch& hb : hidden) {
        const Index m = hb.h.dim(1) * hb.h.dim(2);
        Tensor z_raw = hb.h.reshaped({b, m});
        if (with_grads) {
            TaskInfoNceGrad g = task_infonce_grad(z_raw, y, opts);
            result.per_layer.push_back(g.loss);
            result.loss += weight * g.loss;
            g.dz.vec() *= weight;
            result.dhidden.push_back(g.dz.reshaped(hb.h.shape()));
        } else {
            L2NormalizeCache cache;
            Tensor z = l2_normalize(z_raw, &cache);
            InfoNceResult r = task_infonce(pairwise_distance(z, opts.metric),
                                           build_task_mask(y), opts.tau,
                                           opts.include_self_term);
            result.per_layer.push_back(r.loss);
            result.loss += weight * r.loss;
        }
    }
    return result;
}

double separability_ratio(const HiddenBatch& hb) {
    Tensor z = flatten_normalize(hb);
    DistanceMatrix dist = pairwise_sq_dist(z);
    const Index b = z.dim(0);
    double intra = 0.0, inter = 0.0;
    Index n_intra = 0, n_inter = 0;
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < b; ++j) {
            if (i == j) {
                continue;
            }
            if (hb.y[static_cast<std::size_t>(i)] == hb.y[static_cast<std::size_t>(j)]) {
                intra += dist.d.at(i, j);
                ++n_intra;
            } else {
                inter += dist.d.at(i, j);
                ++n_inter;
            }
        }
    }
    if (n_intra == 0 || n_inter == 0 || inter == 0.0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return (intra / n_intra) / (inter / n_inter);
}

}  // namespace x2edit
