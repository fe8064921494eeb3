#include "x2edit/task_moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "x2edit/error.hpp"

namespace x2edit {

namespace {

Tensor gaussian_tensor(std::vector<Index> shape, Scalar stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = rng.gaussian(0.0, stddev);
    }
    return t;
}

LoraExpert make_expert(Index d, Index r, Scalar alpha, Scalar init_std, Rng& rng) {
    LoraExpert e;
    e.down = gaussian_tensor({d, r}, init_std, rng);
    e.up = Tensor({r, d});  // zero: adapter output starts at exactly zero
    e.scale = (alpha > 0.0 ? alpha : static_cast<Scalar>(r)) / static_cast<Scalar>(r);
    return e;
}

void check_bn_d(const Tensor& t, const char* name) {
    if (t.rank() != 3) {
        throw DimensionError(std::string(name) + " must have shape (b, n, d)");
    }
}

}  // namespace

std::string to_string(AdapterArch arch) {
    switch (arch) {
        case AdapterArch::kLora: return "lora";
        case AdapterArch::kMoe: return "moe";
        case AdapterArch::kMoeTaskAware: return "moe_ta";
    }
    return "moe_ta";
}

AdapterArch adapter_arch_from_string(const std::string& s) {
    if (s == "lora") return AdapterArch::kLora;
    if (s == "moe") return AdapterArch::kMoe;
    if (s == "moe_ta") return AdapterArch::kMoeTaskAware;
    throw ConfigError("unknown adapter arch: " + s);
}

MoeLoraAttention make_moe_lora_attention(const MoeLayerConfig& cfg, Rng& rng) {
    if (cfg.arch != AdapterArch::kLora &&
        (cfg.num_experts < 1 || cfg.top_k < 1 ||
         cfg.top_k > static_cast<int>(cfg.num_experts))) {
        throw ConfigError("moe layer requires num_experts >= top_k >= 1");
    }
    if (cfg.d_model % cfg.num_heads != 0) {
        throw DimensionError("head count must divide d_model");
    }
    MoeLoraAttention layer;
    layer.arch = cfg.arch;
    layer.num_heads = cfg.num_heads;
    layer.top_k = cfg.top_k;

    const Index routed = cfg.arch == AdapterArch::kLora ? 0 : cfg.num_experts;
    for (ProjectionAdapters* proj : {&layer.q, &layer.k, &layer.v}) {
        proj->experts.reserve(static_cast<std::size_t>(routed));
        for (Index e = 0; e < routed; ++e) {
            proj->experts.push_back(
                make_expert(cfg.d_model, cfg.rank, cfg.lora_alpha, cfg.init_std, rng));
        }
        proj->shared = make_expert(cfg.d_model, cfg.shared_rank, cfg.lora_alpha,
                                   cfg.init_std, rng);
    }
    if (cfg.arch != AdapterArch::kLora) {
        const Index gate_in =
            cfg.arch == AdapterArch::kMoeTaskAware ? cfg.d_model + cfg.task_dim
                                                   : cfg.d_model;
        layer.gate.weight = gaussian_tensor({gate_in, cfg.num_experts}, cfg.init_std, rng);
        layer.gate.bias = Tensor({cfg.num_experts});
    }
    return layer;
}

TaskEmbeddingTable make_task_embedding_table(Index num_tasks, Index task_dim,
                                             Scalar init_std, Rng& rng) {
    if (num_tasks < 1 || task_dim < 1) {
        throw ConfigError("task table requires num_tasks >= 1 and task_dim >= 1");
    }
    return TaskEmbeddingTable{gaussian_tensor({num_tasks, task_dim}, init_std, rng)};
}

Tensor broadcast_task_embedding(const TaskEmbeddingTable& table,
                                const std::vector<int>& y, Index tokens) {
    const Index b = static_cast<Index>(y.size());
    const Index c = table.task_dim();
    Tensor out({b, tokens, c});
    for (Index i = 0; i < b; ++i) {
        const int label = y[static_cast<std::size_t>(i)];
        if (label < 0 || label >= table.num_tasks()) {
            throw LabelError("task label " + std::to_string(label) + " outside [0, " +
                             std::to_string(table.num_tasks()) + ")");
        }
        const Scalar* row = table.table.data() + static_cast<Index>(label) * c;
        for (Index j = 0; j < tokens; ++j) {
            std::copy(row, row + c, out.data() + (i * tokens + j) * c);
        }
    }
    return out;
}

Tensor broadcast_task_embedding_vjp(const Tensor& dtemb, const std::vector<int>& y,
                                    Index num_tasks) {
    check_bn_d(dtemb, "dtemb");
    const Index b = dtemb.dim(0);
    const Index tokens = dtemb.dim(1);
    const Index c = dtemb.dim(2);
    if (b != static_cast<Index>(y.size())) {
        throw DimensionError("label count does not match cotangent batch");
    }
    Tensor dtable({num_tasks, c});
    for (Index i = 0; i < b; ++i) {
        const Index label = y[static_cast<std::size_t>(i)];
        VecMap acc(dtable.data() + label * c, c);
        for (Index j = 0; j < tokens; ++j) {
            acc += ConstVecMap(dtemb.data() + (i * tokens + j) * c, c);
        }
    }
    return dtable;
}

Tensor gate_scores(const GateNetwork& gate, const Tensor& h, const Tensor& temb,
                   GateScoresCache* cache) {
    check_bn_d(h, "gate input h");
    const Index b = h.dim(0);
    const Index n = h.dim(1);
    const Index d = h.dim(2);
    const bool with_task = temb.rank() != 0 && temb.size() > 0;
    Index c = 0;
    if (with_task) {
        check_bn_d(temb, "gate input temb");
        if (temb.dim(0) != b || temb.dim(1) != n) {
            throw DimensionError("task embedding batch/token extents disagree with h");
        }
        c = temb.dim(2);
    }
    if (gate.weight.dim(0) != d + c) {
        throw DimensionError("gate input width mismatch: expected " +
                             std::to_string(gate.weight.dim(0)) + ", got " +
                             std::to_string(d + c));
    }
    const Index num_experts = gate.weight.dim(1);
    const Index rows = b * n;

    Tensor concat({rows, d + c});
    for (Index r = 0; r < rows; ++r) {
        std::copy(h.data() + r * d, h.data() + (r + 1) * d, concat.data() + r * (d + c));
        if (with_task) {
            std::copy(temb.data() + r * c, temb.data() + (r + 1) * c,
                      concat.data() + r * (d + c) + d);
        }
    }

    Tensor logits({rows, num_experts});
    logits.mat().noalias() = concat.mat() * gate.weight.mat();
    logits.mat().rowwise() += ConstVecMap(gate.bias.data(), num_experts).transpose();

    Tensor s = softmax(logits, -1).reshaped({b, n, num_experts});
    if (cache != nullptr) {
        cache->concat = std::move(concat);
        cache->scores = s;
    }
    return s;
}

GateScoresGrads gate_scores_vjp(const GateNetwork& gate, const GateScoresCache& cache,
                                const Tensor& ds, Index d_model) {
    const Index rows = cache.concat.dim(0);
    const Index width = cache.concat.dim(1);
    const Index num_experts = gate.weight.dim(1);
    const Index b = cache.scores.dim(0);
    const Index n = cache.scores.dim(1);

    Tensor dlogits = softmax_vjp(cache.scores, ds, -1).reshaped({rows, num_experts});

    GateScoresGrads grads;
    grads.dgate.weight = Tensor(gate.weight.shape());
    grads.dgate.weight.mat().noalias() = cache.concat.mat().transpose() * dlogits.mat();
    grads.dgate.bias = Tensor(gate.bias.shape());
    VecMap(grads.dgate.bias.data(), num_experts) = dlogits.mat().colwise().sum();

    Tensor dconcat({rows, width});
    dconcat.mat().noalias() = dlogits.mat() * gate.weight.mat().transpose();

    grads.dh = Tensor({b, n, d_model});
    const Index c = width - d_model;
    if (c > 0) {
        grads.dtemb = Tensor({b, n, c});
    }
    for (Index r = 0; r < rows; ++r) {
        std::copy(dconcat.data() + r * width, dconcat.data() + r * width + d_model,
                  grads.dh.data() + r * d_model);
        if (c > 0) {
            std::copy(dconcat.data() + r * width + d_model, dconcat.data() + (r + 1) * width,
                      grads.dtemb.data() + r * c);
        }
    }
    return grads;
}

Tensor topk_gate(const Tensor& s, int top_k) {
    if (s.rank() != 3) {
        throw DimensionError("topk_gate expects (b, n, num_experts)");
    }
    const Index num_experts = s.dim(2);
    if (top_k < 1 || top_k > static_cast<int>(num_experts)) {
        throw ParameterError("topk_gate requires 1 <= K <= num_experts");
    }
    const Index rows = s.size() / num_experts;
    Tensor g(s.shape());
    std::vector<Index> order(static_cast<std::size_t>(num_experts));
    for (Index r = 0; r < rows; ++r) {
        const Scalar* row = s.data() + r * num_experts;
        std::iota(order.begin(), order.end(), Index(0));
        // ties broken by lowest expert index
        std::stable_sort(order.begin(), order.end(), [row](Index a, Index b) {
            return row[a] > row[b];
        });
        Scalar* out = g.data() + r * num_experts;
        for (int k = 0; k < top_k; ++k) {
            out[order[static_cast<std::size_t>(k)]] = row[order[static_cast<std::size_t>(k)]];
        }
    }
    return g;
}

Tensor topk_gate_vjp(const Tensor& g, const Tensor& dg) {
    if (!g.same_shape(dg)) {
        throw DimensionError("topk_gate_vjp shape mismatch");
    }
    Tensor ds(g.shape());
    for (Index i = 0; i < g.size(); ++i) {
        ds[i] = g[i] != 0.0 ? dg[i] : 0.0;
    }
    return ds;
}

Tensor expert_mix(const std::vector<LoraExpert>& experts, const LoraExpert& shared,
                  const Tensor& g, const Tensor& h, ExpertMixCache* cache) {
    check_bn_d(h, "expert_mix input h");
    const Index b = h.dim(0);
    const Index n = h.dim(1);
    const Index d = h.dim(2);
    const Index rows = b * n;
    const Index num_experts = static_cast<Index>(experts.size());
    if (num_experts > 0 &&
        (g.rank() != 3 || g.dim(0) != b || g.dim(1) != n || g.dim(2) != num_experts)) {
        throw DimensionError("gate tensor shape disagrees with experts/input");
    }

    Tensor out({b, n, d});
    if (cache != nullptr) {
        cache->experts.assign(static_cast<std::size_t>(num_experts), {});
    }

    for (Index e = 0; e < num_experts; ++e) {
        std::vector<Index> idx;
        for (Index r = 0; r < rows; ++r) {
            if (g[r * num_experts + e] != 0.0) {
                idx.push_back(r);
            }
        }
        if (idx.empty()) {
            continue;
        }
        const LoraExpert& ex = experts[static_cast<std::size_t>(e)];
        Tensor h_rows = gather_rows(h, d, idx);
        Tensor p({static_cast<Index>(idx.size()), ex.down.dim(1)});
        p.mat().noalias() = h_rows.mat() * ex.down.mat();
        Tensor o({static_cast<Index>(idx.size()), d});
        o.mat().noalias() = p.mat() * ex.up.mat() * ex.scale;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            o.mat().row(static_cast<Index>(r)) *= g[idx[r] * num_experts + e];
        }
        scatter_add_rows(out, d, idx, o);
        if (cache != nullptr) {
            cache->experts[static_cast<std::size_t>(e)].rows = std::move(idx);
            cache->experts[static_cast<std::size_t>(e)].p = std::move(p);
        }
    }

    Tensor p_shared({rows, shared.down.dim(1)});
    p_shared.mat().noalias() = h.mat(rows, d) * shared.down.mat();
    out.mat(rows, d).noalias() += p_shared.mat() * shared.up.mat() * shared.scale;
    if (cache != nullptr) {
        cache->p_shared = std::move(p_shared);
    }
    return out;
}

ExpertMixGrads expert_mix_vjp(const std::vector<LoraExpert>& experts,
                              const LoraExpert& shared, const Tensor& g,
                              const Tensor& h, const ExpertMixCache& cache,
                              const Tensor& dout) {
    const Index b = h.dim(0);
    const Index n = h.dim(1);
    const Index d = h.dim(2);
    const Index rows = b * n;
    const Index num_experts = static_cast<Index>(experts.size());

    ExpertMixGrads grads;
    grads.dh = Tensor({b, n, d});
    if (num_experts > 0) {
        grads.dg = Tensor(g.shape());
    }
    grads.dexperts.resize(static_cast<std::size_t>(num_experts));

    for (Index e = 0; e < num_experts; ++e) {
        const LoraExpert& ex = experts[static_cast<std::size_t>(e)];
        auto& dex = grads.dexperts[static_cast<std::size_t>(e)];
        dex.down = Tensor(ex.down.shape());
        dex.up = Tensor(ex.up.shape());
        const auto& slot = cache.experts[static_cast<std::size_t>(e)];
        if (slot.rows.empty()) {
            continue;
        }
        const Index nnz = static_cast<Index>(slot.rows.size());
        Tensor dout_rows = gather_rows(dout, d, slot.rows);
        Tensor h_rows = gather_rows(h, d, slot.rows);

        // o_pre = scale * p * up; out += gate * o_pre per row
        Tensor o_pre({nnz, d});
        o_pre.mat().noalias() = slot.p.mat() * ex.up.mat() * ex.scale;
        Tensor do_pre({nnz, d});
        for (Index r = 0; r < nnz; ++r) {
            const Scalar gate_v = g[slot.rows[static_cast<std::size_t>(r)] * num_experts + e];
            grads.dg[slot.rows[static_cast<std::size_t>(r)] * num_experts + e] =
                o_pre.mat().row(r).dot(dout_rows.mat().row(r));
            do_pre.mat().row(r) = dout_rows.mat().row(r) * gate_v;
        }

        dex.up.mat().noalias() = slot.p.mat().transpose() * do_pre.mat() * ex.scale;
        Tensor dp({nnz, ex.down.dim(1)});
        dp.mat().noalias() = do_pre.mat() * ex.up.mat().transpose() * ex.scale;
        dex.down.mat().noalias() = h_rows.mat().transpose() * dp.mat();
        Tensor dh_rows({nnz, d});
        dh_rows.mat().noalias() = dp.mat() * ex.down.mat().transpose();
        scatter_add_rows(grads.dh, d, slot.rows, dh_rows);
    }

    // shared expert: applied to every token, no gate
    grads.dshared.down = Tensor(shared.down.shape());
    grads.dshared.up = Tensor(shared.up.shape());
    grads.dshared.up.mat().noalias() =
        cache.p_shared.mat().transpose() * dout.mat(rows, d) * shared.scale;
    Tensor dp_shared({rows, shared.down.dim(1)});
    dp_shared.mat().noalias() = dout.mat(rows, d) * shared.up.mat().transpose() * shared.scale;
    grads.dshared.down.mat().noalias() = h.mat(rows, d).transpose() * dp_shared.mat();
    grads.dh.mat(rows, d).noalias() += dp_shared.mat() * shared.down.mat().transpose();
    return grads;
}

Tensor split_heads(const Tensor& x, int num_heads) {
    check_bn_d(x, "split_heads input");
    const Index b = x.dim(0);
    const Index n = x.dim(1);
    const Index d = x.dim(2);
    const Index heads = num_heads;
    if (d % heads != 0) {
        throw DimensionError("head count must divide d_model");
    }
    const Index dh = d / heads;
    Tensor out({b, heads, n, dh});
    for (Index bi = 0; bi < b; ++bi) {
        for (Index j = 0; j < n; ++j) {
            for (Index hd = 0; hd < heads; ++hd) {
                std::copy(x.data() + (bi * n + j) * d + hd * dh,
                          x.data() + (bi * n + j) * d + (hd + 1) * dh,
                          out.data() + ((bi * heads + hd) * n + j) * dh);
            }
        }
    }
    return out;
}

Tensor merge_heads(const Tensor& x) {
    if (x.rank() != 4) {
        throw DimensionError("merge_heads expects (b,H,n,dh)");
    }
    const Index b = x.dim(0);
    const Index heads = x.dim(1);
    const Index n = x.dim(2);
    const Index dh = x.dim(3);
    Tensor out({b, n, heads * dh});
    for (Index bi = 0; bi < b; ++bi) {
        for (Index hd = 0; hd < heads; ++hd) {
            for (Index j = 0; j < n; ++j) {
                std::copy(x.data() + ((bi * heads + hd) * n + j) * dh,
                          x.data() + ((bi * heads + hd) * n + j + 1) * dh,
                          out.data() + (bi * n + j) * heads * dh + hd * dh);
            }
        }
    }
    return out;
}

Tensor moe_attention(const MoeLoraAttention& layer, const Tensor& h, const Tensor& temb,
                     const Tensor& base_q, const Tensor& base_k, const Tensor& base_v,
                     MoeAttentionCache* cache) {
    check_bn_d(h, "moe_attention input h");
    if (!base_q.same_shape(h) || !base_k.same_shape(h) || !base_v.same_shape(h)) {
        throw DimensionError("base projections must match h's shape");
    }

    Tensor gates;
    if (layer.arch != AdapterArch::kLora) {
        const Tensor empty;
        const Tensor& gate_task =
            layer.arch == AdapterArch::kMoeTaskAware ? temb : empty;
        Tensor s = gate_scores(layer.gate, h, gate_task,
                               cache != nullptr ? &cache->gate : nullptr);
        gates = topk_gate(s, layer.top_k);
    }

    ExpertMixCache* mq = cache != nullptr ? &cache->mix_q : nullptr;
    ExpertMixCache* mk = cache != nullptr ? &cache->mix_k : nullptr;
    ExpertMixCache* mv = cache != nullptr ? &cache->mix_v : nullptr;
    Tensor q_moe = expert_mix(layer.q.experts, layer.q.shared, gates, h, mq);
    Tensor k_moe = expert_mix(layer.k.experts, layer.k.shared, gates, h, mk);
    Tensor v_moe = expert_mix(layer.v.experts, layer.v.shared, gates, h, mv);

    q_moe.vec() += base_q.vec();
    k_moe.vec() += base_k.vec();
    v_moe.vec() += base_v.vec();

    Tensor attn = attention_core(split_heads(q_moe, layer.num_heads),
                                 split_heads(k_moe, layer.num_heads),
                                 split_heads(v_moe, layer.num_heads),
                                 cache != nullptr ? &cache->attn : nullptr);
    if (cache != nullptr) {
        cache->gates = std::move(gates);
    }
    return merge_heads(attn);
}

MoeAttentionGrads moe_attention_vjp(const MoeLoraAttention& layer, const Tensor& h,
                                    const Tensor& temb, const MoeAttentionCache& cache,
                                    const Tensor& dout) {
    const Index d = h.dim(2);

    Tensor dq4, dk4, dv4;
    attention_core_vjp(cache.attn, split_heads(dout, layer.num_heads), &dq4, &dk4, &dv4);
    Tensor dq = merge_heads(dq4);
    Tensor dk = merge_heads(dk4);
    Tensor dv = merge_heads(dv4);

    MoeAttentionGrads grads;
    grads.dh = Tensor(h.shape());

    ExpertMixGrads gq = expert_mix_vjp(layer.q.experts, layer.q.shared, cache.gates, h,
                                       cache.mix_q, dq);
    ExpertMixGrads gk = expert_mix_vjp(layer.k.experts, layer.k.shared, cache.gates, h,
                                       cache.mix_k, dk);
    ExpertMixGrads gv = expert_mix_vjp(layer.v.experts, layer.v.shared, cache.gates, h,
                                       cache.mix_v, dv);
    grads.dh.vec() += gq.dh.vec() + gk.dh.vec() + gv.dh.vec();
    grads.dq_experts = std::move(gq.dexperts);
    grads.dk_experts = std::move(gk.dexperts);
    grads.dv_experts = std::move(gv.dexperts);
    grads.dq_shared = std::move(gq.dshared);
    grads.dk_shared = std::move(gk.dshared);
    grads.dv_shared = std::move(gv.dshared);

    if (layer.arch != AdapterArch::kLora) {
        // the same gating weights feed all three mixtures
        Tensor dgates(cache.gates.shape());
        dgates.vec() = gq.dg.vec() + gk.dg.vec() + gv.dg.vec();
        Tensor ds = topk_gate_vjp(cache.gates, dgates);
        GateScoresGrads gg = gate_scores_vjp(layer.gate, cache.gate, ds, d);
        grads.dh.vec() += gg.dh.vec();
        if (layer.arch == AdapterArch::kMoeTaskAware) {
            grads.dtemb = std::move(gg.dtemb);
        }
        grads.dgate = std::move(gg.dgate);
    }

    // gradients w.r.t. the frozen base projections pass straight through
    grads.d_base_q = std::move(dq);
    grads.d_base_k = std::move(dk);
    grads.d_base_v = std::move(dv);
    return grads;
}

RoutingStats collect_routing_stats(const std::vector<Tensor>& gates_per_layer,
                                   const std::vector<int>& y, Index num_tasks) {
    RoutingStats stats;
    stats.num_tasks = num_tasks;
    if (gates_per_layer.empty()) {
        return stats;
    }
    stats.num_experts = gates_per_layer.front().dim(2);
    stats.counts = Tensor({num_tasks, stats.num_experts});
    stats.expert_totals.assign(static_cast<std::size_t>(stats.num_experts), 0.0);

    for (const Tensor& g : gates_per_layer) {
        const Index b = g.dim(0);
        const Index n = g.dim(1);
        const Index ne = g.dim(2);
        if (b != static_cast<Index>(y.size())) {
            throw ConsistencyError("gate tensor batch does not match labels");
        }
        for (Index i = 0; i < b; ++i) {
            const Index task = y[static_cast<std::size_t>(i)];
            if (task < 0 || task >= num_tasks) {
                throw LabelError("routing stats label outside [0, num_tasks)");
            }
            for (Index j = 0; j < n; ++j) {
                for (Index e = 0; e < ne; ++e) {
                    if (g.at(i, j, e) != 0.0) {
                        stats.counts.at(task, e) += 1.0;
                        stats.expert_totals[static_cast<std::size_t>(e)] += 1.0;
                        stats.total_activations += 1.0;
                    }
                }
            }
        }
    }

    stats.task_entropy.assign(static_cast<std::size_t>(num_tasks), 0.0);
    for (Index t = 0; t < num_tasks; ++t) {
        double total = 0.0;
        for (Index e = 0; e < stats.num_experts; ++e) {
            total += stats.counts.at(t, e);
        }
        if (total == 0.0) {
            continue;
        }
        double entropy = 0.0;
        for (Index e = 0; e < stats.num_experts; ++e) {
            const double p = stats.counts.at(t, e) / total;
            if (p > 0.0) {
                entropy -= p * std::log(p);
            }
        }
        stats.task_entropy[static_cast<std::size_t>(t)] = entropy;
    }
    return stats;
}

}  // namespace x2edit
