#include "x2edit/verify.hpp"

#include <cmath>

#include "x2edit/contrastive.hpp"
#include "x2edit/dit.hpp"
#include "x2edit/error.hpp"
#include "x2edit/ops.hpp"
#include "x2edit/rng.hpp"
#include "x2edit/task_moe.hpp"

namespace x2edit {

namespace {

Tensor random_tensor(std::vector<Index> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

double dot_all(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

}  // namespace

double infonce_reference(const Tensor& raw_rows, const std::vector<int>& labels,
                         double tau, bool include_self_term, bool cosine_metric) {
    const Index b = raw_rows.dim(0);
    const Index m = raw_rows.dim(1);
    std::vector<std::vector<long double>> z(
        static_cast<std::size_t>(b), std::vector<long double>(static_cast<std::size_t>(m)));
    for (Index i = 0; i < b; ++i) {
        long double norm = 0.0L;
        for (Index c = 0; c < m; ++c) {
            const long double v = raw_rows.at(i, c);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (Index c = 0; c < m; ++c) {
            z[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] =
                static_cast<long double>(raw_rows.at(i, c)) / norm;
        }
    }
    long double total = 0.0L;
    int active = 0;
    for (Index i = 0; i < b; ++i) {
        bool has_positive = false;
        for (Index j = 0; j < b; ++j) {
            if (i != j &&
                labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
                has_positive = true;
            }
        }
        if (!has_positive) {
            continue;
        }
        long double numerator = 0.0L;
        long double denominator = 0.0L;
        for (Index k = 0; k < b; ++k) {
            if (i == k && !include_self_term) {
                continue;
            }
            long double dist = 0.0L;
            for (Index c = 0; c < m; ++c) {
                const long double diff =
                    z[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] -
                    z[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
                dist += diff * diff;
            }
            if (cosine_metric) {
                dist /= 2.0L;  // cosine distance is half the squared chord
            }
            const long double e = std::exp(-dist / static_cast<long double>(tau));
            denominator += e;
            if (i != k &&
                labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(k)]) {
                numerator += e;
            }
        }
        total += -std::log(numerator / denominator);
        ++active;
    }
    return active > 0 ? static_cast<double>(total / active) : 0.0;
}

ContrastiveVerifyResult verify_contrastive(const std::vector<Index>& batch_sizes,
                                           const std::vector<int>& worker_counts,
                                           double tau, std::uint64_t seed,
                                           int oracle_cases) {
    if (tau <= 0.0) {
        throw ParameterError("verify-contrastive requires tau > 0");
    }
    Rng rng(seed);
    ContrastiveVerifyResult result;
    result.pass = true;

    // closed form: coincident positive pair gives -log(1/2) for any tau
    {
        Tensor z({2, 3});
        z.at(0, 0) = 1.0;
        z.at(1, 0) = 1.0;
        InfoNceResult r = task_infonce(pairwise_sq_dist(z), build_task_mask({0, 0}), tau);
        result.ln2_abs_err = std::abs(r.loss - std::log(2.0));
        if (result.ln2_abs_err > 1e-12) {
            result.pass = false;
            result.failures.push_back("closed-form ln2 check exceeded 1e-12");
        }
    }

    // brute-force oracle equivalence on random batches
    for (int c = 0; c < oracle_cases; ++c) {
        const Index b = 2 + static_cast<Index>(rng.uniform_int(7));  // up to 8
        std::vector<int> y(static_cast<std::size_t>(b));
        for (auto& v : y) v = static_cast<int>(rng.uniform_int(3));
        Tensor raw = random_tensor({b, 10}, rng);

        Tensor z = l2_normalize(raw);
        InfoNceResult impl = task_infonce(pairwise_sq_dist(z), build_task_mask(y), tau);
        const double oracle = infonce_reference(raw, y, tau, true, false);
        if (impl.active == 0) {
            if (impl.loss != 0.0 || oracle != 0.0) {
                result.pass = false;
                result.failures.push_back("inactive batch produced nonzero loss");
            }
            continue;
        }
        const double rel = std::abs(impl.loss - oracle) / std::abs(oracle);
        result.worst_oracle_rel_err = std::max(result.worst_oracle_rel_err, rel);
        ++result.oracle_cases;
        if (rel >= 1e-10) {
            result.pass = false;
            result.failures.push_back("oracle mismatch " + std::to_string(rel) + " at case " +
                                      std::to_string(c));
        }
    }

    // sharded gather equals the single-device loss; remote grads stay zero
    InfoNceOptions opts;
    opts.tau = tau;
    for (Index b : batch_sizes) {
        std::vector<int> y(static_cast<std::size_t>(b));
        for (auto& v : y) v = static_cast<int>(rng.uniform_int(3));
        Tensor h = random_tensor({b, 2, 4}, rng);
        Tensor z = l2_normalize(h.reshaped({b, 8}));
        const double single = task_infonce(pairwise_sq_dist(z), build_task_mask(y), tau).loss;

        for (int workers : worker_counts) {
            if (workers < 1 || static_cast<Index>(workers) > b) {
                continue;
            }
            ShardedBatch sb;
            Index row = 0;
            for (int w = 0; w < workers; ++w) {
                const Index count =
                    b / workers + (w < static_cast<int>(b % workers) ? 1 : 0);
                HiddenBatch shard;
                shard.h = Tensor({count, 2, 4});
                std::copy(h.data() + row * 8, h.data() + (row + count) * 8, shard.h.data());
                shard.y.assign(y.begin() + row, y.begin() + row + count);
                sb.shards.push_back(std::move(shard));
                row += count;
            }
            ShardedInfoNce sr = sharded_task_infonce(sb, opts, /*with_grads=*/true);
            const double diff = std::abs(sr.loss - single);
            result.worst_sharded_diff = std::max(result.worst_sharded_diff, diff);
            if (diff >= 1e-9) {
                result.pass = false;
                result.failures.push_back("sharded loss differs by " + std::to_string(diff) +
                                          " at b=" + std::to_string(b) +
                                          " W=" + std::to_string(workers));
            }
            // remote rows are constants inside each worker's backward
            Index lo = 0;
            for (std::size_t w = 0; w < sb.shards.size(); ++w) {
                const Index count = sb.shards[w].h.dim(0);
                const Tensor& wg = sr.worker_grads[w];
                for (Index r = 0; r < b; ++r) {
                    if (r >= lo && r < lo + count) {
                        continue;
                    }
                    for (Index cix = 0; cix < 8; ++cix) {
                        const double g = std::abs(wg.at(r, cix));
                        result.worst_remote_grad = std::max(result.worst_remote_grad, g);
                        if (g != 0.0) {
                            result.pass = false;
                            result.failures.push_back("nonzero remote gradient");
                        }
                    }
                }
                lo += count;
            }
        }
    }
    return result;
}

namespace {

// tie-free gate helper shared by the suites
bool scores_tie_free(const Tensor& scores, int top_k, double min_gap = 1e-3) {
    const Index ne = scores.dim(2);
    const Index rows = scores.size() / ne;
    for (Index r = 0; r < rows; ++r) {
        std::vector<double> row(static_cast<std::size_t>(ne));
        for (Index e = 0; e < ne; ++e) {
            row[static_cast<std::size_t>(e)] = scores[r * ne + e];
        }
        std::sort(row.begin(), row.end(), std::greater<>());
        if (row[static_cast<std::size_t>(top_k - 1)] - row[static_cast<std::size_t>(top_k)] <
            min_gap) {
            return false;
        }
    }
    return true;
}

DitConfig suite_model_config() {
    DitConfig cfg;
    cfg.d_model = 16;
    cfg.num_heads = 2;
    cfg.num_blocks = 2;
    cfg.n_tgt = 4;
    cfg.n_src = 4;
    cfg.d_in = 3;
    cfg.time_width = 8;
    cfg.num_experts = 3;
    cfg.top_k = 2;
    cfg.rank = 2;
    cfg.shared_rank = 2;
    cfg.task_dim = 6;
    cfg.num_tasks = 4;
    // wider init than the training default keeps every trainable coordinate's
    // gradient well above the central-difference noise floor
    cfg.init_std = 0.08;
    return cfg;
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(const std::string& scope,
                                                 const GradSuiteOptions& opts) {
    if (scope != "gate" && scope != "experts" && scope != "contrastive" && scope != "dit" &&
        scope != "all") {
        throw ConfigError("unknown gradcheck scope: " + scope);
    }
    const bool all = scope == "all";
    Rng rng(opts.seed);
    std::vector<GradCheckReport> reports;
    bool fault_pending = opts.inject_fault;

    auto check = [&](const std::string& name, const std::function<double(const Tensor&)>& loss,
                     Tensor analytic, const Tensor& point) {
        if (fault_pending) {
            analytic[analytic.size() / 2] += 0.5;
            fault_pending = false;
        }
        reports.push_back(
            finite_diff_check(name, loss, analytic, point, opts.probes, opts.tolerance, rng));
    };

    if (all || scope == "gate") {
        // task-conditioned gating: softmax(gate(concat(h, temb)))
        GateNetwork gate;
        gate.weight = random_tensor({8 + 4, 5}, rng, -0.5, 0.5);
        gate.bias = random_tensor({5}, rng, -0.2, 0.2);
        Tensor h = random_tensor({2, 3, 8}, rng);
        Tensor temb = random_tensor({2, 3, 4}, rng);
        Tensor r = random_tensor({2, 3, 5}, rng);

        GateScoresCache cache;
        gate_scores(gate, h, temb, &cache);
        GateScoresGrads grads = gate_scores_vjp(gate, cache, r, 8);

        check("gate/weight", [&](const Tensor& t) {
            GateNetwork probe = gate;
            probe.weight = t;
            return dot_all(gate_scores(probe, h, temb), r);
        }, grads.dgate.weight, gate.weight);
        check("gate/bias", [&](const Tensor& t) {
            GateNetwork probe = gate;
            probe.bias = t;
            return dot_all(gate_scores(probe, h, temb), r);
        }, grads.dgate.bias, gate.bias);
        check("gate/hidden", [&](const Tensor& t) {
            return dot_all(gate_scores(gate, t, temb), r);
        }, grads.dh, h);
        check("gate/task_embedding", [&](const Tensor& t) {
            return dot_all(gate_scores(gate, h, t), r);
        }, grads.dtemb, temb);
    }

    if (all || scope == "experts") {
        // sparse mixture with top-k masking at a tie-free point
        MoeLayerConfig mcfg;
        mcfg.d_model = 8;
        mcfg.num_heads = 2;
        mcfg.task_dim = 4;
        mcfg.num_experts = 4;
        mcfg.top_k = 2;
        mcfg.rank = 2;
        mcfg.shared_rank = 2;
        MoeLoraAttention layer = make_moe_lora_attention(mcfg, rng);
        for (ProjectionAdapters* proj : {&layer.q, &layer.k, &layer.v}) {
            for (LoraExpert& e : proj->experts) {
                e.up = random_tensor(e.up.shape(), rng, -0.4, 0.4);
            }
            proj->shared.up = random_tensor(proj->shared.up.shape(), rng, -0.4, 0.4);
        }

        Tensor h = random_tensor({2, 3, 8}, rng);
        Tensor s;
        do {
            s = softmax(random_tensor({2, 3, 4}, rng, -2.0, 2.0), -1);
        } while (!scores_tie_free(s, mcfg.top_k));
        Tensor g = topk_gate(s, mcfg.top_k);
        Tensor r = random_tensor({2, 3, 8}, rng);

        ExpertMixCache cache;
        expert_mix(layer.q.experts, layer.q.shared, g, h, &cache);
        ExpertMixGrads grads = expert_mix_vjp(layer.q.experts, layer.q.shared, g, h, cache, r);

        check("experts/down", [&](const Tensor& t) {
            std::vector<LoraExpert> probe = layer.q.experts;
            probe[1].down = t;
            return dot_all(expert_mix(probe, layer.q.shared, g, h), r);
        }, grads.dexperts[1].down, layer.q.experts[1].down);
        check("experts/up", [&](const Tensor& t) {
            std::vector<LoraExpert> probe = layer.q.experts;
            probe[0].up = t;
            return dot_all(expert_mix(probe, layer.q.shared, g, h), r);
        }, grads.dexperts[0].up, layer.q.experts[0].up);
        check("experts/shared_down", [&](const Tensor& t) {
            LoraExpert probe = layer.q.shared;
            probe.down = t;
            return dot_all(expert_mix(layer.q.experts, probe, g, h), r);
        }, grads.dshared.down, layer.q.shared.down);
        check("experts/hidden", [&](const Tensor& t) {
            return dot_all(expert_mix(layer.q.experts, layer.q.shared, g, t), r);
        }, grads.dh, h);
        // straight-through selection: scores move, the mask stays
        Tensor ds = topk_gate_vjp(g, grads.dg);
        check("experts/scores", [&](const Tensor& t) {
            return dot_all(expert_mix(layer.q.experts, layer.q.shared,
                                      topk_gate(t, mcfg.top_k), h), r);
        }, ds, s);
    }

    if (all || scope == "contrastive") {
        const std::vector<int> y{0, 0, 1, 1, 2, 2};
        Tensor raw = random_tensor({6, 9}, rng);
        for (bool cosine : {false, true}) {
            InfoNceOptions copts;
            copts.tau = 0.5;
            copts.metric = cosine ? ContrastiveMetric::kCosine : ContrastiveMetric::kSquaredL2;
            TaskInfoNceGrad grad = task_infonce_grad(raw, y, copts);
            check(cosine ? "contrastive/composite_cosine" : "contrastive/composite_l2",
                  [&, copts](const Tensor& t) { return task_infonce_grad(t, y, copts).loss; },
                  grad.dz, raw);
        }
    }

    if (all || scope == "dit") {
        DitConfig cfg = suite_model_config();
        Rng init_rng(opts.seed + 17);
        DitModel model = make_dit_model(cfg, init_rng);
        for (DitBlock& blk : model.blocks) {
            for (ProjectionAdapters* proj : {&blk.moe.q, &blk.moe.k, &blk.moe.v}) {
                for (LoraExpert& e : proj->experts) {
                    e.up = random_tensor(e.up.shape(), init_rng, -0.6, 0.6);
                }
                proj->shared.up = random_tensor(proj->shared.up.shape(), init_rng, -0.6, 0.6);
            }
        }

        // full-layer attention path
        {
            MoeLoraAttention& layer = model.blocks[0].moe;
            TaskEmbeddingTable table = make_task_embedding_table(4, 6, 0.4, init_rng);
            const std::vector<int> y{0, 3};
            Tensor h, temb;
            do {
                h = random_tensor({2, 3, 16}, rng);
                temb = broadcast_task_embedding(table, y, 3);
            } while ([&] {
                GateScoresCache gc;
                gate_scores(layer.gate, h, temb, &gc);
                return !scores_tie_free(gc.scores, layer.top_k);
            }());
            Tensor bq = random_tensor({2, 3, 16}, rng);
            Tensor bk = random_tensor({2, 3, 16}, rng);
            Tensor bv = random_tensor({2, 3, 16}, rng);
            Tensor r = random_tensor({2, 3, 16}, rng);

            MoeAttentionCache cache;
            moe_attention(layer, h, temb, bq, bk, bv, &cache);
            MoeAttentionGrads grads = moe_attention_vjp(layer, h, temb, cache, r);

            check("moe_attention/hidden", [&](const Tensor& t) {
                return dot_all(moe_attention(layer, t, temb, bq, bk, bv), r);
            }, grads.dh, h);
            check("moe_attention/gate_weight", [&](const Tensor& t) {
                MoeLoraAttention probe = layer;
                probe.gate.weight = t;
                return dot_all(moe_attention(probe, h, temb, bq, bk, bv), r);
            }, grads.dgate.weight, layer.gate.weight);
            check("moe_attention/expert_up", [&](const Tensor& t) {
                MoeLoraAttention probe = layer;
                probe.v.experts[1].up = t;
                return dot_all(moe_attention(probe, h, temb, bq, bk, bv), r);
            }, grads.dv_experts[1].up, layer.v.experts[1].up);
            check("moe_attention/task_table", [&](const Tensor& t) {
                TaskEmbeddingTable probe{t};
                return dot_all(
                    moe_attention(layer, h, broadcast_task_embedding(probe, y, 3), bq, bk, bv),
                    r);
            }, broadcast_task_embedding_vjp(grads.dtemb, y, 4), table.table);
        }

        // combined objective over 50 random trainable coordinates
        {
            Rng data_rng(opts.seed + 23);
            std::vector<FlowSample> batch;
            bool tie_free = false;
            while (!tie_free) {
                batch.clear();
                for (int i = 0; i < 4; ++i) {
                    FlowSample s;
                    s.x0 = random_tensor({cfg.n_tgt, cfg.d_in}, data_rng);
                    s.src = random_tensor({cfg.n_src, cfg.d_in}, data_rng);
                    s.eps = random_tensor({cfg.n_tgt, cfg.d_in}, data_rng);
                    s.t = data_rng.uniform(0.05, 0.95);
                    s.y = i % 4;
                    batch.push_back(std::move(s));
                }
                batch[1].y = batch[0].y;
                DitCache probe_cache;
                dit_forward(model, batch, true, &probe_cache);
                tie_free = true;
                for (const DitBlockCache& bc : probe_cache.blocks) {
                    if (!scores_tie_free(bc.moe.gate.scores, cfg.top_k)) {
                        tie_free = false;
                    }
                }
            }

            const double lambda = 0.2;
            const double tau = 0.5;
            auto loss_of = [&](const DitModel& m) {
                DitForwardResult fw = dit_forward(m, batch, true, nullptr);
                Tensor u(fw.v_pred.shape());
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    Tensor ui = flow_target(batch[i].x0, batch[i].eps);
                    std::copy(ui.data(), ui.data() + ui.size(),
                              u.data() + static_cast<Index>(i) * ui.size());
                }
                InfoNceOptions copts;
                copts.tau = tau;
                MultiLayerTaskLoss mt = multi_layer_task_loss(fw.hidden, copts, true, false);
                return total_loss(mt.loss, diffusion_loss(fw.v_pred, u), lambda);
            };

            DitCache cache;
            DitForwardResult fw = dit_forward(model, batch, true, &cache);
            Tensor u(fw.v_pred.shape());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Tensor ui = flow_target(batch[i].x0, batch[i].eps);
                std::copy(ui.data(), ui.data() + ui.size(),
                          u.data() + static_cast<Index>(i) * ui.size());
            }
            InfoNceOptions copts;
            copts.tau = tau;
            MultiLayerTaskLoss mt = multi_layer_task_loss(fw.hidden, copts, true, true);
            Tensor dv = diffusion_loss_grad(fw.v_pred, u);
            dv.vec() *= lambda;
            DitModel grads = zeros_like(model);
            dit_backward(model, cache, dv, mt.dhidden, &grads);

            auto refs = param_refs(model);
            auto grefs = param_refs(grads);
            std::vector<std::size_t> trainable_idx;
            for (std::size_t i = 0; i < refs.size(); ++i) {
                if (refs[i].trainable) {
                    trainable_idx.push_back(i);
                }
            }

            GradCheckReport report;
            report.op_name = "total_loss/trainables";
            report.probe_count = opts.probes;
            report.tolerance = opts.tolerance;
            for (int p = 0; p < opts.probes; ++p) {
                const std::size_t which = trainable_idx[static_cast<std::size_t>(
                    rng.uniform_int(trainable_idx.size()))];
                Tensor& tensor = *refs[which].tensor;
                const Index coord = static_cast<Index>(
                    rng.uniform_int(static_cast<std::uint64_t>(tensor.size())));
                const double saved = tensor[coord];
                const double h_step = 1e-5;
                tensor[coord] = saved + h_step;
                const double f_plus = loss_of(model);
                tensor[coord] = saved - h_step;
                const double f_minus = loss_of(model);
                tensor[coord] = saved;
                const double numeric = (f_plus - f_minus) / (2.0 * h_step);
                const double analytic = (*grefs[which].tensor)[coord];
                const double rel = std::abs(analytic - numeric) /
                                   std::max({1e-8, std::abs(analytic), std::abs(numeric)});
                report.max_rel_err = std::max(report.max_rel_err, rel);
            }
            report.pass = report.max_rel_err <= report.tolerance;
            reports.push_back(report);
        }
    }

    return reports;
}

}  // namespace x2edit
