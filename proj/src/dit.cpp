#include "x2edit/dit.hpp"

#include <cmath>

#include "x2edit/error.hpp"
#include "x2edit/ops.hpp"

namespace x2edit {

namespace {

constexpr Scalar kLnEps = 1e-5;

Tensor gaussian_tensor(std::vector<Index> shape, Scalar stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = rng.gaussian(0.0, stddev);
    }
    return t;
}

Scalar gelu(Scalar x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

Scalar gelu_grad(Scalar x) {
    const Scalar phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

// y = gamma * (x - mean) / sqrt(var + eps) + beta, per row
Tensor layer_norm(const Tensor& x, Index rows, Index d, const Tensor& gamma,
                  const Tensor& beta, LayerNormCache* cache) {
    Tensor y(x.shape());
    Tensor x_hat({rows, d});
    std::vector<Scalar> inv_std(static_cast<std::size_t>(rows));
    for (Index r = 0; r < rows; ++r) {
        ConstVecMap xi(x.data() + r * d, d);
        const Scalar mean = xi.mean();
        const Scalar var = (xi.array() - mean).square().mean();
        const Scalar is = 1.0 / std::sqrt(var + kLnEps);
        inv_std[static_cast<std::size_t>(r)] = is;
        VecMap xh(x_hat.data() + r * d, d);
        xh = (xi.array() - mean) * is;
        VecMap(y.data() + r * d, d) =
            xh.array() * ConstVecMap(gamma.data(), d).array() +
            ConstVecMap(beta.data(), d).array();
    }
    if (cache != nullptr) {
        cache->x_hat = std::move(x_hat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

// dx from dy; accumulates dgamma/dbeta
Tensor layer_norm_vjp(const LayerNormCache& cache, const Tensor& dy, const Tensor& gamma,
                      Tensor* dgamma, Tensor* dbeta) {
    const Index rows = cache.x_hat.dim(0);
    const Index d = cache.x_hat.dim(1);
    Tensor dx(dy.shape());
    for (Index r = 0; r < rows; ++r) {
        ConstVecMap dyi(dy.data() + r * d, d);
        ConstVecMap xh(cache.x_hat.data() + r * d, d);
        VecMap(dgamma->data(), d) += dyi.cwiseProduct(xh);
        VecMap(dbeta->data(), d) += dyi;
        Eigen::VectorXd dxhat = dyi.cwiseProduct(ConstVecMap(gamma.data(), d));
        const Scalar m1 = dxhat.mean();
        const Scalar m2 = dxhat.cwiseProduct(xh).mean();
        VecMap(dx.data() + r * d, d) =
            (dxhat.array() - m1 - xh.array() * m2) *
            cache.inv_std[static_cast<std::size_t>(r)];
    }
    return dx;
}

// half sines, half cosines over geometric frequencies of the scaled time
Tensor sinusoidal_time(double t, Index width) {
    const Index half = width / 2;
    Tensor emb({width});
    for (Index i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = 1000.0 * t * freq;
        emb[i] = std::sin(arg);
        emb[half + i] = std::cos(arg);
    }
    return emb;
}

// affine y = x W + b over a (rows, in) view
Tensor affine(const Tensor& x, Index rows, Index in, const Tensor& w, const Tensor& b) {
    Tensor y({rows, w.dim(1)});
    y.mat().noalias() = x.mat(rows, in) * w.mat();
    y.mat().rowwise() += ConstVecMap(b.data(), b.size()).transpose();
    return y;
}

// accumulates dw/db and returns dx for y = x W + b
Tensor affine_vjp(const Tensor& x, Index rows, Index in, const Tensor& w,
                  const Tensor& dy, Tensor* dw, Tensor* db) {
    dw->mat().noalias() += x.mat(rows, in).transpose() * dy.mat(rows, w.dim(1));
    VecMap(db->data(), db->size()) += dy.mat(rows, w.dim(1)).colwise().sum();
    Tensor dx({rows, in});
    dx.mat().noalias() = dy.mat(rows, w.dim(1)) * w.mat().transpose();
    return dx;
}

}  // namespace

void DitConfig::validate() const {
    if (d_model < 1 || num_blocks < 1 || n_tgt < 1 || n_src < 1 || d_in < 1) {
        throw ConfigError("model extents must be positive");
    }
    if (num_heads < 1 || d_model % num_heads != 0) {
        throw DimensionError("head count must divide d_model");
    }
    if (time_width < 2 || time_width % 2 != 0) {
        throw ConfigError("time_width must be even and >= 2");
    }
    if (num_tasks < 1) {
        throw ConfigError("num_tasks must be >= 1");
    }
    if (arch != AdapterArch::kLora &&
        (num_experts < 1 || top_k < 1 || top_k > static_cast<int>(num_experts))) {
        throw ConfigError("adapter config requires num_experts >= top_k >= 1");
    }
}

DitModel make_dit_model(const DitConfig& cfg, Rng& rng) {
    cfg.validate();
    DitModel m;
    m.cfg = cfg;
    const Index d = cfg.d_model;
    const Scalar s = cfg.init_std;

    m.w_in = gaussian_tensor({cfg.d_in, d}, s, rng);
    m.b_in = Tensor({d});
    m.pos_emb = gaussian_tensor({cfg.seq_len(), d}, s, rng);
    m.wt1 = gaussian_tensor({cfg.time_width, d}, s, rng);
    m.bt1 = Tensor({d});
    m.wt2 = gaussian_tensor({d, d}, s, rng);
    m.bt2 = Tensor({d});

    MoeLayerConfig moe_cfg;
    moe_cfg.arch = cfg.arch;
    moe_cfg.num_heads = cfg.num_heads;
    moe_cfg.d_model = d;
    moe_cfg.task_dim = cfg.task_dim;
    moe_cfg.num_experts = cfg.num_experts;
    moe_cfg.top_k = cfg.top_k;
    moe_cfg.rank = cfg.rank;
    moe_cfg.shared_rank = cfg.shared_rank;
    moe_cfg.lora_alpha = cfg.lora_alpha;
    moe_cfg.init_std = s;

    // Backbone tensors first, adapters afterwards: the backbone consumes a
    // fixed prefix of the init stream, so arms that differ only in adapter
    // architecture share the exact same frozen base.
    for (Index l = 0; l < cfg.num_blocks; ++l) {
        DitBlock blk;
        blk.ln1_g = Tensor({d});
        blk.ln1_g.fill(1.0);
        blk.ln1_b = Tensor({d});
        blk.wq = gaussian_tensor({d, d}, s, rng);
        blk.bq = Tensor({d});
        blk.wk = gaussian_tensor({d, d}, s, rng);
        blk.bk = Tensor({d});
        blk.wv = gaussian_tensor({d, d}, s, rng);
        blk.bv = Tensor({d});
        blk.wo = gaussian_tensor({d, d}, s, rng);
        blk.bo = Tensor({d});
        blk.ln2_g = Tensor({d});
        blk.ln2_g.fill(1.0);
        blk.ln2_b = Tensor({d});
        blk.wm1 = gaussian_tensor({d, 4 * d}, s, rng);
        blk.bm1 = Tensor({4 * d});
        blk.wm2 = gaussian_tensor({4 * d, d}, s, rng);
        blk.bm2 = Tensor({d});
        m.blocks.push_back(std::move(blk));
    }

    m.lnf_g = Tensor({d});
    m.lnf_g.fill(1.0);
    m.lnf_b = Tensor({d});
    m.w_head = gaussian_tensor({d, cfg.d_in}, s, rng);
    m.b_head = Tensor({cfg.d_in});
    m.table = make_task_embedding_table(cfg.num_tasks, cfg.task_dim, s, rng);

    for (Index l = 0; l < cfg.num_blocks; ++l) {
        m.blocks[static_cast<std::size_t>(l)].moe = make_moe_lora_attention(moe_cfg, rng);
    }
    return m;
}

std::vector<ParamRef> param_refs(DitModel& model) {
    std::vector<ParamRef> refs;
    auto add = [&](const std::string& name, Tensor& t, bool trainable) {
        refs.push_back({name, &t, trainable});
    };
    add("input.w", model.w_in, false);
    add("input.b", model.b_in, false);
    add("pos", model.pos_emb, false);
    add("time.w1", model.wt1, false);
    add("time.b1", model.bt1, false);
    add("time.w2", model.wt2, false);
    add("time.b2", model.bt2, false);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        DitBlock& blk = model.blocks[l];
        const std::string p = "block" + std::to_string(l) + ".";
        add(p + "ln1.g", blk.ln1_g, false);
        add(p + "ln1.b", blk.ln1_b, false);
        add(p + "attn.wq", blk.wq, false);
        add(p + "attn.bq", blk.bq, false);
        add(p + "attn.wk", blk.wk, false);
        add(p + "attn.bk", blk.bk, false);
        add(p + "attn.wv", blk.wv, false);
        add(p + "attn.bv", blk.bv, false);
        add(p + "attn.wo", blk.wo, false);
        add(p + "attn.bo", blk.bo, false);
        add(p + "ln2.g", blk.ln2_g, false);
        add(p + "ln2.b", blk.ln2_b, false);
        add(p + "mlp.w1", blk.wm1, false);
        add(p + "mlp.b1", blk.bm1, false);
        add(p + "mlp.w2", blk.wm2, false);
        add(p + "mlp.b2", blk.bm2, false);
        auto add_proj = [&](const std::string& tag, ProjectionAdapters& proj) {
            for (std::size_t e = 0; e < proj.experts.size(); ++e) {
                add(p + "moe." + tag + ".expert" + std::to_string(e) + ".down",
                    proj.experts[e].down, true);
                add(p + "moe." + tag + ".expert" + std::to_string(e) + ".up",
                    proj.experts[e].up, true);
            }
            add(p + "moe." + tag + ".shared.down", proj.shared.down, true);
            add(p + "moe." + tag + ".shared.up", proj.shared.up, true);
        };
        add_proj("q", blk.moe.q);
        add_proj("k", blk.moe.k);
        add_proj("v", blk.moe.v);
        if (blk.moe.arch != AdapterArch::kLora) {
            add(p + "moe.gate.w", blk.moe.gate.weight, true);
            add(p + "moe.gate.b", blk.moe.gate.bias, true);
        }
    }
    add("final.ln.g", model.lnf_g, false);
    add("final.ln.b", model.lnf_b, false);
    add("head.w", model.w_head, false);
    add("head.b", model.b_head, false);
    add("task_table", model.table.table, true);
    return refs;
}

DitModel zeros_like(const DitModel& model) {
    DitModel z = model;
    for (ParamRef& ref : param_refs(z)) {
        ref.tensor->set_zero();
    }
    return z;
}

DitForwardResult dit_forward(const DitModel& model, const std::vector<FlowSample>& batch,
                             bool moe_enabled, DitCache* cache) {
    const DitConfig& cfg = model.cfg;
    const Index b = static_cast<Index>(batch.size());
    if (b == 0) {
        throw DimensionError("dit_forward requires a nonempty batch");
    }
    const Index n = cfg.seq_len();
    const Index d = cfg.d_model;

    std::vector<int> y(batch.size());
    Tensor seq({b * n, cfg.d_in});
    for (Index i = 0; i < b; ++i) {
        const FlowSample& s = batch[static_cast<std::size_t>(i)];
        if (s.x0.size() != cfg.n_tgt * cfg.d_in || s.src.size() != cfg.n_src * cfg.d_in ||
            !s.eps.same_shape(s.x0)) {
            throw DimensionError("flow sample extents disagree with the model config");
        }
        y[static_cast<std::size_t>(i)] = s.y;
        Scalar* row = seq.data() + i * n * cfg.d_in;
        std::copy(s.src.data(), s.src.data() + cfg.n_src * cfg.d_in, row);
        Scalar* tgt = row + cfg.n_src * cfg.d_in;
        for (Index e = 0; e < cfg.n_tgt * cfg.d_in; ++e) {
            tgt[e] = (1.0 - s.t) * s.x0[e] + s.t * s.eps[e];
        }
    }

    // token embedding + positions + per-sample time conditioning
    Tensor x = affine(seq, b * n, cfg.d_in, model.w_in, model.b_in);
    for (Index i = 0; i < b; ++i) {
        x.mat(b * n, d).middleRows(i * n, n) += model.pos_emb.mat();
    }
    std::vector<Tensor> time_emb, time_pre, time_act;
    for (Index i = 0; i < b; ++i) {
        Tensor emb = sinusoidal_time(batch[static_cast<std::size_t>(i)].t, cfg.time_width);
        Tensor pre = affine(emb, 1, cfg.time_width, model.wt1, model.bt1);
        Tensor act({1, d});
        for (Index c = 0; c < d; ++c) act[c] = gelu(pre[c]);
        Tensor tv = affine(act, 1, d, model.wt2, model.bt2);
        x.mat(b * n, d).middleRows(i * n, n).rowwise() += ConstVecMap(tv.data(), d).transpose();
        if (cache != nullptr) {
            time_emb.push_back(std::move(emb));
            time_pre.push_back(std::move(pre));
            time_act.push_back(std::move(act));
        }
    }

    const bool task_aware = moe_enabled && cfg.arch == AdapterArch::kMoeTaskAware;
    Tensor temb;
    if (task_aware) {
        temb = broadcast_task_embedding(model.table, y, n);
    }

    if (cache != nullptr) {
        cache->moe_enabled = moe_enabled;
        cache->y = y;
        cache->seq_in = seq;
        cache->temb = temb;
        cache->time_emb = std::move(time_emb);
        cache->time_pre = std::move(time_pre);
        cache->time_act = std::move(time_act);
        cache->blocks.assign(static_cast<std::size_t>(cfg.num_blocks), {});
    }

    DitForwardResult result;
    for (Index l = 0; l < cfg.num_blocks; ++l) {
        const DitBlock& blk = model.blocks[static_cast<std::size_t>(l)];
        DitBlockCache* bc = cache != nullptr ? &cache->blocks[static_cast<std::size_t>(l)] : nullptr;

        Tensor attn_in = layer_norm(x, b * n, d, blk.ln1_g, blk.ln1_b,
                                    bc != nullptr ? &bc->ln1 : nullptr)
                             .reshaped({b, n, d});
        Tensor base_q = affine(attn_in, b * n, d, blk.wq, blk.bq).reshaped({b, n, d});
        Tensor base_k = affine(attn_in, b * n, d, blk.wk, blk.bk).reshaped({b, n, d});
        Tensor base_v = affine(attn_in, b * n, d, blk.wv, blk.bv).reshaped({b, n, d});

        Tensor attn_out;
        if (moe_enabled) {
            attn_out = moe_attention(blk.moe, attn_in, temb, base_q, base_k, base_v,
                                     bc != nullptr ? &bc->moe : nullptr);
        } else {
            attn_out = merge_heads(attention_core(
                split_heads(base_q, blk.moe.num_heads), split_heads(base_k, blk.moe.num_heads),
                split_heads(base_v, blk.moe.num_heads),
                bc != nullptr ? &bc->plain_attn : nullptr));
        }

        Tensor proj = affine(attn_out, b * n, d, blk.wo, blk.bo);
        x.vec() += proj.vec();

        Tensor mlp_in = layer_norm(x, b * n, d, blk.ln2_g, blk.ln2_b,
                                   bc != nullptr ? &bc->ln2 : nullptr);
        Tensor mlp_pre = affine(mlp_in, b * n, d, blk.wm1, blk.bm1);
        Tensor mlp_act(mlp_pre.shape());
        for (Index i = 0; i < mlp_pre.size(); ++i) mlp_act[i] = gelu(mlp_pre[i]);
        Tensor mlp_out = affine(mlp_act, b * n, 4 * d, blk.wm2, blk.bm2);
        x.vec() += mlp_out.vec();

        if (bc != nullptr) {
            bc->attn_in = std::move(attn_in);
            bc->base_q = std::move(base_q);
            bc->base_k = std::move(base_k);
            bc->base_v = std::move(base_v);
            bc->attn_out = std::move(attn_out);
            bc->mlp_in = std::move(mlp_in);
            bc->mlp_pre = std::move(mlp_pre);
            bc->mlp_act = std::move(mlp_act);
        }

        HiddenBatch tap;
        tap.h = x.reshaped({b, n, d});
        tap.y = y;
        tap.layer_index = static_cast<int>(l);
        result.hidden.push_back(std::move(tap));
    }

    Tensor lnf_out = layer_norm(x, b * n, d, model.lnf_g, model.lnf_b,
                                cache != nullptr ? &cache->lnf : nullptr);
    // head reads only the target-token positions
    Tensor tgt_rows({b * cfg.n_tgt, d});
    for (Index i = 0; i < b; ++i) {
        std::copy(lnf_out.data() + (i * n + cfg.n_src) * d, lnf_out.data() + (i + 1) * n * d,
                  tgt_rows.data() + i * cfg.n_tgt * d);
    }
    Tensor v = affine(tgt_rows, b * cfg.n_tgt, d, model.w_head, model.b_head);
    result.v_pred = v.reshaped({b, cfg.n_tgt, cfg.d_in});

    if (cache != nullptr) {
        cache->lnf_out = std::move(lnf_out);
    }
    return result;
}

void dit_backward(const DitModel& model, const DitCache& cache,
                  const Tensor& dv_pred, const std::vector<Tensor>& dhidden,
                  DitModel* grads) {
    const DitConfig& cfg = model.cfg;
    const Index b = static_cast<Index>(cache.y.size());
    const Index n = cfg.seq_len();
    const Index d = cfg.d_model;

    if (!dhidden.empty() && dhidden.size() != model.blocks.size()) {
        throw DimensionError("dhidden must carry one cotangent per block");
    }

    // head: scatter target-row cotangents back into the full sequence
    Tensor tgt_rows({b * cfg.n_tgt, d});
    for (Index i = 0; i < b; ++i) {
        std::copy(cache.lnf_out.data() + (i * n + cfg.n_src) * d,
                  cache.lnf_out.data() + (i + 1) * n * d,
                  tgt_rows.data() + i * cfg.n_tgt * d);
    }
    Tensor dtgt = affine_vjp(tgt_rows, b * cfg.n_tgt, d, model.w_head,
                             dv_pred.reshaped({b * cfg.n_tgt, cfg.d_in}),
                             &grads->w_head, &grads->b_head);
    Tensor dlnf_out({b * n, d});
    for (Index i = 0; i < b; ++i) {
        std::copy(dtgt.data() + i * cfg.n_tgt * d, dtgt.data() + (i + 1) * cfg.n_tgt * d,
                  dlnf_out.data() + (i * n + cfg.n_src) * d);
    }
    Tensor g = layer_norm_vjp(cache.lnf, dlnf_out, model.lnf_g, &grads->lnf_g, &grads->lnf_b);

    Tensor dtemb_total;
    const bool task_aware = cache.moe_enabled && cfg.arch == AdapterArch::kMoeTaskAware;
    if (task_aware) {
        dtemb_total = Tensor(cache.temb.shape());
    }

    for (Index l = cfg.num_blocks - 1; l >= 0; --l) {
        const DitBlock& blk = model.blocks[static_cast<std::size_t>(l)];
        DitBlock& gblk = grads->blocks[static_cast<std::size_t>(l)];
        const DitBlockCache& bc = cache.blocks[static_cast<std::size_t>(l)];

        if (!dhidden.empty() && dhidden[static_cast<std::size_t>(l)].size() > 0) {
            g.vec() += dhidden[static_cast<std::size_t>(l)].vec();
        }

        // mlp with residual
        gblk.wm2.mat().noalias() += bc.mlp_act.mat().transpose() * g.mat(b * n, d);
        VecMap(gblk.bm2.data(), d) += g.mat(b * n, d).colwise().sum();
        Tensor dact({b * n, 4 * d});
        dact.mat().noalias() = g.mat(b * n, d) * blk.wm2.mat().transpose();
        Tensor dpre(dact.shape());
        for (Index i = 0; i < dpre.size(); ++i) {
            dpre[i] = dact[i] * gelu_grad(bc.mlp_pre[i]);
        }
        Tensor dmlp_in = affine_vjp(bc.mlp_in, b * n, d, blk.wm1, dpre, &gblk.wm1, &gblk.bm1);
        g.vec() += layer_norm_vjp(bc.ln2, dmlp_in, blk.ln2_g, &gblk.ln2_g, &gblk.ln2_b).vec();

        // attention output projection with residual
        gblk.wo.mat().noalias() += bc.attn_out.mat(b * n, d).transpose() * g.mat(b * n, d);
        VecMap(gblk.bo.data(), d) += g.mat(b * n, d).colwise().sum();
        Tensor dattn({b, n, d});
        dattn.mat(b * n, d).noalias() = g.mat(b * n, d) * blk.wo.mat().transpose();

        Tensor dattn_in({b, n, d});
        Tensor d_base_q, d_base_k, d_base_v;
        if (cache.moe_enabled) {
            MoeAttentionGrads mg =
                moe_attention_vjp(blk.moe, bc.attn_in, cache.temb, bc.moe, dattn);
            dattn_in.vec() += mg.dh.vec();
            if (task_aware) {
                dtemb_total.vec() += mg.dtemb.vec();
            }
            auto accumulate_proj = [](ProjectionAdapters& dst,
                                      const std::vector<LoraExpertGrads>& experts,
                                      const LoraExpertGrads& shared) {
                for (std::size_t e = 0; e < experts.size(); ++e) {
                    dst.experts[e].down.vec() += experts[e].down.vec();
                    dst.experts[e].up.vec() += experts[e].up.vec();
                }
                dst.shared.down.vec() += shared.down.vec();
                dst.shared.up.vec() += shared.up.vec();
            };
            accumulate_proj(gblk.moe.q, mg.dq_experts, mg.dq_shared);
            accumulate_proj(gblk.moe.k, mg.dk_experts, mg.dk_shared);
            accumulate_proj(gblk.moe.v, mg.dv_experts, mg.dv_shared);
            if (blk.moe.arch != AdapterArch::kLora) {
                gblk.moe.gate.weight.vec() += mg.dgate.weight.vec();
                gblk.moe.gate.bias.vec() += mg.dgate.bias.vec();
            }
            d_base_q = std::move(mg.d_base_q);
            d_base_k = std::move(mg.d_base_k);
            d_base_v = std::move(mg.d_base_v);
        } else {
            Tensor dq4, dk4, dv4;
            attention_core_vjp(bc.plain_attn, split_heads(dattn, blk.moe.num_heads),
                               &dq4, &dk4, &dv4);
            d_base_q = merge_heads(dq4);
            d_base_k = merge_heads(dk4);
            d_base_v = merge_heads(dv4);
        }

        dattn_in.vec() +=
            affine_vjp(bc.attn_in, b * n, d, blk.wq, d_base_q.reshaped({b * n, d}),
                       &gblk.wq, &gblk.bq).vec();
        dattn_in.vec() +=
            affine_vjp(bc.attn_in, b * n, d, blk.wk, d_base_k.reshaped({b * n, d}),
                       &gblk.wk, &gblk.bk).vec();
        dattn_in.vec() +=
            affine_vjp(bc.attn_in, b * n, d, blk.wv, d_base_v.reshaped({b * n, d}),
                       &gblk.wv, &gblk.bv).vec();

        g.vec() += layer_norm_vjp(bc.ln1, dattn_in.reshaped({b * n, d}), blk.ln1_g,
                                  &gblk.ln1_g, &gblk.ln1_b).vec();
    }

    if (task_aware) {
        grads->table.table.vec() +=
            broadcast_task_embedding_vjp(dtemb_total, cache.y, cfg.num_tasks).vec();
    }

    // embedding stage: positions, time conditioning, input projection
    for (Index i = 0; i < b; ++i) {
        grads->pos_emb.mat().noalias() += g.mat(b * n, d).middleRows(i * n, n);
        Tensor dtv({1, d});
        VecMap(dtv.data(), d) = g.mat(b * n, d).middleRows(i * n, n).colwise().sum();
        Tensor dact = affine_vjp(cache.time_act[static_cast<std::size_t>(i)], 1, d,
                                 model.wt2, dtv, &grads->wt2, &grads->bt2);
        Tensor dpre(dact.shape());
        for (Index c = 0; c < d; ++c) {
            dpre[c] = dact[c] * gelu_grad(cache.time_pre[static_cast<std::size_t>(i)][c]);
        }
        affine_vjp(cache.time_emb[static_cast<std::size_t>(i)], 1, cfg.time_width,
                   model.wt1, dpre, &grads->wt1, &grads->bt1);
    }
    grads->w_in.mat().noalias() +=
        cache.seq_in.mat(b * n, cfg.d_in).transpose() * g.mat(b * n, d);
    VecMap(grads->b_in.data(), d) += g.mat(b * n, d).colwise().sum();
}

Tensor dit_velocity(const DitModel& model, const Tensor& src, const Tensor& x_t,
                    double t, int y, bool moe_enabled) {
    FlowSample s;
    s.src = src;
    s.x0 = x_t;  // with eps == x0 the interpolation returns x_t at any t
    s.eps = x_t;
    s.t = t;
    s.y = y;
    DitForwardResult r = dit_forward(model, {s}, moe_enabled, nullptr);
    return r.v_pred.reshaped({model.cfg.n_tgt, model.cfg.d_in});
}

Tensor flow_target(const Tensor& x0, const Tensor& eps) {
    if (!x0.same_shape(eps)) {
        throw DimensionError("flow_target operands must share a shape");
    }
    Tensor u(x0.shape());
    u.vec() = eps.vec() - x0.vec();
    return u;
}

double diffusion_loss(const Tensor& v_pred, const Tensor& u) {
    if (!v_pred.same_shape(u)) {
        throw DimensionError("diffusion_loss operands must share a shape");
    }
    return (v_pred.vec() - u.vec()).squaredNorm() / static_cast<double>(v_pred.size());
}

Tensor diffusion_loss_grad(const Tensor& v_pred, const Tensor& u) {
    Tensor g(v_pred.shape());
    g.vec() = 2.0 * (v_pred.vec() - u.vec()) / static_cast<double>(v_pred.size());
    return g;
}

double total_loss(double l_task, double l_diff, double lambda) {
    if (lambda < 0.0) {
        throw ParameterError("total_loss requires lambda >= 0");
    }
    return l_task + lambda * l_diff;
}

Tensor euler_integrate(const std::function<Tensor(const Tensor&, double)>& velocity,
                       Tensor x_at_one, int steps) {
    if (steps < 1) {
        throw ParameterError("euler_integrate requires steps >= 1");
    }
    const double dt = 1.0 / static_cast<double>(steps);
    Tensor x = std::move(x_at_one);
    for (int k = steps; k >= 1; --k) {
        const double t = static_cast<double>(k) / static_cast<double>(steps);
        Tensor v = velocity(x, t);
        x.vec() -= dt * v.vec();
    }
    return x;
}

Tensor euler_sample(const DitModel& model, const Tensor& src, int y, int steps,
                    Rng& noise_rng) {
    if (y < 0 || y >= static_cast<int>(model.cfg.num_tasks)) {
        throw LabelError("task id outside [0, num_tasks)");
    }
    Tensor x({model.cfg.n_tgt, model.cfg.d_in});
    for (Index i = 0; i < x.size(); ++i) {
        x[i] = noise_rng.gaussian();
    }
    return euler_integrate(
        [&](const Tensor& xt, double t) { return dit_velocity(model, src, xt, t, y); },
        std::move(x), steps);
}

}  // namespace x2edit
