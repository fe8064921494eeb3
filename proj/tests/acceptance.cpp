// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Tolerances are pinned in code next to each check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "x2edit/checkpoint.hpp"
#include "x2edit/contrastive.hpp"
#include "x2edit/dit.hpp"
#include "x2edit/ops.hpp"
#include "x2edit/rng.hpp"
#include "x2edit/sampler.hpp"
#include "x2edit/task_moe.hpp"
#include "x2edit/train.hpp"
#include "x2edit/verify.hpp"

using namespace x2edit;
namespace fs = std::filesystem;

namespace {

struct Criterion {
    int id;
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

Tensor random_tensor(std::vector<Index> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

// --- criterion 1: baseline equivalence ------------------------------------

Criterion baseline_equivalence() {
    Criterion c{1, "baseline equivalence (zero-init adapters == frozen backbone)"};
    DitConfig cfg;  // library defaults: d=64, L=4, H=4, 16+16 tokens, 12 experts
    Rng init(101);
    DitModel model = make_dit_model(cfg, init);

    Rng data(102);
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<FlowSample> batch;
        for (int i = 0; i < 4; ++i) {
            FlowSample s;
            s.x0 = random_tensor({cfg.n_tgt, cfg.d_in}, data);
            s.src = random_tensor({cfg.n_src, cfg.d_in}, data);
            s.eps = random_tensor({cfg.n_tgt, cfg.d_in}, data);
            s.t = data.uniform(0.05, 0.95);
            s.y = static_cast<int>(data.uniform_int(cfg.num_tasks));
            batch.push_back(std::move(s));
        }
        DitForwardResult with_moe = dit_forward(model, batch, true, nullptr);
        DitForwardResult plain = dit_forward(model, batch, false, nullptr);
        worst = std::max(worst, max_abs_diff(with_moe.v_pred, plain.v_pred));
        for (std::size_t l = 0; l < with_moe.hidden.size(); ++l) {
            worst = std::max(worst, max_abs_diff(with_moe.hidden[l].h, plain.hidden[l].h));
        }
    }
    c.pass = worst <= 1e-15;
    c.detail = "max |diff| = " + std::to_string(worst) + " over 20 batches (tol 1e-15)";
    return c;
}

// --- criterion 2: gradient suite -------------------------------------------

Criterion gradient_suite() {
    Criterion c{2, "gradient suite (gate, experts, moe attention, contrastive, total loss)"};
    GradSuiteOptions opts;
    opts.seed = 1;
    opts.probes = 50;
    opts.tolerance = 1e-4;
    std::vector<GradCheckReport> reports = run_gradcheck_suite("all", opts);
    c.pass = true;
    double worst = 0.0;
    std::string failing;
    for (const GradCheckReport& rep : reports) {
        worst = std::max(worst, rep.max_rel_err);
        if (!rep.pass) {
            c.pass = false;
            failing += " " + rep.op_name;
        }
    }
    c.detail = std::to_string(reports.size()) + " ops, worst rel err " +
               std::to_string(worst) + " (tol 1e-4)" +
               (failing.empty() ? "" : "; failing:" + failing);
    return c;
}

// --- criterion 3: contrastive oracle ----------------------------------------

Criterion infonce_oracle_equivalence() {
    Criterion c{3, "contrastive loss matches the extended-precision oracle"};
    ContrastiveVerifyResult r = verify_contrastive({}, {}, 0.5, 3, 200);
    c.pass = r.ln2_abs_err <= 1e-12 && r.worst_oracle_rel_err < 1e-10 && r.oracle_cases > 0;
    c.detail = "ln2 err " + std::to_string(r.ln2_abs_err) + ", worst rel err " +
               std::to_string(r.worst_oracle_rel_err) + " over " +
               std::to_string(r.oracle_cases) + " batches (tols 1e-12, 1e-10)";
    return c;
}

// --- criterion 4: sharded gather ---------------------------------------------

Criterion sharded_equivalence() {
    Criterion c{4, "sharded gather equals single-device loss; remote grads zero"};
    ContrastiveVerifyResult r = verify_contrastive({8}, {1, 2, 4}, 0.5, 4, 0);
    c.pass = r.pass && r.worst_sharded_diff < 1e-9 && r.worst_remote_grad == 0.0;
    c.detail = "worst |single - sharded| " + std::to_string(r.worst_sharded_diff) +
               " (tol 1e-9), worst remote grad " + std::to_string(r.worst_remote_grad) +
               " (must be 0)";
    return c;
}

// --- criterion 5: top-k routing -----------------------------------------------

// dense reference evaluated with explicit per-token loops
Tensor dense_expert_sum(const std::vector<LoraExpert>& experts, const LoraExpert& shared,
                        const Tensor& g, const Tensor& h) {
    const Index b = h.dim(0), n = h.dim(1), d = h.dim(2);
    const Index ne = static_cast<Index>(experts.size());
    Tensor out({b, n, d});
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < n; ++j) {
            for (Index e = 0; e <= ne; ++e) {
                const LoraExpert& ex = e < ne ? experts[static_cast<std::size_t>(e)] : shared;
                const double gate = e < ne ? g.at(i, j, e) : 1.0;
                if (gate == 0.0) {
                    continue;
                }
                const Index r = ex.down.dim(1);
                for (Index col = 0; col < d; ++col) {
                    double acc = 0.0;
                    for (Index t = 0; t < r; ++t) {
                        double p = 0.0;
                        for (Index u = 0; u < d; ++u) {
                            p += h.at(i, j, u) * ex.down.at(u, t);
                        }
                        acc += p * ex.up.at(t, col);
                    }
                    out.at(i, j, col) += gate * ex.scale * acc;
                }
            }
        }
    }
    return out;
}

Criterion topk_routing() {
    Criterion c{5, "top-k routing: exact K support, sparse == dense, low-index ties"};
    Rng rng(5);
    bool ok = true;
    double worst = 0.0;

    for (int rep = 0; rep < 100 && ok; ++rep) {
        MoeLayerConfig mcfg;
        mcfg.d_model = 8;
        mcfg.num_heads = 2;
        mcfg.task_dim = 4;
        mcfg.num_experts = 2 + static_cast<Index>(rng.uniform_int(8));
        mcfg.top_k = 1 + static_cast<int>(rng.uniform_int(
            static_cast<std::uint64_t>(mcfg.num_experts)));
        mcfg.rank = 2;
        mcfg.shared_rank = 2;
        MoeLoraAttention layer = make_moe_lora_attention(mcfg, rng);
        for (LoraExpert& e : layer.q.experts) {
            e.up = random_tensor(e.up.shape(), rng, -0.5, 0.5);
        }
        layer.q.shared.up = random_tensor(layer.q.shared.up.shape(), rng, -0.5, 0.5);

        Tensor h = random_tensor({2, 4, 8}, rng);
        Tensor s = softmax(random_tensor({2, 4, mcfg.num_experts}, rng, -2.0, 2.0), -1);
        Tensor g = topk_gate(s, mcfg.top_k);

        // exactly K nonzero gates per token
        for (Index row = 0; row < 8 && ok; ++row) {
            int nnz = 0;
            for (Index e = 0; e < mcfg.num_experts; ++e) {
                if (g[row * mcfg.num_experts + e] != 0.0) {
                    ++nnz;
                }
            }
            if (nnz != mcfg.top_k) {
                ok = false;
                c.detail = "wrong nonzero count " + std::to_string(nnz);
            }
        }
        Tensor sparse = expert_mix(layer.q.experts, layer.q.shared, g, h);
        Tensor dense = dense_expert_sum(layer.q.experts, layer.q.shared, g, h);
        const double diff = max_abs_diff(sparse, dense);
        worst = std::max(worst, diff);
        if (diff >= 1e-12) {
            ok = false;
            c.detail = "sparse/dense diff " + std::to_string(diff);
        }
    }

    // constructed ties break toward the lowest expert index
    Tensor tie = Tensor::from_data({1, 1, 3}, {0.4, 0.4, 0.2});
    Tensor g1 = topk_gate(tie, 1);
    Tensor flat = Tensor::from_data({1, 1, 4}, {0.25, 0.25, 0.25, 0.25});
    Tensor g2 = topk_gate(flat, 2);
    const bool ties_ok = g1[0] == 0.4 && g1[1] == 0.0 && g1[2] == 0.0 && g2[0] == 0.25 &&
                         g2[1] == 0.25 && g2[2] == 0.0 && g2[3] == 0.0;
    if (!ties_ok) {
        ok = false;
        c.detail = "tie rule violated";
    }

    c.pass = ok;
    if (ok) {
        c.detail = "100 configs, worst sparse/dense diff " + std::to_string(worst) +
                   " (tol 1e-12); tie rule verified";
    }
    return c;
}

// --- criterion 6: balanced sampler ---------------------------------------------

Criterion balanced_sampler_uniformity() {
    Criterion c{6, "balanced sampler: 100k draws within +/-2% of 1/15 from any cache"};
    Rng rng(6);
    double worst = 0.0;
    c.pass = true;

    auto run_from = [&](SamplerState state, const char* tag) {
        std::vector<int> counts(15, 0);
        const int draws = 100000;
        for (int rep = 0; rep < draws; ++rep) {
            ++counts[static_cast<std::size_t>(balanced_sample(state, rng))];
        }
        for (int t = 0; t < 15; ++t) {
            const double dev =
                std::abs(static_cast<double>(counts[static_cast<std::size_t>(t)]) / draws -
                         1.0 / 15);
            worst = std::max(worst, dev);
            if (dev >= 0.02) {
                c.pass = false;
                c.detail = std::string("deviation ") + std::to_string(dev) + " from " + tag;
            }
        }
    };

    run_from(make_sampler(15, 1024), "empty cache");

    SamplerState stuffed = make_sampler(15, 1024);
    stuffed.cache.assign(1024, 7);
    stuffed.counts[7] = 1024;
    run_from(stuffed, "single-task cache");

    SamplerState striped = make_sampler(15, 1024);
    for (int i = 0; i < 1024; ++i) {
        const int t = i % 2;
        striped.cache.push_back(t);
        ++striped.counts[static_cast<std::size_t>(t)];
    }
    run_from(striped, "two-task cache");

    if (c.pass) {
        c.detail = "worst |freq - 1/15| = " + std::to_string(worst) + " (tol 0.02)";
    }
    return c;
}

// --- criteria 7 and 8: directional ablation trend -------------------------------

struct AblationOutcome {
    std::vector<AblationRow> rows;
    double seconds = 0.0;
};

AblationOutcome run_trend_arms() {
    TrainConfig base;
    base.model.num_tasks = 5;
    base.model.arch = AdapterArch::kMoeTaskAware;
    base.model.num_experts = 12;
    base.model.rank = 4;       // scaled 1/16 from the reference rank 64
    base.model.shared_rank = 4;
    base.steps = 3000;
    base.warmup_steps = 800;
    base.lr = 2e-3;
    base.warmup_lr = 2e-3;
    // arms share the denoising objective at unit weight; the contrastive arm
    // adds the regularizer at the configured tradeoff weight
    base.lambda = 1.0;
    base.task_weight = 0.0;
    base.seed = 1;

    std::vector<AblationArm> arms;
    // rank 512 scaled by the same 1/16 factor as the expert ranks
    arms.push_back({"lora_r32",
                    nlohmann::json{{"model",
                                    {{"arch", "lora"},
                                     {"shared_rank", 32},
                                     {"num_experts", 1},
                                     {"top_k", 1}}}}});
    arms.push_back({"moe_ta_12x4", nlohmann::json::object()});
    arms.push_back({"x2edit_l2_all", nlohmann::json{{"task_weight", 0.2}}});

    const auto t0 = std::chrono::steady_clock::now();
    AblationOutcome outcome;
    outcome.rows = run_ablation(base, arms);
    outcome.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return outcome;
}

Criterion directional_trend(const AblationOutcome& outcome) {
    Criterion c{7, "directional ablation trend (w/TA <= LoRA; contrastive within 5%, separability down)"};
    if (outcome.rows.size() != 3 || !outcome.rows[0].ok || !outcome.rows[1].ok ||
        !outcome.rows[2].ok) {
        c.detail = "an arm failed to run";
        return c;
    }
    const AblationRow& lora = outcome.rows[0];
    const AblationRow& moe_ta = outcome.rows[1];
    const AblationRow& contrastive = outcome.rows[2];

    const bool order_ok = moe_ta.val_l_diff <= lora.val_l_diff;
    const bool within5 = contrastive.val_l_diff <= 1.05 * moe_ta.val_l_diff;
    const bool sep_down = contrastive.sep_ratio_final < contrastive.sep_ratio_step100;
    const bool budget_ok = outcome.seconds < 1200.0;

    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "val_l_diff lora=%.4f moe_ta=%.4f +L2=%.4f (needs moe<=lora, +L2<=1.05*moe); "
                  "sep@100=%.4f -> sep@final=%.4f (needs strict drop); runtime %.0fs (< 1200s)",
                  lora.val_l_diff, moe_ta.val_l_diff, contrastive.val_l_diff,
                  contrastive.sep_ratio_step100, contrastive.sep_ratio_final, outcome.seconds);
    c.detail = buf;
    c.pass = order_ok && within5 && sep_down && budget_ok;
    return c;
}

Criterion specialization(const AblationOutcome& outcome) {
    Criterion c{8, "routing specialization after the task-aware run"};
    if (outcome.rows.size() != 3 || !outcome.rows[1].ok) {
        c.detail = "the w/TA arm failed to run";
        return c;
    }
    const AblationRow& moe_ta = outcome.rows[1];
    const double threshold = std::log(12.0) - 0.2;
    c.pass = moe_ta.min_task_entropy < threshold;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "min task entropy %.4f nats vs threshold ln(12)-0.2 = %.4f",
                  moe_ta.min_task_entropy, threshold);
    c.detail = buf;
    return c;
}

// --- criterion 9: determinism and persistence -------------------------------------

Criterion determinism_and_persistence() {
    Criterion c{9, "determinism and bit-exact checkpoint resume"};
    TrainConfig cfg;
    cfg.model.d_model = 32;
    cfg.model.num_heads = 2;
    cfg.model.num_blocks = 2;
    cfg.model.n_tgt = 8;
    cfg.model.n_src = 8;
    cfg.model.d_in = 4;
    cfg.model.num_experts = 6;
    cfg.model.top_k = 2;
    cfg.model.rank = 2;
    cfg.model.shared_rank = 2;
    cfg.model.task_dim = 16;
    cfg.model.num_tasks = 5;
    cfg.batch = 8;
    cfg.steps = 12;
    cfg.warmup_steps = 10;
    cfg.checkpoint_every = 6;
    cfg.val_per_task = 4;
    cfg.seed = 9;

    const fs::path root =
        fs::temp_directory_path() / ("x2edit_accept_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
    };

    bool ok = true;
    std::string detail;

    // identical config + seed => byte-identical logs and checkpoints
    run_training(cfg, root / "a");
    run_training(cfg, root / "b");
    if (slurp(root / "a" / "metrics.jsonl") != slurp(root / "b" / "metrics.jsonl")) {
        ok = false;
        detail += "metrics logs differ; ";
    }
    if (slurp(root / "a" / "checkpoints" / "step_12.x2el") !=
        slurp(root / "b" / "checkpoints" / "step_12.x2el")) {
        ok = false;
        detail += "final checkpoints differ; ";
    }

    // resume from the mid-run checkpoint matches the uninterrupted run
    run_training(cfg, root / "resume",
                 (root / "a" / "checkpoints" / "step_6.x2el").string());
    {
        std::ifstream fa(root / "a" / "metrics.jsonl");
        std::vector<std::string> full;
        for (std::string line; std::getline(fa, line);) full.push_back(line);
        std::ifstream fr(root / "resume" / "metrics.jsonl");
        std::vector<std::string> tail;
        for (std::string line; std::getline(fr, line);) tail.push_back(line);
        if (full.size() != 12 || tail.size() != 6) {
            ok = false;
            detail += "unexpected log sizes; ";
        } else {
            for (int i = 0; i < 6; ++i) {
                if (tail[static_cast<std::size_t>(i)] !=
                    full[static_cast<std::size_t>(i + 6)]) {
                    ok = false;
                    detail += "resumed metrics diverge; ";
                    break;
                }
            }
        }
        if (slurp(root / "a" / "checkpoints" / "step_12.x2el") !=
            slurp(root / "resume" / "checkpoints" / "step_12.x2el")) {
            ok = false;
            detail += "resumed final checkpoint differs; ";
        }
    }

    // save -> load -> save is byte-identical
    {
        Trainer t1 = Trainer::from_checkpoint(
            (root / "a" / "checkpoints" / "step_12.x2el").string());
        t1.save((root / "reload.x2el").string());
        if (slurp(root / "a" / "checkpoints" / "step_12.x2el") !=
            slurp(root / "reload.x2el")) {
            ok = false;
            detail += "save/load/save not idempotent; ";
        }
    }

    std::error_code ec;
    fs::remove_all(root, ec);
    c.pass = ok;
    c.detail = ok ? "logs, resume and re-save all byte-identical" : detail;
    return c;
}

}  // namespace

int main() {
    std::vector<Criterion> results;
    auto timed = [&](Criterion (*fn)()) {
        const auto t0 = std::chrono::steady_clock::now();
        Criterion c = fn();
        c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        results.push_back(std::move(c));
    };

    timed(baseline_equivalence);
    timed(gradient_suite);
    timed(infonce_oracle_equivalence);
    timed(sharded_equivalence);
    timed(topk_routing);
    timed(balanced_sampler_uniformity);

    {
        AblationOutcome outcome = run_trend_arms();
        Criterion c7 = directional_trend(outcome);
        c7.seconds = outcome.seconds;
        results.push_back(c7);
        Criterion c8 = specialization(outcome);
        results.push_back(c8);
    }

    timed(determinism_and_persistence);

    bool all_pass = true;
    for (const Criterion& c : results) {
        std::printf("[%s] criterion %d: %s | %s (%.1fs)\n", c.pass ? "PASS" : "FAIL", c.id,
                    c.name.c_str(), c.detail.c_str(), c.seconds);
        all_pass = all_pass && c.pass;
    }
    std::printf("%s\n", all_pass ? "acceptance: all criteria passed"
                                 : "acceptance: FAILURES present");
    return all_pass ? 0 : 1;
}
