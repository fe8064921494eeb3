#pragma once

#include <string>
#include <vector>

#include "x2edit/ops.hpp"
#include "x2edit/rng.hpp"
#include "x2edit/tensor.hpp"

namespace x2edit {

// Learnable per-task embedding rows, broadcast over tokens and fed to the
// gate so expert routing can condition on the editing task.
struct TaskEmbeddingTable {
    Tensor table;  // (num_tasks, task_dim)

    Index num_tasks() const { return table.dim(0); }
    Index task_dim() const { return table.dim(1); }
};

// Low-rank adapter: contribution is (h * down) * up * scale. Up starts at
// exactly zero so a fresh adapter leaves the backbone output untouched.
struct LoraExpert {
    Tensor down;    // (d, r)
    Tensor up;      // (r, d)
    Scalar scale = 1.0;  // alpha / r
};

struct LoraExpertGrads {
    Tensor down;
    Tensor up;
};

// Single affine gate over the channel concatenation of hidden states and the
// broadcast task embedding (or hidden states alone when task-awareness is
// off).
struct GateNetwork {
    Tensor weight;  // (in_dim, num_experts)
    Tensor bias;    // (num_experts,)
};

struct GateGrads {
    Tensor weight;
    Tensor bias;
};

enum class AdapterArch {
    kLora,          // shared adapter only, no routing, no task input
    kMoe,           // routed experts, gate sees hidden states only
    kMoeTaskAware,  // routed experts, gate sees hidden states + task embedding
};

std::string to_string(AdapterArch arch);
AdapterArch adapter_arch_from_string(const std::string& s);

// Routed + shared adapters for one projection (q, k or v).
struct ProjectionAdapters {
    std::vector<LoraExpert> experts;
    LoraExpert shared;
};

// Per-layer bundle: adapters for q/k/v plus one gate shared by all three
// projections, so the same routing weights mix every projection's experts.
struct MoeLoraAttention {
    AdapterArch arch = AdapterArch::kMoeTaskAware;
    int num_heads = 1;
    int top_k = 1;
    ProjectionAdapters q, k, v;
    GateNetwork gate;

    Index num_experts() const { return static_cast<Index>(q.experts.size()); }
};

struct MoeLayerConfig {
    AdapterArch arch = AdapterArch::kMoeTaskAware;
    int num_heads = 4;
    Index d_model = 64;
    Index task_dim = 64;
    Index num_experts = 12;
    int top_k = 2;
    Index rank = 4;
    Index shared_rank = 4;
    Scalar lora_alpha = 0.0;  // 0 means alpha = rank (scale 1)
    Scalar init_std = 0.02;
};

MoeLoraAttention make_moe_lora_attention(const MoeLayerConfig& cfg, Rng& rng);
TaskEmbeddingTable make_task_embedding_table(Index num_tasks, Index task_dim,
                                             Scalar init_std, Rng& rng);

// --- task embedding broadcast ---------------------------------------------

// output[i, j, :] = table[y_i, :] for every token j.
Tensor broadcast_task_embedding(const TaskEmbeddingTable& table,
                                const std::vector<int>& y, Index tokens);
// Accumulates the cotangent into the rows indexed by y; rows never looked up
// receive zero.
Tensor broadcast_task_embedding_vjp(const Tensor& dtemb, const std::vector<int>& y,
                                    Index num_tasks);

// --- gating -----------------------------------------------------------------

struct GateScoresCache {
    Tensor concat;  // (b*n, d [+ c])
    Tensor scores;  // (b, n, num_experts)
};

// s = softmax(gate(concat(h, temb))) per token. temb may be empty (rank 0)
// for task-agnostic gating.
Tensor gate_scores(const GateNetwork& gate, const Tensor& h, const Tensor& temb,
                   GateScoresCache* cache = nullptr);

struct GateScoresGrads {
    Tensor dh;
    Tensor dtemb;  // empty when temb was empty
    GateGrads dgate;
};

GateScoresGrads gate_scores_vjp(const GateNetwork& gate, const GateScoresCache& cache,
                                const Tensor& ds, Index d_model);

// Keeps the K largest scores per token (ties broken toward the lowest expert
// index), zeroes the rest. No renormalization after masking.
Tensor topk_gate(const Tensor& s, int top_k);
// Straight-through: the selection mask is treated as constant.
Tensor topk_gate_vjp(const Tensor& g, const Tensor& dg);

// --- expert mixing ----------------------------------------------------------

struct ExpertMixCache {
    struct PerExpert {
        std::vector<Index> rows;  // flat token indices with nonzero gate
        Tensor p;                 // (nnz, r) gathered down-projections
    };
    std::vector<PerExpert> experts;
    Tensor p_shared;  // (b*n, r)
};

// sum_i g_i * Expert_i(h) + Shared(h) per token. Experts with zero gate are
// skipped; the result equals the dense masked sum.
Tensor expert_mix(const std::vector<LoraExpert>& experts, const LoraExpert& shared,
                  const Tensor& g, const Tensor& h, ExpertMixCache* cache = nullptr);

struct ExpertMixGrads {
    Tensor dh;
    Tensor dg;
    std::vector<LoraExpertGrads> dexperts;
    LoraExpertGrads dshared;
};

ExpertMixGrads expert_mix_vjp(const std::vector<LoraExpert>& experts,
                              const LoraExpert& shared, const Tensor& g,
                              const Tensor& h, const ExpertMixCache& cache,
                              const Tensor& dout);

// --- full layer ---------------------------------------------------------------

struct MoeAttentionCache {
    GateScoresCache gate;
    Tensor gates;  // (b, n, num_experts) after top-k; empty for kLora
    ExpertMixCache mix_q, mix_k, mix_v;
    AttentionCache attn;
};

// attention(base_q + q_moe, base_k + k_moe, base_v + v_moe) with heads split
// and merged around attention_core. All three expert mixtures reuse one set
// of gating weights.
Tensor moe_attention(const MoeLoraAttention& layer, const Tensor& h, const Tensor& temb,
                     const Tensor& base_q, const Tensor& base_k, const Tensor& base_v,
                     MoeAttentionCache* cache = nullptr);

struct MoeAttentionGrads {
    Tensor dh;      // expert + gate paths only; base-projection paths belong to the caller
    Tensor dtemb;   // empty unless arch == kMoeTaskAware
    Tensor d_base_q, d_base_k, d_base_v;
    std::vector<LoraExpertGrads> dq_experts, dk_experts, dv_experts;
    LoraExpertGrads dq_shared, dk_shared, dv_shared;
    GateGrads dgate;
};

MoeAttentionGrads moe_attention_vjp(const MoeLoraAttention& layer, const Tensor& h,
                                    const Tensor& temb, const MoeAttentionCache& cache,
                                    const Tensor& dout);

// --- head reshaping -----------------------------------------------------------

Tensor split_heads(const Tensor& x, int num_heads);   // (b,n,d) -> (b,H,n,dh)
Tensor merge_heads(const Tensor& x);                  // (b,H,n,dh) -> (b,n,d)

// --- routing statistics ---------------------------------------------------------

struct RoutingStats {
    Index num_tasks = 0;
    Index num_experts = 0;
    Tensor counts;                       // (num_tasks, num_experts) activation counts
    std::vector<double> expert_totals;   // per-expert token counts over all tasks
    std::vector<double> task_entropy;    // utilization entropy per task, nats
    double total_activations = 0.0;      // sums to b*n*K per layer
};

// Counts nonzero gate activations per (task, expert) over one or more layers'
// top-k gate tensors.
RoutingStats collect_routing_stats(const std::vector<Tensor>& gates_per_layer,
                                   const std::vector<int>& y, Index num_tasks);

}  // namespace x2edit
