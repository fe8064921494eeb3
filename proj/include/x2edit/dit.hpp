#pragma once

#include <functional>
#include <string>
#include <vector>

#include "x2edit/contrastive.hpp"
#include "x2edit/rng.hpp"
#include "x2edit/task_moe.hpp"
#include "x2edit/tensor.hpp"

namespace x2edit {

struct DitConfig {
    Index d_model = 64;
    int num_heads = 4;
    Index num_blocks = 4;
    Index n_tgt = 16;
    Index n_src = 16;
    Index d_in = 8;
    Index time_width = 32;

    AdapterArch arch = AdapterArch::kMoeTaskAware;
    Index num_experts = 12;
    int top_k = 2;
    Index rank = 4;
    Index shared_rank = 4;
    Scalar lora_alpha = 0.0;  // 0 means alpha = rank (scale 1)
    Index task_dim = 64;
    Index num_tasks = 15;
    Scalar init_std = 0.02;

    Index seq_len() const { return n_src + n_tgt; }
    void validate() const;
};

// One denoising training example: reference tokens condition the edit, the
// model predicts the constant velocity between noise and the edited tokens.
struct FlowSample {
    Tensor x0;   // (n_tgt, d_in) edited target tokens
    Tensor src;  // (n_src, d_in) reference tokens
    Tensor eps;  // (n_tgt, d_in) Gaussian noise
    double t = 0.5;  // in (0, 1)
    int y = 0;       // task id
};

struct DitBlock {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv;
    Tensor wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor wm1, bm1, wm2, bm2;
    MoeLoraAttention moe;
};

// Frozen backbone plus the trainable adapter set. Only MoE-LoRA experts, the
// gate and the task table are updated by training; every backbone tensor
// stays at its post-warm-up value.
struct DitModel {
    DitConfig cfg;
    Tensor w_in, b_in;            // d_in -> d_model
    Tensor pos_emb;               // (seq_len, d_model)
    Tensor wt1, bt1, wt2, bt2;    // sinusoidal(t) -> d_model
    std::vector<DitBlock> blocks;
    Tensor lnf_g, lnf_b;
    Tensor w_head, b_head;        // d_model -> d_in
    TaskEmbeddingTable table;
};

DitModel make_dit_model(const DitConfig& cfg, Rng& rng);

struct ParamRef {
    std::string name;
    Tensor* tensor;
    bool trainable;  // adapters, gate, task table
};

// Deterministic traversal of all named parameters.
std::vector<ParamRef> param_refs(DitModel& model);

// Same-shaped container with every tensor zeroed; used as the gradient
// accumulator and for optimizer moments.
DitModel zeros_like(const DitModel& model);

struct LayerNormCache {
    Tensor x_hat;                 // (rows, d)
    std::vector<Scalar> inv_std;  // per row
};

struct DitBlockCache {
    LayerNormCache ln1;
    Tensor attn_in;    // (b, n, d) post-ln1, feeds projections, experts, gate
    Tensor base_q, base_k, base_v;
    MoeAttentionCache moe;
    AttentionCache plain_attn;  // used when the adapter path is disabled
    Tensor attn_out;   // (b*n, d) merged attention output, feeds wo
    LayerNormCache ln2;
    Tensor mlp_in;     // (b*n, d) post-ln2
    Tensor mlp_pre;    // (b*n, 4d) pre-activation
    Tensor mlp_act;    // (b*n, 4d) gelu output
};

struct DitCache {
    bool moe_enabled = true;
    std::vector<int> y;
    Tensor seq_in;   // (b*n, d_in) embedded token rows
    Tensor temb;     // (b, n, c) broadcast task embedding (task-aware only)
    std::vector<Tensor> time_emb;   // per sample sinusoidal features (time_width)
    std::vector<Tensor> time_pre;   // per sample pre-activation of the time MLP
    std::vector<Tensor> time_act;   // per sample gelu output
    std::vector<DitBlockCache> blocks;
    LayerNormCache lnf;
    Tensor lnf_out;  // (b*n, d)
};

struct DitForwardResult {
    Tensor v_pred;                    // (b, n_tgt, d_in)
    std::vector<HiddenBatch> hidden;  // post-residual states per block, full sequence
};

// Forward pass over a batch. x_t = (1-t) x0 + t eps per sample; the sequence
// is [src || x_t] plus positional and time embeddings; the velocity is read
// off the target positions. With moe_enabled false the adapter path is
// skipped entirely and attention runs on the frozen projections alone.
DitForwardResult dit_forward(const DitModel& model, const std::vector<FlowSample>& batch,
                             bool moe_enabled = true, DitCache* cache = nullptr);

// Accumulates gradients for all parameters into `grads` (a zeros_like
// container). dv_pred is the cotangent of v_pred; dhidden carries one
// (b, n, d_model) tap cotangent per block (empty tensors are treated as
// zero).
void dit_backward(const DitModel& model, const DitCache& cache,
                  const Tensor& dv_pred, const std::vector<Tensor>& dhidden,
                  DitModel* grads);

// Velocity prediction for one sample with an explicit noisy state; used by
// the Euler sampler.
Tensor dit_velocity(const DitModel& model, const Tensor& src, const Tensor& x_t,
                    double t, int y, bool moe_enabled = true);

// u = eps - x0.
Tensor flow_target(const Tensor& x0, const Tensor& eps);

// Mean squared error over all target-token elements.
double diffusion_loss(const Tensor& v_pred, const Tensor& u);
Tensor diffusion_loss_grad(const Tensor& v_pred, const Tensor& u);

// L = l_task + lambda * l_diff.
double total_loss(double l_task, double l_diff, double lambda);

// Integrates dx/dt = -v(x, t) from t = 1 down to t = 0 with uniform Euler
// steps.
Tensor euler_integrate(const std::function<Tensor(const Tensor&, double)>& velocity,
                       Tensor x_at_one, int steps);

// Starts from seeded Gaussian noise and integrates the model's velocity
// field down to t = 0.
Tensor euler_sample(const DitModel& model, const Tensor& src, int y, int steps,
                    Rng& noise_rng);

}  // namespace x2edit
