#pragma once

#include <string>
#include <vector>

#include "x2edit/ops.hpp"
#include "x2edit/tensor.hpp"

namespace x2edit {

// One layer's hidden states plus the per-sample task labels they belong to.
struct HiddenBatch {
    Tensor h;            // (b, n, d)
    std::vector<int> y;  // size b
    int layer_index = 0;
};

enum class ContrastiveMetric { kSquaredL2, kCosine };

std::string to_string(ContrastiveMetric metric);
ContrastiveMetric contrastive_metric_from_string(const std::string& s);

// Pairwise distances between normalized flattened rows. Squared-L2 entries
// live in [0, 4], cosine distance (1 - similarity) in [0, 2]; the diagonal is
// exactly zero.
struct DistanceMatrix {
    Tensor d;  // (b, b)
};

struct TaskMask {
    Tensor m;                          // (b, b), entries {0, 1}, zero diagonal
    std::vector<int> positive_counts;  // per-sample number of positives
};

// Row-major reshape of h to (b, n*d) followed by per-row L2 normalization.
Tensor flatten_normalize(const HiddenBatch& hb, L2NormalizeCache* cache = nullptr);

// Rows of z must be unit-norm. Computed as 2 - 2 z_i.z_j, clamped to [0, 4].
DistanceMatrix pairwise_sq_dist(const Tensor& z);
DistanceMatrix pairwise_distance(const Tensor& z, ContrastiveMetric metric);

// m_ij = 1 iff y_i == y_j and i != j.
TaskMask build_task_mask(const std::vector<int>& y);

struct InfoNceOptions {
    double tau = 0.5;
    ContrastiveMetric metric = ContrastiveMetric::kSquaredL2;
    // Denominator ranges over all k including k = i (the self term enters as
    // exp(0) = 1). Configurable off.
    bool include_self_term = true;
};

struct InfoNceResult {
    double loss = 0.0;
    int active = 0;                  // samples with at least one positive
    std::vector<double> per_sample;  // per-sample losses; 0 for inactive samples
};

// Per active sample i: -log( sum_j exp(-D_ij/tau) m_ij / sum_k exp(-D_ik/tau) ).
// Samples without positives contribute nothing and are not counted in the
// average; with no active samples the loss is 0.
InfoNceResult task_infonce(const DistanceMatrix& dist, const TaskMask& mask, double tau,
                           bool include_self_term = true);

struct TaskInfoNceGrad {
    double loss = 0.0;
    int active = 0;
    Tensor dz;  // (b, m): exact gradient w.r.t. the raw (pre-normalization) rows
};

// Loss and exact gradient of the composite
// flatten -> normalize -> distance -> task_infonce, w.r.t. the raw flattened
// rows. Inactive samples get gradient only through their appearances as
// negatives of active samples.
TaskInfoNceGrad task_infonce_grad(const Tensor& z_raw, const std::vector<int>& y,
                                  const InfoNceOptions& opts);

// Simulated multi-worker batch: shard concatenation is the global batch in
// global order.
struct ShardedBatch {
    std::vector<HiddenBatch> shards;
};

struct ShardedInfoNce {
    double loss = 0.0;  // active-count-weighted mean over workers
    int active = 0;
    std::vector<double> worker_losses;
    std::vector<int> worker_active;
    // Per worker: gradient w.r.t. the raw global rows, exactly zero outside
    // the worker's own rows (gathered remote rows are constants).
    std::vector<Tensor> worker_grads;
};

// Each worker scores its local rows against the gathered global
// representation set: global denominator, global positives. The weighted
// total equals single-device task_infonce on the concatenated batch.
ShardedInfoNce sharded_task_infonce(const ShardedBatch& sb, const InfoNceOptions& opts,
                                    bool with_grads = false);

struct MultiLayerTaskLoss {
    double loss = 0.0;
    std::vector<double> per_layer;
    std::vector<Tensor> dhidden;  // (b, n, d) per layer when gradients requested
};

// Mean (or sum) of task_infonce over layers; layers with no active sample
// contribute 0 and still count toward the mean.
MultiLayerTaskLoss multi_layer_task_loss(const std::vector<HiddenBatch>& hidden,
                                         const InfoNceOptions& opts,
                                         bool average_layers = true,
                                         bool with_grads = false);

// Mean intra-task squared distance over mean inter-task squared distance of
// the normalized flattened rows; NaN when either pair set is empty.
double separability_ratio(const HiddenBatch& hb);

}  // namespace x2edit
