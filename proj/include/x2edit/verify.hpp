#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "x2edit/grad_check.hpp"
#include "x2edit/tensor.hpp"

namespace x2edit {

// Extended-precision brute-force evaluation of the task-contrastive loss
// straight from its definition (normalize, pairwise distances, masked
// log-ratio, mean over active samples). Independent of the library
// implementation; used as the oracle side of the dual-route checks.
double infonce_reference(const Tensor& raw_rows, const std::vector<int>& labels,
                         double tau, bool include_self_term, bool cosine_metric);

struct ContrastiveVerifyResult {
    bool pass = false;
    int oracle_cases = 0;
    double worst_oracle_rel_err = 0.0;
    double ln2_abs_err = 0.0;
    double worst_sharded_diff = 0.0;
    double worst_remote_grad = 0.0;
    std::vector<std::string> failures;
};

// Oracle equivalence over random batches plus sharded-gather equivalence for
// the requested batch sizes and worker counts.
ContrastiveVerifyResult verify_contrastive(const std::vector<Index>& batch_sizes,
                                           const std::vector<int>& worker_counts,
                                           double tau, std::uint64_t seed,
                                           int oracle_cases = 200);

struct GradSuiteOptions {
    std::uint64_t seed = 1;
    int probes = 50;
    double tolerance = 1e-4;
    // test hook: corrupts one analytic gradient so the harness must flag it
    bool inject_fault = false;
};

// Finite-difference suites for the gate path, expert mixing, full MoE
// attention, the contrastive composite and the combined training objective.
// Scope is one of gate | experts | contrastive | dit | all.
std::vector<GradCheckReport> run_gradcheck_suite(const std::string& scope,
                                                 const GradSuiteOptions& opts);

}  // namespace x2edit
