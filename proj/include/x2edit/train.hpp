#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "x2edit/contrastive.hpp"
#include "x2edit/dit.hpp"
#include "x2edit/optimizer.hpp"
#include "x2edit/sampler.hpp"
#include "x2edit/synthetic.hpp"

namespace x2edit {

struct TrainConfig {
    DitConfig model;

    double lr = 1e-3;
    double warmup_lr = 1e-3;
    std::uint64_t steps = 1000;
    std::uint64_t warmup_steps = 300;  // backbone-only pre-training, then frozen
    Index batch = 12;
    double lambda = 0.2;       // weight on the denoising term
    double tau = 0.5;
    double task_weight = 1.0;  // weight on the contrastive term; 0 disables it
    std::uint64_t seed = 1;
    ContrastiveMetric metric = ContrastiveMetric::kSquaredL2;
    std::vector<int> contrastive_layers;  // empty = all blocks
    int workers = 1;
    std::uint64_t checkpoint_every = 0;  // 0 = final checkpoint only
    Index val_per_task = 256;
    double src_std = 1.0;
    Index sampler_capacity = 1024;
    bool include_self_term = true;
    bool average_layers = true;

    bool contrastive_enabled() const { return task_weight != 0.0; }
    void validate() const;
};

// Full-default materialization: every field appears in the JSON, unknown keys
// are rejected so typos cannot silently fall back to defaults.
nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);

struct StepMetrics {
    std::uint64_t step = 0;
    double l_diff = 0.0;
    double l_task = 0.0;
    double total = 0.0;
    double grad_norm = 0.0;
    double sep_ratio = 0.0;           // batch-level, last block
    std::vector<double> expert_util;  // per-expert activation fractions
};

nlohmann::json metrics_to_json(const StepMetrics& m);

// Owns the model, optimizer state, sampler and the named RNG sub-streams.
// Construction runs the backbone warm-up (self-supervised denoising with the
// adapter path disabled); afterwards every step updates only the adapter /
// gate / task-table set.
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg);
    static Trainer from_checkpoint(const std::string& path);

    StepMetrics step();

    std::uint64_t current_step() const { return step_; }
    const TrainConfig& config() const { return cfg_; }
    DitModel& model() { return model_; }
    const DitModel& model() const { return model_; }
    const std::vector<SyntheticTaskSpec>& task_specs() const { return specs_; }

    // Deterministic held-out evaluation: cfg.val_per_task samples per task
    // with fixed noise and time draws; returns the denoising MSE.
    double validation_l_diff() const;
    // Separability of the last block's hidden states on a fixed balanced
    // probe batch.
    double probe_separability() const;
    RoutingStats probe_routing() const;

    std::uint64_t trainable_param_count();
    std::vector<std::uint64_t> backbone_checksums();

    // Writes a checkpoint; live parameters and moments snap to their f32
    // values so a resumed run continues bit-exactly.
    void save(const std::string& path);

private:
    Trainer() = default;
    void build(const TrainConfig& cfg);
    void warmup();
    std::vector<FlowSample> next_batch();

    TrainConfig cfg_;
    std::vector<SyntheticTaskSpec> specs_;
    SyntheticDataConfig data_cfg_;
    DitModel model_;
    DitModel grads_;
    AdamState opt_;
    SamplerState sampler_;
    Rng rng_data_{0}, rng_noise_{0}, rng_sampler_{0};
    std::uint64_t step_ = 0;
};

struct TrainSummary {
    std::uint64_t final_step = 0;
    std::string metrics_path;
    std::vector<std::string> checkpoint_paths;
};

// Runs (or resumes) the loop, streaming one metrics record per step to
// metrics.jsonl and writing checkpoints under out_dir/checkpoints.
TrainSummary run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                          const std::optional<std::string>& resume_from = {});

struct AblationArm {
    std::string name;
    nlohmann::json overrides;  // deep-merged over the base config
};

struct AblationRow {
    std::string name;
    bool ok = false;
    std::string error;
    // NaN until the corresponding measurement actually ran
    double val_l_diff = std::numeric_limits<double>::quiet_NaN();
    double sep_ratio_step100 = std::numeric_limits<double>::quiet_NaN();
    double sep_ratio_final = std::numeric_limits<double>::quiet_NaN();
    double min_task_entropy = std::numeric_limits<double>::quiet_NaN();
    double mean_task_entropy = std::numeric_limits<double>::quiet_NaN();
    double uniform_entropy = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t trainable_params = 0;
    nlohmann::json arm_config;
};

// Applies the overrides per arm and trains each with the shared base seed;
// per-arm failures are recorded rather than propagated.
std::vector<AblationRow> run_ablation(const TrainConfig& base,
                                      const std::vector<AblationArm>& arms);

nlohmann::json ablation_table_json(const std::vector<AblationRow>& rows);
std::string ablation_table_text(const std::vector<AblationRow>& rows);

// Deep merge of override keys into a config JSON (objects merge, scalars and
// arrays replace).
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overrides);

}  // namespace x2edit
