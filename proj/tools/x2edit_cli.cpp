// Command-line front end: training, gradient verification, contrastive
// verification, routing analysis, sampling and the ablation runner.
//
// Exit codes: 0 success, 1 verification/ablation failure, 2 usage or
// validation error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "x2edit/checkpoint.hpp"
#include "x2edit/dit.hpp"
#include "x2edit/error.hpp"
#include "x2edit/synthetic.hpp"
#include "x2edit/train.hpp"
#include "x2edit/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

#ifndef X2EDIT_BUILD_ID
#define X2EDIT_BUILD_ID "unknown"
#endif

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

std::string default_out_dir() {
    if (const char* env = std::getenv("X2EDIT_OUT")) {
        return env;
    }
    return "out";
}

// key=value override with a dotted path into the config JSON; the value is
// parsed as JSON when possible and falls back to a string
void apply_override(json& config, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw x2edit::ConfigError("override must look like key=value, got '" + spec + "'");
    }
    const std::string path = spec.substr(0, eq);
    const std::string value_text = spec.substr(eq + 1);
    json value;
    try {
        value = json::parse(value_text);
    } catch (const json::exception&) {
        value = value_text;
    }

    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (key.empty()) {
            throw x2edit::ConfigError("override path has an empty segment: '" + path + "'");
        }
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

json load_config_json(const std::optional<std::string>& config_path) {
    if (!config_path) {
        return x2edit::config_to_json(x2edit::TrainConfig{});
    }
    std::ifstream file(*config_path);
    if (!file) {
        throw x2edit::ConfigError("config file not found: " + *config_path);
    }
    try {
        json raw = json::parse(file);
        // materialize all defaults through a validated round trip
        return x2edit::config_to_json(x2edit::config_from_json(raw));
    } catch (const json::exception& e) {
        throw x2edit::ConfigError("config file " + *config_path +
                                  " is not valid JSON: " + e.what());
    }
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const json& resolved_config, const json& extra,
                    const std::string& started, const std::string& finished) {
    ordered_json manifest;
    manifest["command"] = command;
    manifest["build_id"] = X2EDIT_BUILD_ID;
    manifest["started"] = started;
    manifest["finished"] = finished;
    manifest["config"] = resolved_config;
    manifest["outputs"] = extra;
    std::ofstream f(out_dir / "manifest.json");
    f << manifest.dump(2) << '\n';
}

json tensor_to_json(const x2edit::Tensor& t) {
    using x2edit::Index;
    json rows = json::array();
    if (t.rank() == 2) {
        for (Index i = 0; i < t.dim(0); ++i) {
            json row = json::array();
            for (Index j = 0; j < t.dim(1); ++j) {
                row.push_back(t.at(i, j));
            }
            rows.push_back(std::move(row));
        }
        return rows;
    }
    for (Index i = 0; i < t.size(); ++i) {
        rows.push_back(t[i]);
    }
    return rows;
}

struct CommonFlags {
    std::optional<std::string> config_path;
    std::string out_dir = default_out_dir();
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> steps;
    std::optional<int> workers;
    std::vector<std::string> overrides;
};

json resolve_config(const CommonFlags& flags) {
    json config = load_config_json(flags.config_path);
    if (flags.seed) {
        config["seed"] = *flags.seed;
    }
    if (flags.steps) {
        config["steps"] = *flags.steps;
    }
    if (flags.workers) {
        config["workers"] = *flags.workers;
    }
    for (const std::string& ov : flags.overrides) {
        apply_override(config, ov);
    }
    // validate and materialize
    return x2edit::config_to_json(x2edit::config_from_json(config));
}

int cmd_train(const CommonFlags& flags, const std::optional<std::string>& resume) {
    const std::string started = iso_timestamp();
    const json config = resolve_config(flags);
    const fs::path out(flags.out_dir);
    fs::create_directories(out);

    x2edit::TrainSummary summary = x2edit::run_training(
        x2edit::config_from_json(config), out,
        resume ? std::optional<std::string>(*resume) : std::nullopt);

    json outputs;
    outputs["metrics"] = summary.metrics_path;
    outputs["checkpoints"] = summary.checkpoint_paths;
    write_manifest(out, "train", config, outputs, started, iso_timestamp());
    std::printf("trained %llu steps; metrics at %s\n",
                static_cast<unsigned long long>(summary.final_step),
                summary.metrics_path.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, bool inject_fault,
                  const std::string& out_dir) {
    const std::string started = iso_timestamp();
    x2edit::GradSuiteOptions opts;
    opts.seed = seed;
    opts.inject_fault = inject_fault;
    std::vector<x2edit::GradCheckReport> reports = x2edit::run_gradcheck_suite(scope, opts);

    bool all_pass = true;
    for (const x2edit::GradCheckReport& rep : reports) {
        std::printf("%-34s probes=%-3d max_rel_err=%.3e tol=%.1e %s\n", rep.op_name.c_str(),
                    rep.probe_count, rep.max_rel_err, rep.tolerance,
                    rep.pass ? "pass" : "FAIL");
        all_pass = all_pass && rep.pass;
    }

    const fs::path out(out_dir);
    fs::create_directories(out);
    json summary = json::array();
    for (const x2edit::GradCheckReport& rep : reports) {
        summary.push_back({{"op", rep.op_name},
                           {"max_rel_err", rep.max_rel_err},
                           {"probes", rep.probe_count},
                           {"tolerance", rep.tolerance},
                           {"pass", rep.pass}});
    }
    json config;
    config["scope"] = scope;
    config["seed"] = seed;
    write_manifest(out, "gradcheck", config, summary, started, iso_timestamp());

    if (!all_pass) {
        std::fprintf(stderr, "gradcheck: failing ops listed above\n");
        return 1;
    }
    return 0;
}

int cmd_verify_contrastive(const std::vector<std::int64_t>& batch_sizes,
                           const std::vector<int>& workers, double tau, std::uint64_t seed,
                           const std::string& out_dir) {
    const std::string started = iso_timestamp();
    std::vector<x2edit::Index> sizes(batch_sizes.begin(), batch_sizes.end());
    x2edit::ContrastiveVerifyResult result =
        x2edit::verify_contrastive(sizes, workers, tau, seed);

    std::printf("closed-form ln2 abs err: %.3e\n", result.ln2_abs_err);
    std::printf("oracle cases: %d, worst rel err: %.3e\n", result.oracle_cases,
                result.worst_oracle_rel_err);
    std::printf("worst sharded |single - gathered|: %.3e\n", result.worst_sharded_diff);
    std::printf("worst remote-row gradient magnitude: %.3e\n", result.worst_remote_grad);

    const fs::path out(out_dir);
    fs::create_directories(out);
    json config;
    config["batch_sizes"] = batch_sizes;
    config["workers"] = workers;
    config["tau"] = tau;
    config["seed"] = seed;
    json outputs;
    outputs["pass"] = result.pass;
    outputs["worst_oracle_rel_err"] = result.worst_oracle_rel_err;
    outputs["worst_sharded_diff"] = result.worst_sharded_diff;
    write_manifest(out, "verify-contrastive", config, outputs, started, iso_timestamp());

    if (!result.pass) {
        for (const std::string& f : result.failures) {
            std::fprintf(stderr, "verify-contrastive: %s\n", f.c_str());
        }
        return 1;
    }
    std::puts("verify-contrastive: all checks passed");
    return 0;
}

int cmd_route_stats(const std::string& checkpoint, int batches, const std::string& out_dir) {
    const std::string started = iso_timestamp();
    x2edit::Trainer trainer = x2edit::Trainer::from_checkpoint(checkpoint);
    const x2edit::TrainConfig& cfg = trainer.config();
    if (cfg.model.arch == x2edit::AdapterArch::kLora) {
        throw x2edit::ConfigError("checkpoint has no routed experts (lora arch)");
    }

    // accumulate gate activations over deterministic probe batches
    x2edit::Rng data_rng = x2edit::Rng::stream(cfg.seed, "route_stats");
    x2edit::SamplerState sampler =
        x2edit::make_sampler(cfg.model.num_tasks, cfg.sampler_capacity);
    x2edit::SyntheticDataConfig dc;
    dc.n_src = cfg.model.n_src;
    dc.n_tgt = cfg.model.n_tgt;
    dc.d_in = cfg.model.d_in;
    dc.src_std = cfg.src_std;

    const x2edit::Index tokens = cfg.model.seq_len();
    x2edit::RoutingStats total;
    total.num_tasks = cfg.model.num_tasks;
    total.num_experts = cfg.model.num_experts;
    total.counts = x2edit::Tensor({cfg.model.num_tasks, cfg.model.num_experts});
    total.expert_totals.assign(static_cast<std::size_t>(cfg.model.num_experts), 0.0);
    for (int rep = 0; rep < batches; ++rep) {
        std::vector<x2edit::FlowSample> batch = x2edit::make_synthetic_batch(
            trainer.task_specs(), sampler, cfg.batch, dc, data_rng, data_rng, data_rng);
        x2edit::DitCache cache;
        x2edit::dit_forward(trainer.model(), batch, true, &cache);
        std::vector<x2edit::Tensor> layer_gates;
        for (const x2edit::DitBlockCache& bc : cache.blocks) {
            layer_gates.push_back(bc.moe.gates);
        }
        x2edit::RoutingStats stats =
            x2edit::collect_routing_stats(layer_gates, cache.y, cfg.model.num_tasks);
        total.counts.vec() += stats.counts.vec();
        for (std::size_t e = 0; e < total.expert_totals.size(); ++e) {
            total.expert_totals[e] += stats.expert_totals[e];
        }
        total.total_activations += stats.total_activations;
    }

    // entropies and per-task top experts
    ordered_json per_task = ordered_json::array();
    std::vector<int> top_expert(static_cast<std::size_t>(cfg.model.num_tasks), -1);
    double min_entropy = 1e300;
    for (x2edit::Index t = 0; t < cfg.model.num_tasks; ++t) {
        double task_total = 0.0;
        for (x2edit::Index e = 0; e < cfg.model.num_experts; ++e) {
            task_total += total.counts.at(t, e);
        }
        ordered_json row;
        row["task"] = t;
        row["count"] = task_total;
        json util = json::array();
        double entropy = 0.0;
        double best = -1.0;
        for (x2edit::Index e = 0; e < cfg.model.num_experts; ++e) {
            const double p = task_total > 0.0 ? total.counts.at(t, e) / task_total : 0.0;
            util.push_back(p);
            if (p > 0.0) {
                entropy -= p * std::log(p);
            }
            if (total.counts.at(t, e) > best) {
                best = total.counts.at(t, e);
                top_expert[static_cast<std::size_t>(t)] = static_cast<int>(e);
            }
        }
        row["utilization"] = util;
        row["entropy"] = entropy;
        row["top_expert"] = top_expert[static_cast<std::size_t>(t)];
        per_task.push_back(std::move(row));
        if (task_total > 0.0) {
            min_entropy = std::min(min_entropy, entropy);
        }
    }

    // fraction of task pairs sharing a top expert
    int agree = 0, pairs = 0;
    for (x2edit::Index a = 0; a < cfg.model.num_tasks; ++a) {
        for (x2edit::Index b = a + 1; b < cfg.model.num_tasks; ++b) {
            ++pairs;
            if (top_expert[static_cast<std::size_t>(a)] ==
                top_expert[static_cast<std::size_t>(b)]) {
                ++agree;
            }
        }
    }

    ordered_json report;
    report["checkpoint"] = checkpoint;
    report["batches"] = batches;
    report["num_tasks"] = cfg.model.num_tasks;
    report["num_experts"] = cfg.model.num_experts;
    report["uniform_entropy"] = std::log(static_cast<double>(cfg.model.num_experts));
    report["min_task_entropy"] = min_entropy;
    report["per_task"] = per_task;
    report["expert_totals"] = total.expert_totals;
    report["total_activations"] = total.total_activations;
    report["expected_activations"] = static_cast<double>(batches) * cfg.batch * tokens *
                                     cfg.model.top_k * cfg.model.num_blocks;
    report["top_expert_agreement"] = pairs > 0 ? static_cast<double>(agree) / pairs : 0.0;

    const fs::path out(out_dir);
    fs::create_directories(out / "tables");
    std::ofstream f(out / "tables" / "route_stats.json");
    f << report.dump(2) << '\n';
    std::cout << report.dump(2) << '\n';

    json config;
    config["checkpoint"] = checkpoint;
    config["batches"] = batches;
    write_manifest(out, "route-stats", config,
                   json{{"table", (out / "tables" / "route_stats.json").string()}}, started,
                   iso_timestamp());
    return 0;
}

int cmd_sample(const std::string& checkpoint, int task, int steps, std::uint64_t seed,
               const std::string& out_dir) {
    const std::string started = iso_timestamp();
    x2edit::Trainer trainer = x2edit::Trainer::from_checkpoint(checkpoint);
    const x2edit::TrainConfig& cfg = trainer.config();
    if (task < 0 || task >= static_cast<int>(cfg.model.num_tasks)) {
        throw x2edit::LabelError("task id " + std::to_string(task) + " outside [0, " +
                                 std::to_string(cfg.model.num_tasks) + ")");
    }
    if (steps < 1) {
        throw x2edit::ParameterError("steps must be >= 1");
    }

    x2edit::Rng src_rng = x2edit::Rng::stream(seed, "sample_src");
    x2edit::Tensor src({cfg.model.n_src, cfg.model.d_in});
    for (x2edit::Index i = 0; i < src.size(); ++i) {
        src[i] = src_rng.gaussian(0.0, cfg.src_std);
    }
    x2edit::Rng noise_rng = x2edit::Rng::stream(seed, "noise");
    x2edit::Tensor generated =
        x2edit::euler_sample(trainer.model(), src, task, steps, noise_rng);

    ordered_json artifact;
    artifact["task"] = task;
    artifact["steps"] = steps;
    artifact["seed"] = seed;
    artifact["n_tgt"] = cfg.model.n_tgt;
    artifact["d_in"] = cfg.model.d_in;
    artifact["source"] = tensor_to_json(src);
    artifact["generated"] = tensor_to_json(generated);

    const fs::path out(out_dir);
    fs::create_directories(out / "samples");
    const fs::path artifact_path =
        out / "samples" /
        ("sample_task" + std::to_string(task) + "_seed" + std::to_string(seed) + ".json");
    std::ofstream f(artifact_path);
    f << artifact.dump(2) << '\n';
    std::printf("wrote %s\n", artifact_path.string().c_str());

    json config;
    config["checkpoint"] = checkpoint;
    config["task"] = task;
    config["steps"] = steps;
    config["seed"] = seed;
    write_manifest(out, "sample", config, json{{"artifact", artifact_path.string()}}, started,
                   iso_timestamp());
    return 0;
}

int cmd_ablate(const std::string& grid_path, const CommonFlags& flags) {
    const std::string started = iso_timestamp();
    std::ifstream file(grid_path);
    if (!file) {
        throw x2edit::ConfigError("grid file not found: " + grid_path);
    }
    json grid;
    try {
        grid = json::parse(file);
    } catch (const json::exception& e) {
        throw x2edit::ConfigError("grid file is not valid JSON: " + std::string(e.what()));
    }
    if (!grid.contains("arms") || !grid["arms"].is_array() || grid["arms"].empty()) {
        throw x2edit::ConfigError("grid needs a nonempty 'arms' array");
    }

    json base_json = grid.value("base", json::object());
    if (flags.seed) {
        base_json["seed"] = *flags.seed;
    }
    if (flags.steps) {
        base_json["steps"] = *flags.steps;
    }
    if (flags.workers) {
        base_json["workers"] = *flags.workers;
    }
    for (const std::string& ov : flags.overrides) {
        apply_override(base_json, ov);
    }
    const json defaults = x2edit::config_to_json(x2edit::TrainConfig{});
    x2edit::TrainConfig base =
        x2edit::config_from_json(x2edit::merge_config(defaults, base_json));

    std::vector<x2edit::AblationArm> arms;
    std::set<std::string> names;
    for (const json& arm : grid["arms"]) {
        if (!arm.contains("name")) {
            throw x2edit::ConfigError("every arm needs a name");
        }
        const std::string name = arm["name"].get<std::string>();
        if (!names.insert(name).second) {
            throw x2edit::ConfigError("duplicate arm name: " + name);
        }
        arms.push_back({name, arm.value("overrides", json::object())});
    }

    std::vector<x2edit::AblationRow> rows = x2edit::run_ablation(base, arms);

    const fs::path out(flags.out_dir);
    fs::create_directories(out / "tables");
    const fs::path table_json = out / "tables" / "ablation.json";
    const fs::path table_text = out / "tables" / "ablation.txt";
    {
        std::ofstream jf(table_json);
        jf << x2edit::ablation_table_json(rows).dump(2) << '\n';
        std::ofstream tf(table_text);
        tf << x2edit::ablation_table_text(rows);
    }
    std::fputs(x2edit::ablation_table_text(rows).c_str(), stdout);

    json outputs;
    outputs["table_json"] = table_json.string();
    outputs["table_text"] = table_text.string();
    write_manifest(out, "ablate", x2edit::config_to_json(base), outputs, started,
                   iso_timestamp());

    for (const x2edit::AblationRow& row : rows) {
        if (!row.ok) {
            return 1;
        }
    }
    return 0;
}

bool is_usage_error(const std::exception& e) {
    return dynamic_cast<const x2edit::ConfigError*>(&e) != nullptr ||
           dynamic_cast<const x2edit::ParameterError*>(&e) != nullptr ||
           dynamic_cast<const x2edit::FormatError*>(&e) != nullptr ||
           dynamic_cast<const x2edit::VersionError*>(&e) != nullptr ||
           dynamic_cast<const x2edit::LabelError*>(&e) != nullptr ||
           dynamic_cast<const x2edit::TaskSpecError*>(&e) != nullptr ||
           dynamic_cast<const x2edit::DimensionError*>(&e) != nullptr;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"task-aware MoE-LoRA trainer with contrastive regularization"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::optional<std::string> resume;

    auto add_common = [&](CLI::App* cmd, bool with_config = true) {
        if (with_config) {
            cmd->add_option("--config", flags.config_path, "JSON config file");
        }
        cmd->add_option("--out", flags.out_dir,
                        "output directory (default $X2EDIT_OUT or ./out)");
        cmd->add_option("--seed", flags.seed, "root seed override");
        cmd->add_option("--steps", flags.steps, "step-count override");
        cmd->add_option("--workers", flags.workers, "simulated worker count override");
        cmd->add_option("--override", flags.overrides,
                        "config override key=value (repeatable, dotted paths)");
    };

    CLI::App* train = app.add_subcommand("train", "run the training loop");
    add_common(train);
    train->add_option("--resume", resume, "checkpoint to resume from");

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference checks of the analytic gradients");
    std::string scope = "all";
    std::uint64_t gc_seed = 1;
    bool inject_fault = false;
    std::string gc_out = default_out_dir();
    gradcheck->add_option("--scope", scope, "gate|experts|contrastive|dit|all")
        ->check(CLI::IsMember({"gate", "experts", "contrastive", "dit", "all"}));
    gradcheck->add_option("--seed", gc_seed, "probe seed");
    gradcheck->add_option("--out", gc_out, "output directory");
    gradcheck->add_flag("--inject-gradient-fault", inject_fault,
                        "corrupt one analytic gradient (harness self-test)")
        ->group("");

    CLI::App* verify = app.add_subcommand("verify-contrastive",
                                          "oracle and sharded-gather equivalence checks");
    std::vector<std::int64_t> batch_sizes{2, 4, 6, 8};
    std::vector<int> vworkers{1, 2, 4};
    double tau = 0.5;
    std::uint64_t v_seed = 1;
    std::string v_out = default_out_dir();
    verify->add_option("--batch-sizes", batch_sizes, "batch sizes to test");
    verify->add_option("--workers", vworkers, "worker counts to test");
    verify->add_option("--tau", tau, "temperature");
    verify->add_option("--seed", v_seed, "probe seed");
    verify->add_option("--out", v_out, "output directory");

    CLI::App* route = app.add_subcommand("route-stats", "expert routing statistics");
    std::string route_ckpt;
    int route_batches = 8;
    std::string route_out = default_out_dir();
    route->add_option("--checkpoint", route_ckpt, "checkpoint file")->required();
    route->add_option("--batches", route_batches, "evaluation batches");
    route->add_option("--out", route_out, "output directory");

    CLI::App* sample = app.add_subcommand("sample", "generate target tokens for a task");
    std::string sample_ckpt;
    int sample_task = 0;
    int sample_steps = 32;
    std::uint64_t sample_seed = 1;
    std::string sample_out = default_out_dir();
    sample->add_option("--checkpoint", sample_ckpt, "checkpoint file")->required();
    sample->add_option("--task", sample_task, "task id")->required();
    sample->add_option("--steps", sample_steps, "Euler steps");
    sample->add_option("--seed", sample_seed, "noise seed");
    sample->add_option("--out", sample_out, "output directory");

    CLI::App* ablate = app.add_subcommand("ablate", "run an ablation grid");
    std::string grid_path;
    ablate->add_option("--grid", grid_path, "grid JSON file")->required();
    add_common(ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) {
            return cmd_train(flags, resume);
        }
        if (gradcheck->parsed()) {
            return cmd_gradcheck(scope, gc_seed, inject_fault, gc_out);
        }
        if (verify->parsed()) {
            return cmd_verify_contrastive(batch_sizes, vworkers, tau, v_seed, v_out);
        }
        if (route->parsed()) {
            return cmd_route_stats(route_ckpt, route_batches, route_out);
        }
        if (sample->parsed()) {
            return cmd_sample(sample_ckpt, sample_task, sample_steps, sample_seed, sample_out);
        }
        if (ablate->parsed()) {
            return cmd_ablate(grid_path, flags);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return is_usage_error(e) ? 2 : 1;
    }
    return 2;
}
