#include "x2edit/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "x2edit/checkpoint.hpp"
#include "x2edit/error.hpp"

namespace x2edit {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

json rng_state_to_json(const Rng::State& s) {
    json j;
    j["s"] = {std::to_string(s.s[0]), std::to_string(s.s[1]), std::to_string(s.s[2]),
              std::to_string(s.s[3])};
    j["has_spare"] = s.has_spare;
    std::uint64_t bits = 0;
    static_assert(sizeof(bits) == sizeof(s.spare));
    std::memcpy(&bits, &s.spare, 8);
    j["spare_bits"] = std::to_string(bits);
    return j;
}

Rng::State rng_state_from_json(const json& j) {
    Rng::State s;
    for (int i = 0; i < 4; ++i) {
        s.s[static_cast<std::size_t>(i)] =
            std::stoull(j.at("s").at(i).get<std::string>());
    }
    s.has_spare = j.at("has_spare").get<bool>();
    const std::uint64_t bits = std::stoull(j.at("spare_bits").get<std::string>());
    std::memcpy(&s.spare, &bits, 8);
    return s;
}

void check_known_keys(const json& j, const std::set<std::string>& known,
                      const std::string& scope) {
    for (const auto& item : j.items()) {
        if (known.find(item.key()) == known.end()) {
            throw ConfigError("unknown config key '" + item.key() + "' in " + scope);
        }
    }
}

std::uint64_t fnv1a_bytes(const unsigned char* data, std::size_t len) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

void TrainConfig::validate() const {
    model.validate();
    if (batch < 1) {
        throw ConfigError("batch must be >= 1");
    }
    if (contrastive_enabled() && batch < 2) {
        throw ConfigError("contrastive training needs batch >= 2 for positives");
    }
    if (tau <= 0.0) {
        throw ParameterError("tau must be > 0");
    }
    if (lambda < 0.0 || task_weight < 0.0) {
        throw ParameterError("loss weights must be >= 0");
    }
    if (workers < 1 || static_cast<Index>(workers) > batch) {
        throw ConfigError("workers must lie in [1, batch]");
    }
    if (sampler_capacity < 1) {
        throw ConfigError("sampler_capacity must be >= 1");
    }
    for (int l : contrastive_layers) {
        if (l < 0 || l >= static_cast<int>(model.num_blocks)) {
            throw ConfigError("contrastive layer index outside [0, blocks)");
        }
    }
    if (model.n_src != model.n_tgt) {
        throw ConfigError("synthetic tasks require n_src == n_tgt");
    }
}

json config_to_json(const TrainConfig& cfg) {
    json m;
    m["d_model"] = cfg.model.d_model;
    m["heads"] = cfg.model.num_heads;
    m["blocks"] = cfg.model.num_blocks;
    m["n_tgt"] = cfg.model.n_tgt;
    m["n_src"] = cfg.model.n_src;
    m["d_in"] = cfg.model.d_in;
    m["time_width"] = cfg.model.time_width;
    m["arch"] = to_string(cfg.model.arch);
    m["num_experts"] = cfg.model.num_experts;
    m["top_k"] = cfg.model.top_k;
    m["rank"] = cfg.model.rank;
    m["shared_rank"] = cfg.model.shared_rank;
    m["lora_alpha"] = cfg.model.lora_alpha;
    m["task_dim"] = cfg.model.task_dim;
    m["num_tasks"] = cfg.model.num_tasks;
    m["init_std"] = cfg.model.init_std;

    json j;
    j["model"] = m;
    j["lr"] = cfg.lr;
    j["warmup_lr"] = cfg.warmup_lr;
    j["steps"] = cfg.steps;
    j["warmup_steps"] = cfg.warmup_steps;
    j["batch"] = cfg.batch;
    j["lambda"] = cfg.lambda;
    j["tau"] = cfg.tau;
    j["task_weight"] = cfg.task_weight;
    j["seed"] = cfg.seed;
    j["metric"] = to_string(cfg.metric);
    if (cfg.contrastive_layers.empty()) {
        j["contrastive_layers"] = "all";
    } else {
        j["contrastive_layers"] = cfg.contrastive_layers;
    }
    j["workers"] = cfg.workers;
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["val_per_task"] = cfg.val_per_task;
    j["src_std"] = cfg.src_std;
    j["sampler_capacity"] = cfg.sampler_capacity;
    j["include_self_term"] = cfg.include_self_term;
    j["average_layers"] = cfg.average_layers;
    return j;
}

TrainConfig config_from_json(const json& j) {
    static const std::set<std::string> top_keys = {
        "model", "lr", "warmup_lr", "steps", "warmup_steps", "batch", "lambda",
        "tau", "task_weight", "seed", "metric", "contrastive_layers", "workers",
        "checkpoint_every", "val_per_task", "src_std", "sampler_capacity",
        "include_self_term", "average_layers"};
    static const std::set<std::string> model_keys = {
        "d_model", "heads", "blocks", "n_tgt", "n_src", "d_in", "time_width",
        "arch", "num_experts", "top_k", "rank", "shared_rank", "lora_alpha",
        "task_dim", "num_tasks", "init_std"};
    if (!j.is_object()) {
        throw ConfigError("config root must be a JSON object");
    }
    check_known_keys(j, top_keys, "config");

    TrainConfig cfg;
    try {
        if (j.contains("model")) {
            const json& m = j["model"];
            check_known_keys(m, model_keys, "config.model");
            if (m.contains("d_model")) cfg.model.d_model = m["d_model"].get<Index>();
            if (m.contains("heads")) cfg.model.num_heads = m["heads"].get<int>();
            if (m.contains("blocks")) cfg.model.num_blocks = m["blocks"].get<Index>();
            if (m.contains("n_tgt")) cfg.model.n_tgt = m["n_tgt"].get<Index>();
            if (m.contains("n_src")) cfg.model.n_src = m["n_src"].get<Index>();
            if (m.contains("d_in")) cfg.model.d_in = m["d_in"].get<Index>();
            if (m.contains("time_width")) cfg.model.time_width = m["time_width"].get<Index>();
            if (m.contains("arch")) cfg.model.arch = adapter_arch_from_string(m["arch"].get<std::string>());
            if (m.contains("num_experts")) cfg.model.num_experts = m["num_experts"].get<Index>();
            if (m.contains("top_k")) cfg.model.top_k = m["top_k"].get<int>();
            if (m.contains("rank")) cfg.model.rank = m["rank"].get<Index>();
            if (m.contains("shared_rank")) cfg.model.shared_rank = m["shared_rank"].get<Index>();
            if (m.contains("lora_alpha")) cfg.model.lora_alpha = m["lora_alpha"].get<double>();
            if (m.contains("task_dim")) cfg.model.task_dim = m["task_dim"].get<Index>();
            if (m.contains("num_tasks")) cfg.model.num_tasks = m["num_tasks"].get<Index>();
            if (m.contains("init_std")) cfg.model.init_std = m["init_std"].get<double>();
        }
        if (j.contains("lr")) cfg.lr = j["lr"].get<double>();
        if (j.contains("warmup_lr")) cfg.warmup_lr = j["warmup_lr"].get<double>();
        if (j.contains("steps")) cfg.steps = j["steps"].get<std::uint64_t>();
        if (j.contains("warmup_steps")) cfg.warmup_steps = j["warmup_steps"].get<std::uint64_t>();
        if (j.contains("batch")) cfg.batch = j["batch"].get<Index>();
        if (j.contains("lambda")) cfg.lambda = j["lambda"].get<double>();
        if (j.contains("tau")) cfg.tau = j["tau"].get<double>();
        if (j.contains("task_weight")) cfg.task_weight = j["task_weight"].get<double>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("metric")) cfg.metric = contrastive_metric_from_string(j["metric"].get<std::string>());
        if (j.contains("contrastive_layers")) {
            const json& layers = j["contrastive_layers"];
            cfg.contrastive_layers.clear();
            if (layers.is_string()) {
                if (layers.get<std::string>() != "all") {
                    throw ConfigError("contrastive_layers must be \"all\" or an index array");
                }
            } else {
                cfg.contrastive_layers = layers.get<std::vector<int>>();
            }
        }
        if (j.contains("workers")) cfg.workers = j["workers"].get<int>();
        if (j.contains("checkpoint_every")) cfg.checkpoint_every = j["checkpoint_every"].get<std::uint64_t>();
        if (j.contains("val_per_task")) cfg.val_per_task = j["val_per_task"].get<Index>();
        if (j.contains("src_std")) cfg.src_std = j["src_std"].get<double>();
        if (j.contains("sampler_capacity")) cfg.sampler_capacity = j["sampler_capacity"].get<Index>();
        if (j.contains("include_self_term")) cfg.include_self_term = j["include_self_term"].get<bool>();
        if (j.contains("average_layers")) cfg.average_layers = j["average_layers"].get<bool>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

nlohmann::json metrics_to_json(const StepMetrics& m) {
    ordered_json j;
    j["step"] = m.step;
    j["l_diff"] = m.l_diff;
    j["l_task"] = m.l_task;
    j["total"] = m.total;
    j["grad_norm"] = m.grad_norm;
    j["sep_ratio"] = m.sep_ratio;
    j["expert_util"] = m.expert_util;
    return j;
}

Trainer::Trainer(const TrainConfig& cfg) {
    build(cfg);
    warmup();
}

void Trainer::build(const TrainConfig& cfg) {
    cfg.validate();
    cfg_ = cfg;
    specs_ = default_task_specs(cfg.model.num_tasks);
    data_cfg_.n_src = cfg.model.n_src;
    data_cfg_.n_tgt = cfg.model.n_tgt;
    data_cfg_.d_in = cfg.model.d_in;
    data_cfg_.src_std = cfg.src_std;

    Rng init_rng = Rng::stream(cfg.seed, "init");
    rng_data_ = Rng::stream(cfg.seed, "data");
    rng_noise_ = Rng::stream(cfg.seed, "noise");
    rng_sampler_ = Rng::stream(cfg.seed, "sampler");

    model_ = make_dit_model(cfg.model, init_rng);
    grads_ = zeros_like(model_);
    opt_ = make_adam_state(model_);
    sampler_ = make_sampler(cfg.model.num_tasks, cfg.sampler_capacity);
}

std::vector<FlowSample> Trainer::next_batch() {
    return make_synthetic_batch(specs_, sampler_, cfg_.batch, data_cfg_, rng_sampler_,
                                rng_data_, rng_noise_);
}

void Trainer::warmup() {
    if (cfg_.warmup_steps == 0) {
        return;
    }
    AdamState warm_state = make_adam_state(model_);
    AdamConfig warm_cfg;
    warm_cfg.lr = cfg_.warmup_lr;
    for (std::uint64_t k = 0; k < cfg_.warmup_steps; ++k) {
        std::vector<FlowSample> batch = next_batch();
        DitCache cache;
        DitForwardResult fw = dit_forward(model_, batch, /*moe_enabled=*/false, &cache);
        Tensor u(fw.v_pred.shape());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Tensor ui = flow_target(batch[i].x0, batch[i].eps);
            std::copy(ui.data(), ui.data() + ui.size(),
                      u.data() + static_cast<Index>(i) * ui.size());
        }
        const double loss = diffusion_loss(fw.v_pred, u);
        if (!std::isfinite(loss)) {
            throw DivergenceError("non-finite warm-up loss at step " + std::to_string(k));
        }
        for (ParamRef& ref : param_refs(grads_)) {
            ref.tensor->set_zero();
        }
        dit_backward(model_, cache, diffusion_loss_grad(fw.v_pred, u), {}, &grads_);
        adam_step(model_, grads_, warm_state, warm_cfg, UpdateSet::kBackbone);
    }
}

StepMetrics Trainer::step() {
    std::vector<FlowSample> batch = next_batch();
    DitCache cache;
    DitForwardResult fw = dit_forward(model_, batch, /*moe_enabled=*/true, &cache);

    Tensor u(fw.v_pred.shape());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor ui = flow_target(batch[i].x0, batch[i].eps);
        std::copy(ui.data(), ui.data() + ui.size(),
                  u.data() + static_cast<Index>(i) * ui.size());
    }
    const double l_diff = diffusion_loss(fw.v_pred, u);

    // contrastive term over the configured layer taps
    double l_task = 0.0;
    std::vector<Tensor> dhidden(static_cast<std::size_t>(cfg_.model.num_blocks));
    if (cfg_.contrastive_enabled()) {
        std::vector<int> taps = cfg_.contrastive_layers;
        if (taps.empty()) {
            for (int l = 0; l < static_cast<int>(cfg_.model.num_blocks); ++l) {
                taps.push_back(l);
            }
        }
        InfoNceOptions opts;
        opts.tau = cfg_.tau;
        opts.metric = cfg_.metric;
        opts.include_self_term = cfg_.include_self_term;

        if (cfg_.workers == 1) {
            std::vector<HiddenBatch> subset;
            for (int l : taps) {
                subset.push_back(fw.hidden[static_cast<std::size_t>(l)]);
            }
            MultiLayerTaskLoss mt =
                multi_layer_task_loss(subset, opts, cfg_.average_layers, /*with_grads=*/true);
            l_task = mt.loss;
            for (std::size_t i = 0; i < taps.size(); ++i) {
                mt.dhidden[i].vec() *= cfg_.task_weight;
                dhidden[static_cast<std::size_t>(taps[static_cast<std::size_t>(i)])] =
                    std::move(mt.dhidden[i]);
            }
        } else {
            // simulated multi-worker gather: shard rows, score each worker's
            // rows against the gathered global set, sum the per-worker grads
            const double layer_weight =
                cfg_.average_layers ? 1.0 / static_cast<double>(taps.size()) : 1.0;
            for (int l : taps) {
                const HiddenBatch& hb = fw.hidden[static_cast<std::size_t>(l)];
                const Index b = hb.h.dim(0);
                ShardedBatch sb;
                Index row = 0;
                for (int w = 0; w < cfg_.workers; ++w) {
                    const Index count = b / cfg_.workers + (w < static_cast<int>(b % cfg_.workers) ? 1 : 0);
                    HiddenBatch shard;
                    shard.h = Tensor({count, hb.h.dim(1), hb.h.dim(2)});
                    std::copy(hb.h.data() + row * hb.h.dim(1) * hb.h.dim(2),
                              hb.h.data() + (row + count) * hb.h.dim(1) * hb.h.dim(2),
                              shard.h.data());
                    shard.y.assign(hb.y.begin() + row, hb.y.begin() + row + count);
                    shard.layer_index = hb.layer_index;
                    sb.shards.push_back(std::move(shard));
                    row += count;
                }
                ShardedInfoNce sr = sharded_task_infonce(sb, opts, /*with_grads=*/true);
                l_task += layer_weight * sr.loss;
                Tensor dz(sr.worker_grads.front().shape());
                for (const Tensor& wg : sr.worker_grads) {
                    dz.vec() += wg.vec();
                }
                dz.vec() *= layer_weight * cfg_.task_weight;
                Tensor& slot = dhidden[static_cast<std::size_t>(l)];
                if (slot.size() == 0) {
                    slot = dz.reshaped(hb.h.shape());
                } else {
                    slot.vec() += dz.vec();
                }
            }
        }
    }

    const double total = total_loss(cfg_.task_weight * l_task, l_diff, cfg_.lambda);
    if (!std::isfinite(total)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(step_ + 1));
    }

    Tensor dv = diffusion_loss_grad(fw.v_pred, u);
    dv.vec() *= cfg_.lambda;
    for (ParamRef& ref : param_refs(grads_)) {
        ref.tensor->set_zero();
    }
    dit_backward(model_, cache, dv, dhidden, &grads_);

    AdamConfig adam_cfg;
    adam_cfg.lr = cfg_.lr;
    adam_step(model_, grads_, opt_, adam_cfg, UpdateSet::kTrainable);
    ++step_;

    StepMetrics m;
    m.step = step_;
    m.l_diff = l_diff;
    m.l_task = l_task;
    m.total = total;
    m.grad_norm = grad_norm(grads_, UpdateSet::kTrainable);
    m.sep_ratio = separability_ratio(fw.hidden.back());
    if (cfg_.model.arch != AdapterArch::kLora) {
        std::vector<Tensor> gates;
        for (const DitBlockCache& bc : cache.blocks) {
            gates.push_back(bc.moe.gates);
        }
        RoutingStats stats = collect_routing_stats(gates, cache.y, cfg_.model.num_tasks);
        m.expert_util.assign(static_cast<std::size_t>(cfg_.model.num_experts), 0.0);
        if (stats.total_activations > 0.0) {
            for (Index e = 0; e < cfg_.model.num_experts; ++e) {
                m.expert_util[static_cast<std::size_t>(e)] =
                    stats.expert_totals[static_cast<std::size_t>(e)] / stats.total_activations;
            }
        }
    }
    return m;
}

double Trainer::validation_l_diff() const {
    Rng val_rng = Rng::stream(cfg_.seed, "val");
    double sum_sq = 0.0;
    double count = 0.0;
    std::vector<FlowSample> chunk;
    auto flush = [&]() {
        if (chunk.empty()) {
            return;
        }
        DitForwardResult fw = dit_forward(model_, chunk, /*moe_enabled=*/true, nullptr);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            Tensor ui = flow_target(chunk[i].x0, chunk[i].eps);
            const Index sz = ui.size();
            for (Index e = 0; e < sz; ++e) {
                const double diff = fw.v_pred[static_cast<Index>(i) * sz + e] - ui[e];
                sum_sq += diff * diff;
            }
            count += static_cast<double>(sz);
        }
        chunk.clear();
    };
    for (const SyntheticTaskSpec& spec : specs_) {
        for (Index i = 0; i < cfg_.val_per_task; ++i) {
            chunk.push_back(make_task_sample(spec, data_cfg_, val_rng, val_rng));
            if (static_cast<Index>(chunk.size()) >= 32) {
                flush();
            }
        }
    }
    flush();
    return count > 0.0 ? sum_sq / count : 0.0;
}

namespace {

std::vector<FlowSample> probe_batch(const std::vector<SyntheticTaskSpec>& specs,
                                    const SyntheticDataConfig& dc, std::uint64_t seed) {
    Rng probe_rng = Rng::stream(seed, "probe");
    std::vector<FlowSample> batch;
    for (const SyntheticTaskSpec& spec : specs) {
        for (int i = 0; i < 8; ++i) {
            batch.push_back(make_task_sample(spec, dc, probe_rng, probe_rng));
        }
    }
    return batch;
}

}  // namespace

double Trainer::probe_separability() const {
    std::vector<FlowSample> batch = probe_batch(specs_, data_cfg_, cfg_.seed);
    DitForwardResult fw = dit_forward(model_, batch, /*moe_enabled=*/true, nullptr);
    return separability_ratio(fw.hidden.back());
}

RoutingStats Trainer::probe_routing() const {
    std::vector<FlowSample> batch = probe_batch(specs_, data_cfg_, cfg_.seed);
    DitCache cache;
    dit_forward(model_, batch, /*moe_enabled=*/true, &cache);
    std::vector<Tensor> gates;
    for (const DitBlockCache& bc : cache.blocks) {
        if (bc.moe.gates.size() > 0) {
            gates.push_back(bc.moe.gates);
        }
    }
    return collect_routing_stats(gates, cache.y, cfg_.model.num_tasks);
}

std::uint64_t Trainer::trainable_param_count() {
    std::uint64_t count = 0;
    for (const ParamRef& ref : param_refs(model_)) {
        if (ref.trainable) {
            count += static_cast<std::uint64_t>(ref.tensor->size());
        }
    }
    return count;
}

std::vector<std::uint64_t> Trainer::backbone_checksums() {
    std::vector<std::uint64_t> sums;
    for (const ParamRef& ref : param_refs(model_)) {
        if (!ref.trainable) {
            sums.push_back(fnv1a_bytes(
                reinterpret_cast<const unsigned char*>(ref.tensor->data()),
                static_cast<std::size_t>(ref.tensor->size()) * sizeof(Scalar)));
        }
    }
    return sums;
}

void Trainer::save(const std::string& path) {
    std::vector<TensorEntry> entries;
    for (ParamRef& ref : param_refs(model_)) {
        entries.push_back({ref.name, ref.tensor});
    }
    auto model_params = param_refs(model_);
    auto m_params = param_refs(opt_.m);
    auto v_params = param_refs(opt_.v);
    for (std::size_t i = 0; i < model_params.size(); ++i) {
        if (model_params[i].trainable) {
            entries.push_back({"opt.m." + model_params[i].name, m_params[i].tensor});
            entries.push_back({"opt.v." + model_params[i].name, v_params[i].tensor});
        }
    }

    json meta;
    meta["config"] = config_to_json(cfg_);
    meta["step"] = step_;
    meta["opt_step"] = opt_.step;
    meta["rng"] = {{"data", rng_state_to_json(rng_data_.state())},
                   {"noise", rng_state_to_json(rng_noise_.state())},
                   {"sampler", rng_state_to_json(rng_sampler_.state())}};
    meta["sampler_cache"] = std::vector<int>(sampler_.cache.begin(), sampler_.cache.end());
    save_checkpoint(path, entries, meta);
}

Trainer Trainer::from_checkpoint(const std::string& path) {
    LoadedCheckpoint loaded = load_checkpoint(path);
    if (!loaded.metadata.contains("config")) {
        throw FormatError("checkpoint metadata lacks a config");
    }
    TrainConfig cfg = config_from_json(loaded.metadata["config"]);

    Trainer t;
    t.build(cfg);

    for (ParamRef& ref : param_refs(t.model_)) {
        auto it = loaded.tensors.find(ref.name);
        if (it == loaded.tensors.end()) {
            throw FormatError("checkpoint lacks tensor '" + ref.name + "'");
        }
        if (!it->second.same_shape(*ref.tensor)) {
            throw FormatError("checkpoint tensor '" + ref.name + "' has the wrong shape");
        }
        *ref.tensor = it->second;
    }
    auto model_params = param_refs(t.model_);
    auto m_params = param_refs(t.opt_.m);
    auto v_params = param_refs(t.opt_.v);
    for (std::size_t i = 0; i < model_params.size(); ++i) {
        if (!model_params[i].trainable) {
            continue;
        }
        auto mit = loaded.tensors.find("opt.m." + model_params[i].name);
        auto vit = loaded.tensors.find("opt.v." + model_params[i].name);
        if (mit != loaded.tensors.end()) {
            *m_params[i].tensor = mit->second;
        }
        if (vit != loaded.tensors.end()) {
            *v_params[i].tensor = vit->second;
        }
    }

    t.step_ = loaded.metadata.at("step").get<std::uint64_t>();
    t.opt_.step = loaded.metadata.at("opt_step").get<std::uint64_t>();
    t.rng_data_.set_state(rng_state_from_json(loaded.metadata.at("rng").at("data")));
    t.rng_noise_.set_state(rng_state_from_json(loaded.metadata.at("rng").at("noise")));
    t.rng_sampler_.set_state(rng_state_from_json(loaded.metadata.at("rng").at("sampler")));
    t.sampler_ = make_sampler(cfg.model.num_tasks, cfg.sampler_capacity);
    for (const auto& v : loaded.metadata.at("sampler_cache")) {
        const int task = v.get<int>();
        t.sampler_.cache.push_back(task);
        ++t.sampler_.counts[static_cast<std::size_t>(task)];
    }
    return t;
}

TrainSummary run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                          const std::optional<std::string>& resume_from) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "checkpoints");

    Trainer trainer = resume_from ? Trainer::from_checkpoint(*resume_from) : Trainer(cfg);
    const TrainConfig& run_cfg = trainer.config();

    TrainSummary summary;
    summary.metrics_path = (out_dir / "metrics.jsonl").string();
    std::ofstream metrics(summary.metrics_path, std::ios::trunc);
    if (!metrics) {
        throw ConfigError("cannot open metrics file: " + summary.metrics_path);
    }

    auto save_at = [&](std::uint64_t step) {
        const std::string path =
            (out_dir / "checkpoints" / ("step_" + std::to_string(step) + ".x2el")).string();
        trainer.save(path);
        summary.checkpoint_paths.push_back(path);
    };

    while (trainer.current_step() < run_cfg.steps) {
        StepMetrics m = trainer.step();
        metrics << metrics_to_json(m).dump() << '\n';
        if (run_cfg.checkpoint_every > 0 && m.step % run_cfg.checkpoint_every == 0 &&
            m.step < run_cfg.steps) {
            save_at(m.step);
        }
    }
    metrics.flush();
    save_at(run_cfg.steps);
    summary.final_step = trainer.current_step();
    return summary;
}

nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overrides) {
    if (!overrides.is_object() || !base.is_object()) {
        return overrides;
    }
    for (const auto& item : overrides.items()) {
        if (base.contains(item.key()) && base[item.key()].is_object() &&
            item.value().is_object()) {
            base[item.key()] = merge_config(base[item.key()], item.value());
        } else {
            base[item.key()] = item.value();
        }
    }
    return base;
}

std::vector<AblationRow> run_ablation(const TrainConfig& base,
                                      const std::vector<AblationArm>& arms) {
    std::vector<AblationRow> rows;
    for (const AblationArm& arm : arms) {
        AblationRow row;
        row.name = arm.name;
        try {
            const json merged = merge_config(config_to_json(base), arm.overrides);
            TrainConfig cfg = config_from_json(merged);
            Trainer trainer(cfg);
            while (trainer.current_step() < cfg.steps) {
                trainer.step();
                if (trainer.current_step() == 100) {
                    row.sep_ratio_step100 = trainer.probe_separability();
                }
            }
            row.val_l_diff = trainer.validation_l_diff();
            row.sep_ratio_final = trainer.probe_separability();
            if (cfg.model.arch != AdapterArch::kLora) {
                RoutingStats stats = trainer.probe_routing();
                double min_e = 1e300, sum_e = 0.0;
                int counted = 0;
                for (Index t = 0; t < stats.num_tasks; ++t) {
                    double total = 0.0;
                    for (Index e = 0; e < stats.num_experts; ++e) {
                        total += stats.counts.at(t, e);
                    }
                    if (total == 0.0) {
                        continue;
                    }
                    const double ent = stats.task_entropy[static_cast<std::size_t>(t)];
                    min_e = std::min(min_e, ent);
                    sum_e += ent;
                    ++counted;
                }
                if (counted > 0) {
                    row.min_task_entropy = min_e;
                    row.mean_task_entropy = sum_e / counted;
                }
                row.uniform_entropy = std::log(static_cast<double>(cfg.model.num_experts));
            }
            row.trainable_params = trainer.trainable_param_count();
            json summary;
            summary["arch"] = to_string(cfg.model.arch);
            summary["num_experts"] = cfg.model.num_experts;
            summary["rank"] = cfg.model.rank;
            summary["shared_rank"] = cfg.model.shared_rank;
            summary["metric"] = to_string(cfg.metric);
            summary["task_weight"] = cfg.task_weight;
            if (cfg.contrastive_layers.empty()) {
                summary["contrastive_layers"] = "all";
            } else {
                summary["contrastive_layers"] = cfg.contrastive_layers;
            }
            summary["steps"] = cfg.steps;
            summary["seed"] = cfg.seed;
            row.arm_config = summary;
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

nlohmann::json ablation_table_json(const std::vector<AblationRow>& rows) {
    ordered_json table = ordered_json::array();
    for (const AblationRow& row : rows) {
        ordered_json r;
        r["name"] = row.name;
        r["ok"] = row.ok;
        if (!row.ok) {
            r["error"] = row.error;
        }
        r["val_l_diff"] = row.val_l_diff;
        r["sep_ratio_step100"] = row.sep_ratio_step100;
        r["sep_ratio_final"] = row.sep_ratio_final;
        r["min_task_entropy"] = row.min_task_entropy;
        r["mean_task_entropy"] = row.mean_task_entropy;
        r["uniform_entropy"] = row.uniform_entropy;
        r["trainable_params"] = row.trainable_params;
        r["config"] = row.arm_config;
        table.push_back(std::move(r));
    }
    return table;
}

std::string ablation_table_text(const std::vector<AblationRow>& rows) {
    char line[256];
    std::string out;
    std::snprintf(line, sizeof(line), "%-16s %-8s %7s %6s %6s %12s %10s %10s %12s %8s\n",
                  "arm", "arch", "experts", "rank", "shared", "params", "val_l_diff",
                  "sep@100", "sep@final", "min_ent");
    out += line;
    out += std::string(std::strlen(line) - 1, '-') + "\n";
    auto fmt = [](double v, char* buf, std::size_t n, const char* spec) {
        if (std::isnan(v)) {
            std::snprintf(buf, n, "%s", "-");
        } else {
            std::snprintf(buf, n, spec, v);
        }
    };
    for (const AblationRow& row : rows) {
        if (!row.ok) {
            std::snprintf(line, sizeof(line), "%-16s FAILED: %s\n", row.name.c_str(),
                          row.error.c_str());
            out += line;
            continue;
        }
        const std::string arch = row.arm_config.value("arch", "?");
        const std::int64_t experts = row.arm_config.value("num_experts", std::int64_t(0));
        const std::int64_t rank = row.arm_config.value("rank", std::int64_t(0));
        const std::int64_t shared = row.arm_config.value("shared_rank", std::int64_t(0));
        char val[24], sep100[24], sepf[24], ent[24];
        fmt(row.val_l_diff, val, sizeof(val), "%.6f");
        fmt(row.sep_ratio_step100, sep100, sizeof(sep100), "%.4f");
        fmt(row.sep_ratio_final, sepf, sizeof(sepf), "%.4f");
        fmt(row.min_task_entropy, ent, sizeof(ent), "%.4f");
        std::snprintf(line, sizeof(line),
                      "%-16s %-8s %7lld %6lld %6lld %12llu %10s %10s %12s %8s\n",
                      row.name.c_str(), arch.c_str(), static_cast<long long>(experts),
                      static_cast<long long>(rank), static_cast<long long>(shared),
                      static_cast<unsigned long long>(row.trainable_params), val, sep100,
                      sepf, ent);
        out += line;
    }
    return out;
}

}  // namespace x2edit
