#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ropecast/checkpoint.hpp"
#include "ropecast/config.hpp"
#include "ropecast/metrics.hpp"

namespace ropecast {

constexpr const char* kCheckpointKind = "ropecast-dit";

// ---------------------------------------------------------------------------
// Parameters <-> checkpoint

template <typename T>
std::vector<TensorEntry<T>> snapshot_tensors(const Parameters<T>& params,
                                             const std::string& prefix = "") {
    std::vector<TensorEntry<T>> out;
    for_each_tensor_shaped(const_cast<Parameters<T>&>(params),
                           [&](const std::string& name, std::vector<T>& v,
                               const std::vector<int>& shape, bool) {
                               out.push_back({prefix + name, shape, v});
                           });
    return out;
}

template <typename T>
void restore_tensors(Parameters<T>& params, const Checkpoint<T>& ckpt,
                     const std::string& prefix = "") {
    for_each_tensor_shaped(params, [&](const std::string& name, std::vector<T>& v,
                                       const std::vector<int>& shape, bool) {
        const TensorEntry<T>* t = ckpt.find(prefix + name);
        if (!t) throw std::runtime_error("checkpoint missing tensor: " + prefix + name);
        if (t->shape != shape || t->data.size() != v.size())
            throw std::runtime_error("checkpoint tensor shape mismatch: " + prefix + name);
        v = t->data;
    });
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay; decay applies to weight matrices only)

template <typename T>
struct AdamWState {
    Parameters<T> m;
    Parameters<T> v;
    long step = 0;

    static AdamWState init(const ModelConfig& cfg) {
        return {zero_parameters<T>(cfg), zero_parameters<T>(cfg), 0};
    }
};

template <typename T>
void adamw_step(Parameters<T>& params, const Parameters<T>& grads, AdamWState<T>& state,
                const TrainConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    auto p_list = tensor_list(params);
    auto g_list = tensor_list(const_cast<Parameters<T>&>(grads));
    auto m_list = tensor_list(state.m);
    auto v_list = tensor_list(state.v);
    std::vector<bool> decay_flags;
    for_each_tensor(params, [&](const std::string&, std::vector<T>&, bool decay) {
        decay_flags.push_back(decay);
    });
    for (size_t k = 0; k < p_list.size(); ++k) {
        auto& p = *p_list[k];
        auto& g = *g_list[k];
        auto& m = *m_list[k];
        auto& v = *v_list[k];
        const double wd = decay_flags[k] ? cfg.weight_decay : 0.0;
        for (size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double update = mhat / (std::sqrt(vhat) + cfg.adam_eps) + wd * p[i];
            p[i] = static_cast<T>(p[i] - cfg.learning_rate * update);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainerDiagnostics {
    long step = 0;
    double loss = 0.0;
};

class DivergenceError : public std::runtime_error {
  public:
    DivergenceError(long step, double loss)
        : std::runtime_error("training diverged at step " + std::to_string(step) +
                             " (loss = " + std::to_string(loss) + ")"),
          diagnostics{step, loss} {}
    TrainerDiagnostics diagnostics;
};

template <typename T>
struct TrainState {
    Parameters<T> params;
    AdamWState<T> opt;
    long step = 0;  // completed optimizer steps
};

template <typename T>
void save_train_checkpoint(const std::filesystem::path& path, const TrainState<T>& state,
                           const ModelConfig& mcfg, const TrainConfig& tcfg) {
    Checkpoint<T> ckpt;
    ckpt.meta = {{"kind", kCheckpointKind},
                 {"model", to_json(mcfg)},
                 {"train", to_json(tcfg)},
                 {"step", state.step},
                 {"seed", tcfg.seed}};
    ckpt.tensors = snapshot_tensors(state.params);
    auto m = snapshot_tensors(state.opt.m, "opt.m.");
    auto v = snapshot_tensors(state.opt.v, "opt.v.");
    ckpt.tensors.insert(ckpt.tensors.end(), m.begin(), m.end());
    ckpt.tensors.insert(ckpt.tensors.end(), v.begin(), v.end());
    save_checkpoint(path, ckpt);
}

template <typename T>
TrainState<T> load_train_checkpoint(const std::filesystem::path& path, const ModelConfig& mcfg) {
    const Checkpoint<T> ckpt = load_checkpoint<T>(path);
    if (ckpt.meta.value("kind", "") != kCheckpointKind)
        throw std::runtime_error("not a trainer checkpoint: " + path.string());
    TrainState<T> state;
    state.params = zero_parameters<T>(mcfg);
    state.opt = AdamWState<T>::init(mcfg);
    restore_tensors(state.params, ckpt);
    restore_tensors(state.opt.m, ckpt, "opt.m.");
    restore_tensors(state.opt.v, ckpt, "opt.v.");
    state.step = ckpt.meta.at("step").template get<long>();
    state.opt.step = state.step;
    return state;
}

inline ModelConfig checkpoint_model_config(const std::filesystem::path& path) {
    // Header-only peek; tensors are ignored.
    const Checkpoint<float> ckpt = load_checkpoint<float>(path);
    return model_config_from_json(ckpt.meta.at("model"));
}

// Builds the batch for a given global step. Element streams derive from
// (seed, global element index), so resumed runs reproduce the exact batches.
template <typename T>
TrainingBatch<T> make_training_batch(const Dataset& dataset, long step, const ModelConfig& mcfg,
                                     const TrainConfig& tcfg,
                                     const std::vector<TaskKind>& task_schedule) {
    TrainingBatch<T> batch;
    const long n = static_cast<long>(dataset.records.size());
    for (int e = 0; e < tcfg.batch_size; ++e) {
        const long k = step * tcfg.batch_size + e;
        Rng rng(mix_seed(tcfg.seed, 0xba7c, static_cast<uint64_t>(k)));
        const auto& record = dataset.records[rng.next_below(static_cast<uint64_t>(n))];
        const TaskKind task = task_schedule[k];
        const auto ex =
            make_task_example<T>(record.triple, task, mcfg.patch_size, mcfg.task_token_count);
        BatchOptions opts;
        opts.clean_latents = tcfg.clean_latents;
        opts.layout.adaptive_position = tcfg.adaptive_position;
        opts.layout.resample = tcfg.resample_rows ? ResamplePolicy::nearest_rows
                                                  : ResamplePolicy::reject;
        opts.time_dist = tcfg.time_dist;
        batch.elements.push_back(make_batch_element(ex.task, ex.conditions, ex.target, rng, opts));
    }
    return batch;
}

struct TrainResult {
    std::filesystem::path checkpoint_path;
    std::vector<double> losses;  // one entry per optimizer step taken here
};

// Deterministic training loop with per-step JSONL metrics and periodic
// checkpoints. Resumes from `state.step` when a loaded state is passed in.
template <typename T>
TrainResult train(TrainState<T>& state, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const Dataset& dataset, const std::filesystem::path& out_dir) {
    dataset.require_clean();
    if (dataset.records.empty()) throw std::invalid_argument("train: empty dataset");
    validate_model_config(mcfg);
    TaskMixture mixture;
    mixture.weights = tcfg.task_mixture;
    mixture.validate();
    std::filesystem::create_directories(out_dir);

    const auto freqs = make_frequencies<T>(mcfg.rope);
    const long total_elements = tcfg.steps * tcfg.batch_size;
    const std::vector<TaskKind> task_schedule = mixture.schedule(total_elements);
    int threads = tcfg.threads > 0 ? tcfg.threads
                                   : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, threads);

    std::ofstream log(out_dir / "metrics.jsonl", std::ios::app);
    const std::filesystem::path ckpt_path = out_dir / "checkpoint.rpk";
    TrainResult result;
    result.checkpoint_path = ckpt_path;

    for (long s = state.step; s < tcfg.steps; ++s) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto batch = make_training_batch<T>(dataset, s, mcfg, tcfg, task_schedule);
        auto [loss, grads] = loss_and_gradients(state.params, batch, mcfg, freqs, threads);
        if (!std::isfinite(loss) || loss > tcfg.divergence_threshold)
            throw DivergenceError(s, loss);
        adamw_step(state.params, grads, state.opt, tcfg);
        state.step = s + 1;
        result.losses.push_back(loss);

        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        log << nlohmann::json{{"step", s}, {"loss", loss}, {"ms", ms}}.dump() << "\n";
        log.flush();

        if (state.step % tcfg.checkpoint_every == 0 || state.step == tcfg.steps)
            save_train_checkpoint(ckpt_path, state, mcfg, tcfg);
    }
    if (tcfg.steps == 0) save_train_checkpoint(ckpt_path, state, mcfg, tcfg);
    return result;
}

template <typename T>
TrainResult train_from_scratch(const ModelConfig& mcfg, const TrainConfig& tcfg,
                               const Dataset& dataset, const std::filesystem::path& out_dir) {
    TrainState<T> state;
    state.params = init_parameters<T>(mcfg, tcfg.seed);
    state.opt = AdamWState<T>::init(mcfg);
    return train(state, mcfg, tcfg, dataset, out_dir);
}

// ---------------------------------------------------------------------------
// Ablation harness: three arms differing only in the two flags.

struct AblationArm {
    std::string name;
    bool clean_latents;
    bool adaptive_position;
};

inline std::vector<AblationArm> ablation_arms() {
    return {{"full", true, true},
            {"wo_clean_latent", false, true},
            {"wo_adaptive_position", true, false}};
}

struct AblationResult {
    nlohmann::json report;
    bool direction_ok = false;
};

// Trains and evaluates the three arms under identical seeds/data/steps and
// checks that the full configuration wins on background MSE and SSIM.
template <typename T>
AblationResult run_ablation(const RunConfig& base_cfg, const Dataset& train_data,
                            const Dataset& eval_data, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<RunConfig> arm_cfgs;
    std::vector<uint64_t> residual_hashes;
    for (const AblationArm& arm : ablation_arms()) {
        RunConfig cfg = base_cfg;
        cfg.train.clean_latents = arm.clean_latents;
        cfg.train.adaptive_position = arm.adaptive_position;
        cfg.out_dir = (out_dir / arm.name).string();
        arm_cfgs.push_back(cfg);
        residual_hashes.push_back(residual_config_fingerprint(cfg));
    }
    for (size_t i = 1; i < residual_hashes.size(); ++i)
        if (residual_hashes[i] != residual_hashes[0])
            throw std::runtime_error("ablation arm config drift detected (residual hash differs)");

    nlohmann::json arms_json;
    std::map<std::string, TaskMetrics> arm_metrics;
    const auto arms = ablation_arms();
    for (size_t i = 0; i < arms.size(); ++i) {
        const RunConfig& cfg = arm_cfgs[i];
        const auto result =
            train_from_scratch<T>(cfg.model, cfg.train, train_data, cfg.out_dir);
        TrainState<T> state = load_train_checkpoint<T>(result.checkpoint_path, cfg.model);
        SampleOptions opts;
        opts.steps = cfg.eval.sample_steps;
        opts.clean_latents = cfg.train.clean_latents;
        opts.layout.adaptive_position = cfg.train.adaptive_position;
        const EvalReport report =
            evaluate(state.params, cfg.model, eval_data, cfg.eval, opts, cfg.train.threads);
        arms_json[arms[i].name] = {{"config", to_json(cfg)}, {"report", to_json(report)}};
        arm_metrics[arms[i].name] = report.per_task.begin()->second;
    }

    const TaskMetrics& full = arm_metrics["full"];
    const TaskMetrics& wo_clean = arm_metrics["wo_clean_latent"];
    const TaskMetrics& wo_adaptive = arm_metrics["wo_adaptive_position"];
    const bool direction_ok = full.background_mse < wo_clean.background_mse &&
                              full.background_mse < wo_adaptive.background_mse &&
                              full.ssim_mean >= wo_clean.ssim_mean &&
                              full.ssim_mean >= wo_adaptive.ssim_mean;

    AblationResult result;
    result.direction_ok = direction_ok;
    result.report = {{"arms", arms_json},
                     {"residual_config_hash", residual_hashes[0]},
                     {"direction_ok", direction_ok}};
    std::ofstream f(out_dir / "ablation_report.json");
    f << result.report.dump(2) << "\n";
    return result;
}

}  // namespace ropecast
