#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "ropecast/flow.hpp"
#include "ropecast/model.hpp"
#include "ropecast/rng.hpp"

namespace ropecast {

struct TrainConfig {
    long steps = 2000;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    std::array<double, 4> task_mixture{1.0, 0.0, 0.0, 0.0};  // indexed by TaskKind
    bool clean_latents = true;       // off: noise conditions and supervise them
    bool adaptive_position = true;   // off: no ID channel, no pixel alignment
    uint64_t seed = 1234;
    long checkpoint_every = 500;
    int threads = 0;                 // 0 = hardware concurrency
    TimeDistribution time_dist = TimeDistribution::uniform;
    double divergence_threshold = 1e4;
    bool resample_rows = false;      // nearest-row resampling of mismatched conditions
};

struct EvalConfig {
    int examples = 64;      // evaluated per task (capped by the dataset size)
    int sample_steps = 20;
    uint64_t seed = 7;
    std::vector<TaskKind> tasks{TaskKind::tryon};
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    std::string train_data;
    std::string eval_data;
    std::string out_dir;
};

// ---------------------------------------------------------------------------
// JSON round-trip with strict key checking so config typos fail loudly.

namespace cfgjson {

inline void expect_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                        const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument("config field '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed) ok |= it.key() == k;
        if (!ok)
            throw std::invalid_argument("config field '" + where + "." + it.key() +
                                        "' is not recognized");
    }
}

template <typename T>
void get_if_present(const nlohmann::json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace cfgjson

inline nlohmann::json to_json(const RopeConfig& c) {
    return {{"head_dim", c.head_dim},
            {"axis_split", {c.d_w, c.d_y, c.d_x}},
            {"theta_base", c.theta_base}};
}

inline RopeConfig rope_config_from_json(const nlohmann::json& j, int default_head_dim) {
    cfgjson::expect_keys(j, {"head_dim", "axis_split", "theta_base"}, "model.rope");
    int head_dim = default_head_dim;
    cfgjson::get_if_present(j, "head_dim", head_dim);
    RopeConfig c = make_rope_config(head_dim);
    cfgjson::get_if_present(j, "theta_base", c.theta_base);
    if (j.contains("axis_split")) {
        auto v = j.at("axis_split").get<std::vector<int>>();
        if (v.size() != 3)
            throw std::invalid_argument("config field 'model.rope.axis_split' needs 3 entries");
        c.d_w = v[0];
        c.d_y = v[1];
        c.d_x = v[2];
    }
    validate_rope_config(c);
    return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"depth", c.depth},
            {"mlp_ratio", c.mlp_ratio},
            {"patch_size", c.patch_size},
            {"in_channels", c.in_channels},
            {"task_vocab_size", c.task_vocab_size},
            {"task_token_count", c.task_token_count},
            {"parallel_blocks", c.parallel_blocks},
            {"rope", to_json(c.rope)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    cfgjson::expect_keys(j,
                         {"d_model", "n_heads", "depth", "mlp_ratio", "patch_size", "in_channels",
                          "task_vocab_size", "task_token_count", "parallel_blocks", "rope"},
                         "model");
    ModelConfig c;
    cfgjson::get_if_present(j, "d_model", c.d_model);
    cfgjson::get_if_present(j, "n_heads", c.n_heads);
    cfgjson::get_if_present(j, "depth", c.depth);
    cfgjson::get_if_present(j, "mlp_ratio", c.mlp_ratio);
    cfgjson::get_if_present(j, "patch_size", c.patch_size);
    cfgjson::get_if_present(j, "in_channels", c.in_channels);
    cfgjson::get_if_present(j, "task_vocab_size", c.task_vocab_size);
    cfgjson::get_if_present(j, "task_token_count", c.task_token_count);
    cfgjson::get_if_present(j, "parallel_blocks", c.parallel_blocks);
    if (c.d_model <= 0 || c.n_heads <= 0 || c.d_model % c.n_heads != 0)
        throw std::invalid_argument("config field 'model.d_model' must be divisible by n_heads");
    c.rope = j.contains("rope") ? rope_config_from_json(j.at("rope"), c.head_dim())
                                : make_rope_config(c.head_dim());
    validate_model_config(c);
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"weight_decay", c.weight_decay},
            {"task_mixture", c.task_mixture},
            {"clean_latents", c.clean_latents},
            {"adaptive_position", c.adaptive_position},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"threads", c.threads},
            {"time_dist", c.time_dist == TimeDistribution::uniform ? "uniform" : "logit_normal"},
            {"divergence_threshold", c.divergence_threshold},
            {"resample_rows", c.resample_rows}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    cfgjson::expect_keys(j,
                         {"steps", "batch_size", "learning_rate", "beta1", "beta2", "adam_eps",
                          "weight_decay", "task_mixture", "clean_latents", "adaptive_position",
                          "seed", "checkpoint_every", "threads", "time_dist",
                          "divergence_threshold", "resample_rows"},
                         "train");
    TrainConfig c;
    cfgjson::get_if_present(j, "steps", c.steps);
    cfgjson::get_if_present(j, "batch_size", c.batch_size);
    cfgjson::get_if_present(j, "learning_rate", c.learning_rate);
    cfgjson::get_if_present(j, "beta1", c.beta1);
    cfgjson::get_if_present(j, "beta2", c.beta2);
    cfgjson::get_if_present(j, "adam_eps", c.adam_eps);
    cfgjson::get_if_present(j, "weight_decay", c.weight_decay);
    cfgjson::get_if_present(j, "task_mixture", c.task_mixture);
    cfgjson::get_if_present(j, "clean_latents", c.clean_latents);
    cfgjson::get_if_present(j, "adaptive_position", c.adaptive_position);
    cfgjson::get_if_present(j, "seed", c.seed);
    cfgjson::get_if_present(j, "checkpoint_every", c.checkpoint_every);
    cfgjson::get_if_present(j, "threads", c.threads);
    if (j.contains("time_dist")) {
        const std::string s = j.at("time_dist").get<std::string>();
        if (s == "uniform")
            c.time_dist = TimeDistribution::uniform;
        else if (s == "logit_normal")
            c.time_dist = TimeDistribution::logit_normal;
        else
            throw std::invalid_argument("config field 'train.time_dist' must be uniform or "
                                        "logit_normal");
    }
    cfgjson::get_if_present(j, "divergence_threshold", c.divergence_threshold);
    cfgjson::get_if_present(j, "resample_rows", c.resample_rows);
    if (c.steps < 0 || c.batch_size < 1 || c.learning_rate < 0 || c.checkpoint_every < 1)
        throw std::invalid_argument("config field 'train' has non-positive numerics");
    double mix_sum = 0;
    for (double w : c.task_mixture) {
        if (w < 0) throw std::invalid_argument("config field 'train.task_mixture' must be >= 0");
        mix_sum += w;
    }
    if (std::abs(mix_sum - 1.0) > 1e-9)
        throw std::invalid_argument("config field 'train.task_mixture' must sum to 1");
    return c;
}

inline nlohmann::json to_json(const EvalConfig& c) {
    std::vector<std::string> tasks;
    for (TaskKind t : c.tasks) tasks.push_back(task_name(t));
    return {{"examples", c.examples},
            {"sample_steps", c.sample_steps},
            {"seed", c.seed},
            {"tasks", tasks}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j) {
    cfgjson::expect_keys(j, {"examples", "sample_steps", "seed", "tasks"}, "eval");
    EvalConfig c;
    cfgjson::get_if_present(j, "examples", c.examples);
    cfgjson::get_if_present(j, "sample_steps", c.sample_steps);
    cfgjson::get_if_present(j, "seed", c.seed);
    if (j.contains("tasks")) {
        c.tasks.clear();
        for (const auto& t : j.at("tasks")) c.tasks.push_back(task_from_name(t.get<std::string>()));
    }
    if (c.examples < 1 || c.sample_steps < 1)
        throw std::invalid_argument("config field 'eval' has non-positive numerics");
    return c;
}

constexpr int kConfigSchemaVersion = 1;

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"schema_version", kConfigSchemaVersion},
            {"model", to_json(c.model)},
            {"train", to_json(c.train)},
            {"eval", to_json(c.eval)},
            {"train_data", c.train_data},
            {"eval_data", c.eval_data},
            {"out_dir", c.out_dir}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    cfgjson::expect_keys(
        j, {"schema_version", "model", "train", "eval", "train_data", "eval_data", "out_dir"},
        "config");
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kConfigSchemaVersion)
        throw std::invalid_argument("unsupported config schema_version");
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    else c.model = make_model_config();
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("eval")) c.eval = eval_config_from_json(j.at("eval"));
    cfgjson::get_if_present(j, "train_data", c.train_data);
    cfgjson::get_if_present(j, "eval_data", c.eval_data);
    cfgjson::get_if_present(j, "out_dir", c.out_dir);
    return c;
}

// Fingerprint of the training setup with the two ablation flags removed; the
// three ablation arms must agree on this hash.
inline uint64_t residual_config_fingerprint(const RunConfig& c) {
    nlohmann::json j = to_json(c);
    j["train"].erase("clean_latents");
    j["train"].erase("adaptive_position");
    j.erase("out_dir");
    const std::string s = j.dump();
    return fnv1a64(s.data(), s.size());
}

}  // namespace ropecast
