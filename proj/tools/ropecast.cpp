// ropecast: data generation, training, ablation, sampling, evaluation, and
// introspection for the adaptive-position conditional flow model.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nlohmann/json.hpp"
#include "ropecast/config.hpp"
#include "ropecast/metrics.hpp"
#include "ropecast/selftest.hpp"
#include "ropecast/synth.hpp"
#include "ropecast/train.hpp"

namespace fs = std::filesystem;
using namespace ropecast;

namespace {

// One-line machine-parsable failures: "error: <class>: <message>".
struct CliError : std::runtime_error {
    std::string error_class;
    int exit_code;
    CliError(std::string cls, const std::string& msg, int code)
        : std::runtime_error(msg), error_class(std::move(cls)), exit_code(code) {}
};

constexpr int kExitUsage = 2;
constexpr int kExitNotFound = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitIo = 5;
constexpr int kExitInternal = 1;

void write_snapshot(const fs::path& dir, const nlohmann::json& resolved) {
    fs::create_directories(dir);
    std::ofstream f(dir / "resolved_config.json");
    if (!f) throw CliError("io", "cannot write resolved config in " + dir.string(), kExitIo);
    f << resolved.dump(2) << "\n";
}

nlohmann::json load_json_file(const fs::path& path) {
    if (!fs::exists(path))
        throw CliError("config-not-found", "config file not found: " + path.string(),
                       kExitNotFound);
    std::ifstream f(path);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw CliError("config-parse", std::string("config parse: ") + e.what(), kExitUsage);
    }
}

// --set train.steps=100 style overrides, applied to the raw JSON tree.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& sets) {
    for (const std::string& s : sets) {
        const size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw CliError("usage", "--set expects key=value, got: " + s, kExitUsage);
        std::string key = s.substr(0, eq);
        const std::string value = s.substr(eq + 1);
        std::string pointer = "/";
        for (char c : key) pointer += c == '.' ? '/' : std::string(1, c)[0];
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(value);
        } catch (...) {
            parsed = value;  // plain string
        }
        j[nlohmann::json::json_pointer(pointer)] = parsed;
    }
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& sets) {
    nlohmann::json j = load_json_file(path);
    apply_overrides(j, sets);
    try {
        return run_config_from_json(j);
    } catch (const std::exception& e) {
        throw CliError("config-parse", e.what(), kExitUsage);
    }
}

Dataset load_dataset(const std::string& dir) {
    if (dir.empty()) throw CliError("usage", "no data directory configured", kExitUsage);
    if (!fs::exists(fs::path(dir) / "manifest.jsonl"))
        throw CliError("data-not-found", "no manifest.jsonl in " + dir, kExitNotFound);
    Dataset ds = read_manifest(dir);
    if (!ds.errors.empty()) {
        std::string msg = "corrupt dataset files:";
        for (const auto& e : ds.errors) msg += " [" + e + "]";
        throw CliError("data-corrupt", msg, kExitIo);
    }
    return ds;
}

TrainState<float> load_state(const fs::path& ckpt_path, ModelConfig& mcfg_out,
                             TrainConfig& tcfg_out) {
    if (!fs::exists(ckpt_path))
        throw CliError("checkpoint-not-found", "checkpoint not found: " + ckpt_path.string(),
                       kExitNotFound);
    const Checkpoint<float> ckpt = load_checkpoint<float>(ckpt_path);
    mcfg_out = model_config_from_json(ckpt.meta.at("model"));
    tcfg_out = train_config_from_json(ckpt.meta.at("train"));
    return load_train_checkpoint<float>(ckpt_path, mcfg_out);
}

// Conditions mirroring each task's structure at a bare token-grid size,
// for layout inspection without any image data.
std::vector<ConditionSpec<float>> inspect_conditions(TaskKind task, int rows, int cols) {
    auto grid = [&] { return LatentGrid<float>(rows, cols, 1); };
    std::vector<ConditionSpec<float>> conds;
    switch (task) {
        case TaskKind::tryon:
            conds.push_back({grid(), 1, true, ConditionRole::model_image});
            conds.push_back({grid(), 2, false, ConditionRole::garment_image});
            break;
        case TaskKind::model_free_tryon:
        case TaskKind::garment_reconstruction:
            conds.push_back({grid(), 1, false, ConditionRole::garment_image});
            break;
        case TaskKind::tryon_in_layers:
            conds.push_back({grid(), 1, true, ConditionRole::model_image});
            conds.push_back({grid(), 2, false, ConditionRole::garment_image});
            conds.push_back({grid(), 3, false, ConditionRole::garment_image});
            break;
    }
    return conds;
}

void emit_text(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    const fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw CliError("io", "cannot write " + out_path, kExitIo);
    f << text;
}

// Side-by-side sheet: conditions | generated | ground truth.
Image make_sheet(const std::vector<Image>& panels) {
    const int sep = 2;
    int width = 0, height = 0;
    for (const auto& p : panels) {
        width += p.width + sep;
        height = std::max(height, p.height);
    }
    width -= sep;
    Image sheet(height, width);
    sheet.fill({1.f, 1.f, 1.f});
    int x0 = 0;
    for (const auto& p : panels) {
        for (int y = 0; y < p.height; ++y)
            for (int x = 0; x < p.width; ++x)
                for (int c = 0; c < 3; ++c) sheet.px(y, x0 + x)[c] = p.px(y, x)[c];
        x0 += p.width + sep;
    }
    return sheet;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"ropecast: multi-image conditional flow model on a synthetic try-on task"};
    app.require_subcommand(1);

    // ---- data gen ----
    auto* data = app.add_subcommand("data", "dataset commands");
    data->require_subcommand(1);
    auto* gen = data->add_subcommand("gen", "generate a synthetic try-on dataset");
    std::string gen_out;
    int gen_n = 512;
    uint64_t gen_seed = 1;
    int gen_size = 32;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of triples");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--size", gen_size, "canvas size in pixels");
    gen->callback([&] {
        write_manifest(gen_out, gen_n, gen_seed, gen_size);
        write_snapshot(gen_out, {{"command", "data gen"},
                                 {"out", gen_out},
                                 {"n", gen_n},
                                 {"seed", gen_seed},
                                 {"size", gen_size}});
        std::cout << "wrote " << gen_n << " triples to " << gen_out << "\n";
    });

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train from a config file");
    std::string train_config_path, train_out_override;
    std::vector<std::string> train_sets;
    bool train_resume = false;
    train_cmd->add_option("--config", train_config_path, "run config JSON")->required();
    train_cmd->add_option("--set", train_sets, "override config fields (key.path=value)");
    train_cmd->add_option("--out", train_out_override, "override the output directory");
    train_cmd->add_flag("--resume", train_resume, "resume from the checkpoint in the output dir");
    train_cmd->callback([&] {
        RunConfig cfg = load_run_config(train_config_path, train_sets);
        if (!train_out_override.empty()) cfg.out_dir = train_out_override;
        if (cfg.out_dir.empty())
            throw CliError("usage", "config has no out_dir (use --out)", kExitUsage);
        Dataset dataset = load_dataset(cfg.train_data);
        write_snapshot(cfg.out_dir, to_json(cfg));

        TrainState<float> state;
        const fs::path ckpt_path = fs::path(cfg.out_dir) / "checkpoint.rpk";
        if (train_resume && fs::exists(ckpt_path)) {
            state = load_train_checkpoint<float>(ckpt_path, cfg.model);
            std::cout << "resuming from step " << state.step << "\n";
        } else {
            state.params = init_parameters<float>(cfg.model, cfg.train.seed);
            state.opt = AdamWState<float>::init(cfg.model);
        }
        try {
            const TrainResult result = train(state, cfg.model, cfg.train, dataset, cfg.out_dir);
            std::cout << "trained " << result.losses.size() << " steps";
            if (!result.losses.empty()) std::cout << ", final loss " << result.losses.back();
            std::cout << "\ncheckpoint: " << result.checkpoint_path.string() << "\n";
        } catch (const DivergenceError& e) {
            throw CliError("numeric-divergence", e.what(), kExitDivergence);
        }
    });

    // ---- ablate ----
    auto* ablate_cmd = app.add_subcommand("ablate", "train and compare the three ablation arms");
    std::string ablate_config_path, ablate_out_override;
    std::vector<std::string> ablate_sets;
    ablate_cmd->add_option("--config", ablate_config_path, "run config JSON")->required();
    ablate_cmd->add_option("--set", ablate_sets, "override config fields");
    ablate_cmd->add_option("--out", ablate_out_override, "override the output directory");
    ablate_cmd->callback([&] {
        RunConfig cfg = load_run_config(ablate_config_path, ablate_sets);
        if (!ablate_out_override.empty()) cfg.out_dir = ablate_out_override;
        if (cfg.out_dir.empty())
            throw CliError("usage", "config has no out_dir (use --out)", kExitUsage);
        Dataset train_data = load_dataset(cfg.train_data);
        Dataset eval_data = load_dataset(cfg.eval_data);
        write_snapshot(cfg.out_dir, to_json(cfg));
        try {
            const AblationResult result =
                run_ablation<float>(cfg, train_data, eval_data, cfg.out_dir);
            std::cout << "ablation report: "
                      << (fs::path(cfg.out_dir) / "ablation_report.json").string() << "\n"
                      << "direction_ok: " << (result.direction_ok ? "true" : "false") << "\n";
        } catch (const DivergenceError& e) {
            throw CliError("numeric-divergence", e.what(), kExitDivergence);
        }
    });

    // ---- sample ----
    auto* sample_cmd = app.add_subcommand("sample", "generate side-by-side sample sheets");
    std::string sample_ckpt, sample_data, sample_out, sample_task = "tryon";
    int sample_n = 8, sample_steps = 20;
    uint64_t sample_seed = 7;
    sample_cmd->add_option("--ckpt", sample_ckpt, "checkpoint file")->required();
    sample_cmd->add_option("--data", sample_data, "dataset directory")->required();
    sample_cmd->add_option("--out", sample_out, "output directory")->required();
    sample_cmd->add_option("--task", sample_task, "task to sample");
    sample_cmd->add_option("--n", sample_n, "number of examples");
    sample_cmd->add_option("--steps", sample_steps, "sampler steps");
    sample_cmd->add_option("--seed", sample_seed, "sampler seed");
    sample_cmd->callback([&] {
        ModelConfig mcfg;
        TrainConfig tcfg;
        TrainState<float> state = load_state(sample_ckpt, mcfg, tcfg);
        Dataset dataset = load_dataset(sample_data);
        const TaskKind task = task_from_name(sample_task);
        write_snapshot(sample_out, {{"command", "sample"},
                                    {"ckpt", sample_ckpt},
                                    {"data", sample_data},
                                    {"out", sample_out},
                                    {"task", sample_task},
                                    {"n", sample_n},
                                    {"steps", sample_steps},
                                    {"seed", sample_seed}});
        const auto freqs = make_frequencies<float>(mcfg.rope);
        SampleOptions opts;
        opts.steps = sample_steps;
        opts.clean_latents = tcfg.clean_latents;
        opts.layout.adaptive_position = tcfg.adaptive_position;
        const int n = std::min<int>(sample_n, static_cast<int>(dataset.records.size()));
        for (int i = 0; i < n; ++i) {
            const auto ex = make_task_example<float>(dataset.records[i].triple, task,
                                                     mcfg.patch_size, mcfg.task_token_count);
            auto grid = sample_example(state.params, mcfg, freqs, ex,
                                       mix_seed(sample_seed, static_cast<uint64_t>(task), i),
                                       opts);
            std::vector<Image> panels = ex.condition_images;
            panels.push_back(unpatchify(grid, mcfg.patch_size));
            panels.push_back(ex.target_image);
            char name[32];
            std::snprintf(name, sizeof(name), "sample_%03d.ppm", i);
            write_ppm(fs::path(sample_out) / name, make_sheet(panels));
        }
        std::cout << "wrote " << n << " sheets to " << sample_out << "\n";
    });

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
    std::string eval_ckpt, eval_data_dir, eval_out;
    std::vector<std::string> eval_tasks{"tryon"};
    int eval_examples = 64, eval_steps = 20;
    uint64_t eval_seed = 7;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data_dir, "dataset directory")->required();
    eval_cmd->add_option("--out", eval_out, "report JSON path")->required();
    eval_cmd->add_option("--tasks", eval_tasks, "tasks to evaluate");
    eval_cmd->add_option("--examples", eval_examples, "examples per task");
    eval_cmd->add_option("--steps", eval_steps, "sampler steps");
    eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
    eval_cmd->callback([&] {
        ModelConfig mcfg;
        TrainConfig tcfg;
        TrainState<float> state = load_state(eval_ckpt, mcfg, tcfg);
        Dataset dataset = load_dataset(eval_data_dir);
        EvalConfig ecfg;
        ecfg.examples = eval_examples;
        ecfg.sample_steps = eval_steps;
        ecfg.seed = eval_seed;
        ecfg.tasks.clear();
        for (const auto& t : eval_tasks) ecfg.tasks.push_back(task_from_name(t));
        SampleOptions opts;
        opts.steps = eval_steps;
        opts.clean_latents = tcfg.clean_latents;
        opts.layout.adaptive_position = tcfg.adaptive_position;
        const EvalReport report = evaluate(state.params, mcfg, dataset, ecfg, opts, tcfg.threads);
        const fs::path out_path(eval_out);
        if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
        std::ofstream f(out_path);
        if (!f) throw CliError("io", "cannot write " + eval_out, kExitIo);
        f << to_json(report).dump(2) << "\n";
        write_snapshot(out_path.has_parent_path() ? out_path.parent_path() : fs::path("."),
                       {{"command", "eval"},
                        {"ckpt", eval_ckpt},
                        {"data", eval_data_dir},
                        {"out", eval_out},
                        {"tasks", eval_tasks},
                        {"examples", eval_examples},
                        {"steps", eval_steps},
                        {"seed", eval_seed}});
        std::cout << to_json(report).dump(2) << "\n";
    });

    // ---- inspect-rope ----
    auto* rope_cmd = app.add_subcommand("inspect-rope", "dump rotary frequencies and rotations");
    int rope_dim = 4;
    double rope_theta = 10000.0;
    int rope_positions = 0;
    std::string rope_out;
    rope_cmd->add_option("--dim", rope_dim, "axis channel count (even)");
    rope_cmd->add_option("--theta", rope_theta, "frequency base");
    rope_cmd->add_option("--positions", rope_positions, "also dump a rotation table for p < N");
    rope_cmd->add_option("--out", rope_out, "write to a file instead of stdout");
    rope_cmd->callback([&] {
        std::vector<double> freqs;
        try {
            freqs = axis_frequencies<double>(rope_dim, rope_theta);
        } catch (const std::exception& e) {
            throw CliError("usage", e.what(), kExitUsage);
        }
        std::ostringstream os;
        os << "omega = [";
        for (size_t i = 0; i < freqs.size(); ++i) os << (i ? ", " : "") << freqs[i];
        os << "]\n";
        if (rope_positions > 0) {
            os << "pos m omega angle cos sin\n";
            for (int p = 0; p < rope_positions; ++p)
                for (size_t m = 0; m < freqs.size(); ++m) {
                    const double a = p * freqs[m];
                    os << p << ' ' << m << ' ' << freqs[m] << ' ' << a << ' ' << std::cos(a)
                       << ' ' << std::sin(a) << '\n';
                }
        }
        emit_text(os.str(), rope_out);
    });

    // ---- inspect-layout ----
    auto* layout_cmd =
        app.add_subcommand("inspect-layout", "dump the (index, segment, w, y, x) position table");
    std::string layout_task = "tryon", layout_size = "4x4", layout_out;
    int layout_task_tokens = 1;
    bool layout_non_adaptive = false;
    layout_cmd->add_option("--task", layout_task, "task whose condition structure to use");
    layout_cmd->add_option("--size", layout_size, "token grid size as RxC");
    layout_cmd->add_option("--task-tokens", layout_task_tokens, "task token count");
    layout_cmd->add_flag("--non-adaptive", layout_non_adaptive,
                         "use the ablated layout (no ID channel, no alignment)");
    layout_cmd->add_option("--out", layout_out, "write to a file instead of stdout");
    layout_cmd->callback([&] {
        int rows = 0, cols = 0;
        if (std::sscanf(layout_size.c_str(), "%dx%d", &rows, &cols) != 2 || rows < 1 || cols < 1)
            throw CliError("usage", "--size expects RxC, got: " + layout_size, kExitUsage);
        const TaskKind task = task_from_name(layout_task);
        const auto conds = inspect_conditions(task, rows, cols);
        LayoutOptions opts;
        opts.adaptive_position = !layout_non_adaptive;
        const auto seq = assemble(TaskSpec{task, layout_task_tokens}, conds,
                                  LatentGrid<float>(rows, cols, 1), opts);
        emit_text(render_layout_table(seq), layout_out);
    });

    // ---- selftest ----
    auto* selftest_cmd = app.add_subcommand("selftest", "run the module invariant suites");
    selftest_cmd->callback([&] {
        const auto results = run_selftests();
        bool all_ok = true;
        for (const auto& r : results) {
            std::cout << r.name << ": " << (r.ok ? "PASS" : "FAIL");
            if (!r.ok) std::cout << " (" << r.message << ")";
            std::cout << "\n";
            all_ok &= r.ok;
        }
        if (!all_ok) throw CliError("selftest-failed", "one or more suites failed", kExitInternal);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return kExitUsage;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const CliError& e) {
        std::cerr << "error: " << e.error_class << ": " << e.what() << "\n";
        return e.exit_code;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: invalid-argument: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return kExitInternal;
    }
}
