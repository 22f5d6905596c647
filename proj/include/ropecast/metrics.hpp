#pragma once

#include <atomic>
#include <cmath>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "nlohmann/json.hpp"
#include "ropecast/config.hpp"
#include "ropecast/image.hpp"
#include "ropecast/loss.hpp"
#include "ropecast/synth.hpp"

namespace ropecast {

// Mean squared error over masked pixels (all three channels).
inline double region_mse(const Image& pred, const Image& truth, const Mask& mask) {
    if (!pred.same_shape(truth) || mask.height != pred.height || mask.width != pred.width)
        throw std::invalid_argument("region_mse: shape mismatch");
    long n = 0;
    double acc = 0.0;
    for (int y = 0; y < pred.height; ++y)
        for (int x = 0; x < pred.width; ++x) {
            if (!mask.at(y, x)) continue;
            ++n;
            const float* a = pred.px(y, x);
            const float* b = truth.px(y, x);
            for (int c = 0; c < 3; ++c) {
                const double d = static_cast<double>(a[c]) - static_cast<double>(b[c]);
                acc += d * d;
            }
        }
    if (n == 0) throw std::invalid_argument("region_mse: empty mask");
    return acc / (3.0 * n);
}

// SSIM with a 7x7 uniform window over valid positions (suits 32x32 canvases),
// K1 = 0.01, K2 = 0.03, dynamic range 1. Channels are averaged.
inline double ssim(const Image& pred, const Image& truth, int window = 7) {
    if (!pred.same_shape(truth)) throw std::invalid_argument("ssim: shape mismatch");
    if (pred.height < window || pred.width < window)
        throw std::invalid_argument("ssim: image smaller than window");
    const double c1 = 1e-4;   // (K1 * L)^2
    const double c2 = 9e-4;   // (K2 * L)^2
    const double inv_n = 1.0 / (window * window);
    double total = 0.0;
    long count = 0;
    for (int ch = 0; ch < 3; ++ch)
        for (int y0 = 0; y0 + window <= pred.height; ++y0)
            for (int x0 = 0; x0 + window <= pred.width; ++x0) {
                double mx = 0.0, my = 0.0;
                for (int dy = 0; dy < window; ++dy)
                    for (int dx = 0; dx < window; ++dx) {
                        mx += pred.px(y0 + dy, x0 + dx)[ch];
                        my += truth.px(y0 + dy, x0 + dx)[ch];
                    }
                mx *= inv_n;
                my *= inv_n;
                double vx = 0.0, vy = 0.0, cov = 0.0;
                for (int dy = 0; dy < window; ++dy)
                    for (int dx = 0; dx < window; ++dx) {
                        const double ax = pred.px(y0 + dy, x0 + dx)[ch] - mx;
                        const double ay = truth.px(y0 + dy, x0 + dx)[ch] - my;
                        vx += ax * ax;
                        vy += ay * ay;
                        cov += ax * ay;
                    }
                vx *= inv_n;
                vy *= inv_n;
                cov *= inv_n;
                // Operands of the symmetric sums are ordered canonically so
                // the result is bitwise symmetric in (pred, truth) even when
                // the compiler contracts multiplies and adds.
                const double mlo = std::min(mx, my), mhi = std::max(mx, my);
                const double vlo = std::min(vx, vy), vhi = std::max(vx, vy);
                const double num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                const double den = (mhi * mhi + mlo * mlo + c1) * (vhi + vlo + c2);
                total += num / den;
                ++count;
            }
    return total / count;
}

// Nearest-template pattern classifier: renders the judged rect with each
// pattern kind (same palette) and picks the smallest MSE.
inline PatternKind classify_pattern(const Image& img, const GarmentSpec& garment,
                                    const RectPx& rect) {
    double best = 1e300;
    PatternKind best_kind = PatternKind::solid;
    for (int k = 0; k < kPatternCount; ++k) {
        GarmentSpec candidate = garment;
        candidate.pattern = static_cast<PatternKind>(k);
        double acc = 0.0;
        for (int ry = 0; ry < rect.height; ++ry)
            for (int rx = 0; rx < rect.width; ++rx) {
                const Color c = detail::pattern_color(candidate, ry, rx);
                const float* p = img.px(rect.top + ry, rect.left + rx);
                for (int ch = 0; ch < 3; ++ch) {
                    const double d = p[ch] - c[ch];
                    acc += d * d;
                }
            }
        if (acc < best) {
            best = acc;
            best_kind = static_cast<PatternKind>(k);
        }
    }
    return best_kind;
}

// ---------------------------------------------------------------------------
// Sampling an example end to end (shared by eval, the sample command, and the
// ablation arms).

struct SampleOptions {
    int steps = 20;
    bool clean_latents = true;  // off: conditions re-noised at each step's t
    LayoutOptions layout;
};

template <typename T>
LatentGrid<T> sample_example(const Parameters<T>& params, const ModelConfig& cfg,
                             const RopeFrequencies<T>& freqs, const TaskExample<T>& ex,
                             uint64_t seed, const SampleOptions& opts) {
    VelocityFn<T> velocity = model_velocity(params, cfg, freqs);
    const ShapeRC shape{ex.target.rows, ex.target.cols};
    if (opts.clean_latents)
        return euler_sample(velocity, ex.task, ex.conditions, shape, ex.target.channels,
                            opts.steps, seed, opts.layout);

    // Noised-condition variant (the "w/o clean latent" arm): conditions enter
    // at noise level t each step, with per-condition noise fixed over steps.
    Rng rng(mix_seed(seed, 0x5a3b));
    LatentGrid<T> z(shape.rows, shape.cols, ex.target.channels);
    for (auto& v : z.data) v = static_cast<T>(rng.next_normal());
    std::vector<LatentGrid<T>> cond_eps;
    for (const auto& c : ex.conditions) {
        LatentGrid<T> e(c.grid.rows, c.grid.cols, c.grid.channels);
        for (auto& v : e.data) v = static_cast<T>(rng.next_normal());
        cond_eps.push_back(std::move(e));
    }
    const double dt = 1.0 / opts.steps;
    for (int k = 0; k < opts.steps; ++k) {
        const double t = 1.0 - k * dt;
        std::vector<ConditionSpec<T>> noised = ex.conditions;
        for (size_t i = 0; i < noised.size(); ++i)
            for (size_t j = 0; j < noised[i].grid.data.size(); ++j)
                noised[i].grid.data[j] = static_cast<T>((1.0 - t) * ex.conditions[i].grid.data[j] +
                                                        t * cond_eps[i].data[j]);
        TokenSequence<T> seq = assemble(ex.task, noised, z, opts.layout);
        LatentGrid<T> v = velocity(seq, t);
        for (size_t i = 0; i < z.data.size(); ++i) {
            z.data[i] -= static_cast<T>(dt) * v.data[i];
            if (!std::isfinite(static_cast<double>(z.data[i])))
                throw std::runtime_error("sample_example: non-finite state at step " +
                                         std::to_string(k));
        }
    }
    return z;
}

// ---------------------------------------------------------------------------
// Evaluation report

struct TaskMetrics {
    double background_mse = 0.0;
    double edit_mse = 0.0;
    double ssim_mean = 0.0;
    double pattern_match_rate = 0.0;
    int n = 0;
};

struct EvalReport {
    std::map<std::string, TaskMetrics> per_task;
    uint64_t config_fingerprint = 0;
    uint64_t seed = 0;
};

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per_task;
    for (const auto& [task, m] : r.per_task)
        per_task[task] = {{"background_mse", m.background_mse},
                          {"edit_mse", m.edit_mse},
                          {"ssim_mean", m.ssim_mean},
                          {"pattern_match_rate", m.pattern_match_rate},
                          {"n", m.n}};
    return {{"per_task", per_task},
            {"config_fingerprint", r.config_fingerprint},
            {"seed", r.seed}};
}

// Deterministic held-out evaluation: per-example sampling runs on worker
// threads, metrics are reduced in example order.
template <typename T>
EvalReport evaluate(const Parameters<T>& params, const ModelConfig& cfg, const Dataset& dataset,
                    const EvalConfig& eval_cfg, const SampleOptions& base_opts, int threads = 0) {
    dataset.require_clean();
    if (dataset.records.empty()) throw std::invalid_argument("evaluate: empty dataset");
    auto freqs = make_frequencies<T>(cfg.rope);
    const int n = std::min<int>(eval_cfg.examples, static_cast<int>(dataset.records.size()));
    if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min(threads, n));

    EvalReport report;
    report.seed = eval_cfg.seed;
    {
        const nlohmann::json j = to_json(cfg);
        const std::string s = j.dump();
        report.config_fingerprint = fnv1a64(s.data(), s.size());
    }

    for (TaskKind task : eval_cfg.tasks) {
        struct Row {
            double bg = 0, edit = 0, ss = 0;
            bool match = false;
        };
        std::vector<Row> rows(n);
        std::vector<std::string> errors(n);
        std::atomic<int> next{0};
        auto worker = [&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    const auto ex = make_task_example<T>(dataset.records[i].triple, task,
                                                         cfg.patch_size, cfg.task_token_count);
                    const uint64_t seed =
                        mix_seed(eval_cfg.seed, static_cast<uint64_t>(task), i);
                    auto grid = sample_example(params, cfg, freqs, ex, seed, base_opts);
                    const Image gen = unpatchify(grid, cfg.patch_size);
                    rows[i].bg = region_mse(gen, ex.target_image, ex.edit_region.complement());
                    rows[i].edit = region_mse(gen, ex.target_image, ex.edit_region);
                    rows[i].ss = ssim(gen, ex.target_image);
                    rows[i].match = classify_pattern(gen, ex.judged_garment, ex.judged_rect) ==
                                    ex.judged_garment.pattern;
                } catch (const std::exception& e) {
                    errors[i] = e.what();
                }
            }
        };
        std::vector<std::thread> pool;
        for (int w = 0; w < threads; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        for (int i = 0; i < n; ++i)
            if (!errors[i].empty()) throw std::runtime_error(errors[i]);

        TaskMetrics m;
        m.n = n;
        for (const Row& r : rows) {
            m.background_mse += r.bg;
            m.edit_mse += r.edit;
            m.ssim_mean += r.ss;
            m.pattern_match_rate += r.match ? 1.0 : 0.0;
        }
        m.background_mse /= n;
        m.edit_mse /= n;
        m.ssim_mean /= n;
        m.pattern_match_rate /= n;
        report.per_task[task_name(task)] = m;
    }
    return report;
}

}  // namespace ropecast
