#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ropecast/metrics.hpp"
#include "ropecast/train.hpp"

namespace ropecast {

struct SuiteResult {
    std::string name;
    bool ok = true;
    std::string message;
};

// Compact invariant checks over every module, used by `ropecast selftest`.
// These mirror the unit suites; failures carry the first broken assertion.
namespace selftest_detail {

struct Check {
    bool ok = true;
    std::string message;

    void expect(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            message = what;
        }
    }
};

inline SuiteResult run_suite(const std::string& name,
                             const std::function<void(Check&)>& body) {
    Check c;
    try {
        body(c);
    } catch (const std::exception& e) {
        c.ok = false;
        c.message = std::string("exception: ") + e.what();
    }
    return {name, c.ok, c.message};
}

}  // namespace selftest_detail

inline std::vector<SuiteResult> run_selftests() {
    using selftest_detail::Check;
    using selftest_detail::run_suite;
    std::vector<SuiteResult> results;

    results.push_back(run_suite("rope", [](Check& c) {
        auto cfg = make_rope_config(16);
        auto freqs = make_frequencies<double>(cfg);
        c.expect(freqs.w[0] == 1.0, "omega_0 must be 1");
        Rng rng(1);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> v(16);
            for (auto& x : v) x = rng.next_normal();
            PositionTriple pos{static_cast<int>(rng.next_below(4)),
                               static_cast<int>(rng.next_below(64)),
                               static_cast<int>(rng.next_below(64))};
            auto r = apply_rope(v, pos, cfg, freqs);
            double n0 = 0, n1 = 0;
            for (int i = 0; i < 16; ++i) {
                n0 += v[i] * v[i];
                n1 += r[i] * r[i];
            }
            c.expect(std::abs(std::sqrt(n0) - std::sqrt(n1)) < 1e-10, "norm preservation");
            auto id = apply_rope(v, {0, 0, 0}, cfg, freqs);
            c.expect(id == v, "identity at the origin");
        }
    }));

    results.push_back(run_suite("layout", [](Check& c) {
        Rng rng(2);
        auto grid = [&](int r, int co) {
            LatentGrid<double> g(r, co, 3);
            for (auto& v : g.data) v = rng.next_normal();
            return g;
        };
        std::vector<ConditionSpec<double>> conds{{grid(2, 3), 1, true, ConditionRole::model_image},
                                                 {grid(2, 4), 2, false,
                                                  ConditionRole::garment_image}};
        auto seq = assemble(TaskSpec{TaskKind::tryon, 1}, conds, grid(2, 3));
        for (int i = 0; i < seq.length(); ++i)
            c.expect(seq.loss_mask[i] + seq.clean_mask[i] == 1, "masks partition the sequence");
        auto g = gather_target(seq);
        auto seq2 = scatter_target(seq, g);
        c.expect(seq2.tokens.data == seq.tokens.data, "gather/scatter round trip");
    }));

    results.push_back(run_suite("flow", [](Check& c) {
        Rng rng(3);
        LatentGrid<double> x1(2, 2, 3);
        for (auto& v : x1.data) v = rng.next_normal();
        auto s = make_flow_sample_at(x1, 0.0, rng);
        c.expect(s.z_t.data == x1.data, "path endpoint at t=0");
        std::vector<ConditionSpec<double>> conds{{x1, 1, true, ConditionRole::model_image}};
        LatentGrid<double> captured;
        bool first = true;
        VelocityFn<double> oracle = [&](const TokenSequence<double>& seq, double) {
            auto z = gather_target(seq);
            if (first) {
                captured = z;
                first = false;
            }
            LatentGrid<double> v = captured;
            for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = captured.data[i] - x1.data[i];
            return v;
        };
        auto out = euler_sample(oracle, TaskSpec{TaskKind::tryon, 1}, conds, ShapeRC{2, 2}, 3, 5,
                                11);
        for (size_t i = 0; i < out.data.size(); ++i)
            c.expect(std::abs(out.data[i] - x1.data[i]) < 1e-6, "constant-field exact recovery");
    }));

    results.push_back(run_suite("model", [](Check& c) {
        ModelConfig cfg = make_model_config(16, 2, 1, 2);
        auto freqs = make_frequencies<double>(cfg.rope);
        Parameters<double> p = zero_parameters<double>(cfg);
        randomize_parameters(p, 7, 0.2);
        Rng rng(8);
        std::vector<ConditionSpec<double>> conds{
            {LatentGrid<double>(2, 2, cfg.token_channels()), 1, true,
             ConditionRole::model_image}};
        for (auto& v : conds[0].grid.data) v = rng.next_normal();
        LatentGrid<double> target(2, 2, cfg.token_channels());
        for (auto& v : target.data) v = rng.next_normal();
        auto seq = assemble(TaskSpec{TaskKind::tryon, 1}, conds, target);
        ForwardCache<double> cache;
        forward(p, seq, 0.5, cfg, freqs, cache);
        for (const auto& bc : cache.blocks)
            for (const auto& probs : bc.probs)
                for (int i = 0; i < probs.rows; ++i) {
                    double sum = 0;
                    for (int j = 0; j < probs.cols; ++j) sum += probs.at(i, j);
                    c.expect(std::abs(sum - 1.0) < 1e-6, "softmax rows sum to 1");
                }
        auto out2 = forward(p, seq, 0.5, cfg, freqs);
        c.expect(out2.data == cache.out.data, "deterministic forward");
    }));

    results.push_back(run_suite("synth", [](Check& c) {
        for (uint64_t seed = 0; seed < 16; ++seed) {
            auto t = generate_triple(make_scene_params(mix_seed(31, 0, seed)));
            validate_triple(t);
        }
        auto a = generate_triple(make_scene_params(77));
        auto b = generate_triple(make_scene_params(77));
        c.expect(a.target_image.data == b.target_image.data, "deterministic triples");
    }));

    results.push_back(run_suite("metrics", [](Check& c) {
        auto t = generate_triple(make_scene_params(5));
        c.expect(ssim(t.target_image, t.target_image) == 1.0, "ssim self-similarity");
        c.expect(ssim(t.model_image, t.target_image) ==
                     ssim(t.target_image, t.model_image),
                 "ssim symmetry");
        Mask m(t.params.canvas, t.params.canvas);
        m.at(0, 0) = 1;
        c.expect(region_mse(t.target_image, t.target_image, m) == 0.0, "region mse identity");
        c.expect(classify_pattern(t.target_image, t.params.incoming, t.params.torso_rect) ==
                     t.params.incoming.pattern,
                 "pattern classification on clean render");
    }));

    results.push_back(run_suite("checkpoint", [](Check& c) {
        namespace fs = std::filesystem;
        const fs::path dir = fs::temp_directory_path() / "ropecast_selftest";
        fs::create_directories(dir);
        const fs::path path = dir / "ckpt.rpk";
        ModelConfig cfg = make_model_config(16, 2, 1, 2);
        TrainState<float> state;
        state.params = init_parameters<float>(cfg, 3);
        state.opt = AdamWState<float>::init(cfg);
        state.step = 5;
        state.opt.step = 5;
        save_train_checkpoint(path, state, cfg, TrainConfig{});
        auto loaded = load_train_checkpoint<float>(path, cfg);
        auto as = tensor_list(state.params);
        auto bs = tensor_list(loaded.params);
        for (size_t k = 0; k < as.size(); ++k)
            c.expect(*as[k] == *bs[k], "bit-exact reload");
        fs::remove_all(dir);
    }));

    return results;
}

}  // namespace ropecast
