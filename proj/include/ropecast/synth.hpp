#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "ropecast/image.hpp"
#include "ropecast/layout.hpp"
#include "ropecast/rng.hpp"

namespace ropecast {

enum class PatternKind : int { solid = 0, stripes = 1, checker = 2 };
constexpr int kPatternCount = 3;

inline const char* pattern_name(PatternKind p) {
    switch (p) {
        case PatternKind::solid: return "solid";
        case PatternKind::stripes: return "stripes";
        case PatternKind::checker: return "checker";
    }
    return "?";
}

struct GarmentSpec {
    PatternKind pattern = PatternKind::solid;
    Color primary{0.f, 0.f, 0.f};
    Color secondary{1.f, 1.f, 1.f};
};

struct RectPx {
    int left = 0, top = 0, width = 0, height = 0;

    int right() const { return left + width; }
    int bottom() const { return top + height; }
    bool inside(int h, int w) const {
        return left >= 0 && top >= 0 && right() <= w && bottom() <= h && width > 0 && height > 0;
    }
    bool contains(int y, int x) const {
        return y >= top && y < bottom() && x >= left && x < right();
    }
};

// Scene recipe: a flat-colour figure on a plain background, a worn garment
// pattern on the torso, and incoming garments to try on. Everything derives
// deterministically from the integer seed (SplitMix64 streams).
struct SceneParams {
    uint64_t seed = 0;
    int canvas = 32;  // square H = W
    Color background{0.9f, 0.9f, 0.9f};
    Color body{0.4f, 0.3f, 0.25f};
    RectPx body_rect;
    RectPx head_rect;
    RectPx torso_rect;   // garment placement on the figure
    RectPx layer_rect;   // overlay placement for the layered task
    GarmentSpec worn;    // garment A, on the figure in the model image
    GarmentSpec incoming;  // garment B, the one being tried on
    GarmentSpec overlay;   // garment C, layered over B
};

namespace detail {

inline float chebyshev(const Color& a, const Color& b) {
    float d = 0.f;
    for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(a[c] - b[c]));
    return d;
}

inline Color random_color(Rng& rng, float lo, float hi) {
    Color c;
    for (int i = 0; i < 3; ++i)
        c[i] = quantize_channel(lo + static_cast<float>(rng.next_uniform()) * (hi - lo));
    return quantize(c);
}

// Draws a colour at Chebyshev distance >= 0.2 from everything in `avoid`.
inline Color distinct_color(Rng& rng, const std::vector<Color>& avoid, float lo = 0.f,
                            float hi = 1.f) {
    for (int attempt = 0; attempt < 256; ++attempt) {
        Color c = random_color(rng, lo, hi);
        bool ok = true;
        for (const auto& a : avoid) ok &= chebyshev(c, a) >= 0.2f;
        if (ok) return c;
    }
    throw std::runtime_error("distinct_color: could not satisfy separation constraint");
}

inline GarmentSpec random_garment(Rng& rng, const std::vector<Color>& avoid) {
    GarmentSpec g;
    g.pattern = static_cast<PatternKind>(rng.next_below(kPatternCount));
    g.primary = distinct_color(rng, avoid);
    std::vector<Color> avoid2 = avoid;
    avoid2.push_back(g.primary);
    g.secondary = distinct_color(rng, avoid2);
    return g;
}

inline Color pattern_color(const GarmentSpec& g, int ry, int rx) {
    switch (g.pattern) {
        case PatternKind::solid: return g.primary;
        case PatternKind::stripes: return (ry / 2) % 2 == 0 ? g.primary : g.secondary;
        case PatternKind::checker:
            return ((ry / 2) + (rx / 2)) % 2 == 0 ? g.primary : g.secondary;
    }
    return g.primary;
}

inline void fill_rect(Image& img, const RectPx& r, const Color& c) {
    for (int y = r.top; y < r.bottom(); ++y)
        for (int x = r.left; x < r.right(); ++x) {
            float* p = img.px(y, x);
            p[0] = c[0];
            p[1] = c[1];
            p[2] = c[2];
        }
}

// Pattern coordinates are relative to the rect origin, so moving the rect
// translates the pattern without changing it.
inline void fill_pattern(Image& img, const RectPx& r, const GarmentSpec& g) {
    for (int y = r.top; y < r.bottom(); ++y)
        for (int x = r.left; x < r.right(); ++x) {
            const Color c = pattern_color(g, y - r.top, x - r.left);
            float* p = img.px(y, x);
            p[0] = c[0];
            p[1] = c[1];
            p[2] = c[2];
        }
}

}  // namespace detail

inline SceneParams make_scene_params(uint64_t seed, int canvas = 32) {
    if (canvas < 16 || canvas % 8 != 0)
        throw std::invalid_argument("make_scene_params: canvas must be >= 16 and divisible by 8");
    Rng rng(mix_seed(seed, 0x5ce9e));
    SceneParams p;
    p.seed = seed;
    p.canvas = canvas;
    const int s = canvas;

    p.background = detail::random_color(rng, 0.7f, 1.0f);
    p.body = detail::distinct_color(rng, {p.background}, 0.15f, 0.6f);

    const int jitter_left = 2 * (static_cast<int>(rng.next_below(3)) - 1);
    const int jitter_top = 2 * static_cast<int>(rng.next_below(2));
    p.body_rect = {s / 4 + jitter_left, s / 8, s / 2, 3 * s / 4};
    p.head_rect = {p.body_rect.left + p.body_rect.width / 2 - s / 16, 0, s / 8, s / 8};
    p.torso_rect = {p.body_rect.left + 2, p.body_rect.top + s / 8 + jitter_top,
                    p.body_rect.width - 4, s / 2 - 4};
    p.layer_rect = {p.torso_rect.left, p.torso_rect.top, p.torso_rect.width,
                    p.torso_rect.height / 2};

    const std::vector<Color> scene_colors{p.background, p.body};
    p.worn = detail::random_garment(rng, scene_colors);
    p.incoming = detail::random_garment(rng, scene_colors);
    p.overlay = detail::random_garment(rng, scene_colors);
    return p;
}

inline void validate_scene(const SceneParams& p) {
    auto bad = [](const char* m) { throw std::invalid_argument(std::string("scene: ") + m); };
    if (p.canvas < 16) bad("canvas too small");
    for (const RectPx* r : {&p.body_rect, &p.head_rect, &p.torso_rect, &p.layer_rect})
        if (!r->inside(p.canvas, p.canvas)) bad("rectangle outside canvas");
    if (!p.body_rect.contains(p.torso_rect.top, p.torso_rect.left) ||
        !p.body_rect.contains(p.torso_rect.bottom() - 1, p.torso_rect.right() - 1))
        bad("torso rectangle not inside body");
    if (detail::chebyshev(p.incoming.primary, p.incoming.secondary) < 0.2f)
        bad("garment palette colours not distinguishable");
}

// Figure wearing `g` on the torso; `overlay_g` optionally layered on top.
inline Image render_figure(const SceneParams& p, const GarmentSpec& g,
                           const GarmentSpec* overlay_g = nullptr) {
    Image img(p.canvas, p.canvas);
    img.fill(p.background);
    detail::fill_rect(img, p.head_rect, p.body);
    detail::fill_rect(img, p.body_rect, p.body);
    detail::fill_pattern(img, p.torso_rect, g);
    if (overlay_g) detail::fill_pattern(img, p.layer_rect, *overlay_g);
    return img;
}

// Garment rendered flat on white, centred, at the given rect size.
inline Image render_garment_flat(const SceneParams& p, const GarmentSpec& g, int w, int h) {
    Image img(p.canvas, p.canvas);
    img.fill({1.f, 1.f, 1.f});
    RectPx r{(p.canvas - w) / 2, (p.canvas - h) / 2, w, h};
    detail::fill_pattern(img, r, g);
    return img;
}

inline RectPx flat_garment_rect(const SceneParams& p, int w, int h) {
    return {(p.canvas - w) / 2, (p.canvas - h) / 2, w, h};
}

// The model-free task targets this fixed canonical figure, so its output is
// deterministic given the garment.
inline SceneParams canonical_scene(const SceneParams& p) {
    SceneParams c = p;
    const int s = p.canvas;
    c.background = quantize({0.85f, 0.85f, 0.85f});
    c.body = quantize({0.45f, 0.32f, 0.26f});
    c.body_rect = {s / 4, s / 8, s / 2, 3 * s / 4};
    c.head_rect = {s / 2 - s / 16, 0, s / 8, s / 8};
    c.torso_rect = {s / 4 + 2, s / 8 + s / 8, s / 2 - 4, s / 2 - 4};
    c.layer_rect = {c.torso_rect.left, c.torso_rect.top, c.torso_rect.width,
                    c.torso_rect.height / 2};
    return c;
}

struct Triple {
    Image model_image;    // figure wearing garment A
    Image garment_image;  // garment B flat on white
    Image target_image;   // same figure wearing garment B
    Mask edit_region;     // torso rectangle
    SceneParams params;
};

inline Triple generate_triple(const SceneParams& params) {
    validate_scene(params);
    Triple t;
    t.params = params;
    t.model_image = render_figure(params, params.worn);
    t.garment_image = render_garment_flat(params, params.incoming, params.torso_rect.width,
                                          params.torso_rect.height);
    t.target_image = render_figure(params, params.incoming);
    t.edit_region = Mask(params.canvas, params.canvas);
    for (int y = params.torso_rect.top; y < params.torso_rect.bottom(); ++y)
        for (int x = params.torso_rect.left; x < params.torso_rect.right(); ++x)
            t.edit_region.at(y, x) = 1;
    return t;
}

// Construction-time invariants; used by generator self-checks.
inline void validate_triple(const Triple& t) {
    const auto& p = t.params;
    for (int y = 0; y < p.canvas; ++y)
        for (int x = 0; x < p.canvas; ++x) {
            if (!t.edit_region.at(y, x)) {
                for (int c = 0; c < 3; ++c)
                    if (t.target_image.px(y, x)[c] != t.model_image.px(y, x)[c])
                        throw std::runtime_error("triple: target differs outside edit region");
            }
        }
    const RectPx flat = flat_garment_rect(p, p.torso_rect.width, p.torso_rect.height);
    for (int ry = 0; ry < p.torso_rect.height; ++ry)
        for (int rx = 0; rx < p.torso_rect.width; ++rx) {
            const float* a = t.target_image.px(p.torso_rect.top + ry, p.torso_rect.left + rx);
            const float* b = t.garment_image.px(flat.top + ry, flat.left + rx);
            for (int c = 0; c < 3; ++c)
                if (a[c] != b[c])
                    throw std::runtime_error("triple: flat garment is not a pure translation of "
                                             "the worn pattern");
        }
}

// ---------------------------------------------------------------------------
// Task examples

template <typename T>
struct TaskExample {
    TaskSpec task;
    std::vector<ConditionSpec<T>> conditions;
    LatentGrid<T> target;      // ground-truth latent grid
    Image target_image;        // ground-truth raster
    Mask edit_region;          // edited area in the ground-truth raster
    std::vector<Image> condition_images;
    GarmentSpec judged_garment;  // garment whose pattern the output must show
    RectPx judged_rect;          // where that pattern lives in the output
};

// Which conditions are pixel-aligned per task: the model image for tryon and
// layered tryon; nothing for reconstruction and model-free generation.
template <typename T>
TaskExample<T> make_task_example(const Triple& triple, TaskKind task, int patch_size,
                                 int task_token_count = 1) {
    const SceneParams& p = triple.params;
    TaskExample<T> ex;
    ex.task = TaskSpec{task, task_token_count};

    auto add_condition = [&](const Image& img, bool aligned, ConditionRole role) {
        ConditionSpec<T> c;
        c.grid = patchify<T>(img, patch_size);
        c.condition_id = static_cast<int>(ex.conditions.size()) + 1;
        c.pixel_aligned = aligned;
        c.role = role;
        ex.conditions.push_back(std::move(c));
        ex.condition_images.push_back(img);
    };

    switch (task) {
        case TaskKind::tryon: {
            add_condition(triple.model_image, true, ConditionRole::model_image);
            add_condition(triple.garment_image, false, ConditionRole::garment_image);
            ex.target_image = triple.target_image;
            ex.edit_region = triple.edit_region;
            ex.judged_garment = p.incoming;
            ex.judged_rect = p.torso_rect;
            break;
        }
        case TaskKind::garment_reconstruction: {
            add_condition(triple.target_image, false, ConditionRole::model_image);
            ex.target_image = triple.garment_image;
            const RectPx flat = flat_garment_rect(p, p.torso_rect.width, p.torso_rect.height);
            ex.edit_region = Mask(p.canvas, p.canvas);
            for (int y = flat.top; y < flat.bottom(); ++y)
                for (int x = flat.left; x < flat.right(); ++x) ex.edit_region.at(y, x) = 1;
            ex.judged_garment = p.incoming;
            ex.judged_rect = flat;
            break;
        }
        case TaskKind::model_free_tryon: {
            add_condition(triple.garment_image, false, ConditionRole::garment_image);
            const SceneParams canon = canonical_scene(p);
            ex.target_image = render_figure(canon, p.incoming);
            ex.edit_region = Mask(p.canvas, p.canvas);
            for (int y = canon.torso_rect.top; y < canon.torso_rect.bottom(); ++y)
                for (int x = canon.torso_rect.left; x < canon.torso_rect.right(); ++x)
                    ex.edit_region.at(y, x) = 1;
            ex.judged_garment = p.incoming;
            ex.judged_rect = canon.torso_rect;
            break;
        }
        case TaskKind::tryon_in_layers: {
            add_condition(triple.model_image, true, ConditionRole::model_image);
            add_condition(triple.garment_image, false, ConditionRole::garment_image);
            add_condition(render_garment_flat(p, p.overlay, p.layer_rect.width,
                                              p.layer_rect.height),
                          false, ConditionRole::garment_image);
            ex.target_image = render_figure(p, p.incoming, &p.overlay);
            ex.edit_region = triple.edit_region;
            ex.judged_garment = p.overlay;
            ex.judged_rect = p.layer_rect;
            break;
        }
    }
    ex.target = patchify<T>(ex.target_image, patch_size);
    return ex;
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSONL index + PPM/PGM rasters)

struct DatasetRecord {
    int index = 0;
    uint64_t seed = 0;
    int canvas = 32;
    Triple triple;
};

struct Dataset {
    std::filesystem::path dir;
    std::vector<DatasetRecord> records;
    std::vector<std::string> errors;  // itemized corrupt-file report

    void require_clean() const {
        if (errors.empty()) return;
        std::string msg = "dataset has corrupt files:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw std::runtime_error(msg);
    }
    size_t size() const { return records.size(); }
};

namespace detail {

inline std::string record_stem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

}  // namespace detail

inline void write_manifest(const std::filesystem::path& dir, int n, uint64_t seed,
                           int canvas = 32) {
    std::filesystem::create_directories(dir);
    std::string manifest;
    for (int i = 0; i < n; ++i) {
        const uint64_t record_seed = mix_seed(seed, 0xda7a, static_cast<uint64_t>(i));
        const Triple t = generate_triple(make_scene_params(record_seed, canvas));
        const std::string stem = detail::record_stem(i);
        write_ppm(dir / (stem + "_model.ppm"), t.model_image);
        write_ppm(dir / (stem + "_garment.ppm"), t.garment_image);
        write_ppm(dir / (stem + "_target.ppm"), t.target_image);
        write_pgm(dir / (stem + "_mask.pgm"), t.edit_region);
        nlohmann::json line{{"index", i},
                            {"seed", record_seed},
                            {"canvas", canvas},
                            {"model", stem + "_model.ppm"},
                            {"garment", stem + "_garment.ppm"},
                            {"target", stem + "_target.ppm"},
                            {"mask", stem + "_mask.pgm"},
                            {"tasks", {"tryon", "model_free_tryon", "garment_reconstruction",
                                       "tryon_in_layers"}}};
        manifest += line.dump() + "\n";
    }
    detail::write_file_atomic(dir / "manifest.jsonl", manifest);
}

inline Dataset read_manifest(const std::filesystem::path& dir) {
    Dataset ds;
    ds.dir = dir;
    std::ifstream f(dir / "manifest.jsonl");
    if (!f) throw std::runtime_error("manifest not found in " + dir.string());
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            ds.errors.push_back("manifest line " + std::to_string(lineno) + ": " + e.what());
            continue;
        }
        DatasetRecord rec;
        rec.index = j.at("index").get<int>();
        rec.seed = j.at("seed").get<uint64_t>();
        rec.canvas = j.at("canvas").get<int>();
        rec.triple.params = make_scene_params(rec.seed, rec.canvas);
        bool ok = true;
        auto load_image = [&](const char* key, Image& into) {
            const std::string name = j.at(key).get<std::string>();
            try {
                into = read_ppm(dir / name);
                if (into.height != rec.canvas || into.width != rec.canvas)
                    throw std::runtime_error("unexpected dimensions");
            } catch (const std::exception& e) {
                ds.errors.push_back(name + ": " + e.what());
                ok = false;
            }
        };
        load_image("model", rec.triple.model_image);
        load_image("garment", rec.triple.garment_image);
        load_image("target", rec.triple.target_image);
        try {
            rec.triple.edit_region = read_pgm(dir / j.at("mask").get<std::string>());
        } catch (const std::exception& e) {
            ds.errors.push_back(j.at("mask").get<std::string>() + ": " + e.what());
            ok = false;
        }
        if (ok) ds.records.push_back(std::move(rec));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Task mixture scheduling

// Deterministic largest-remainder schedule: over any prefix, each task's count
// stays within one example of its exact share.
struct TaskMixture {
    std::array<double, 4> weights{1.0, 0.0, 0.0, 0.0};

    static TaskMixture single(TaskKind t) {
        TaskMixture m;
        m.weights = {0, 0, 0, 0};
        m.weights[static_cast<int>(t)] = 1.0;
        return m;
    }

    void validate() const {
        double sum = 0.0;
        for (double w : weights) {
            if (w < 0.0) throw std::invalid_argument("task mixture weights must be >= 0");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("task mixture weights must sum to 1");
    }

    // Task of the k-th drawn example (replays the greedy schedule).
    TaskKind task_at(long k) const {
        std::array<long, 4> counts{0, 0, 0, 0};
        TaskKind last = TaskKind::tryon;
        for (long i = 0; i <= k; ++i) {
            int best = -1;
            double best_gap = -1e300;
            for (int t = 0; t < 4; ++t) {
                const double gap = weights[t] * (i + 1) - counts[t];
                if (gap > best_gap + 1e-15) {
                    best_gap = gap;
                    best = t;
                }
            }
            ++counts[best];
            last = static_cast<TaskKind>(best);
        }
        return last;
    }

    std::vector<TaskKind> schedule(long n) const {
        std::array<long, 4> counts{0, 0, 0, 0};
        std::vector<TaskKind> out;
        out.reserve(n);
        for (long i = 0; i < n; ++i) {
            int best = -1;
            double best_gap = -1e300;
            for (int t = 0; t < 4; ++t) {
                const double gap = weights[t] * (i + 1) - counts[t];
                if (gap > best_gap + 1e-15) {
                    best_gap = gap;
                    best = t;
                }
            }
            ++counts[best];
            out.push_back(static_cast<TaskKind>(best));
        }
        return out;
    }
};

}  // namespace ropecast
