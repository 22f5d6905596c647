#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ropecast/grid.hpp"
#include "ropecast/rope.hpp"

namespace ropecast {

enum class TaskKind : int {
    tryon = 0,
    model_free_tryon = 1,
    garment_reconstruction = 2,
    tryon_in_layers = 3,
};

inline const char* task_name(TaskKind t) {
    switch (t) {
        case TaskKind::tryon: return "tryon";
        case TaskKind::model_free_tryon: return "model_free_tryon";
        case TaskKind::garment_reconstruction: return "garment_reconstruction";
        case TaskKind::tryon_in_layers: return "tryon_in_layers";
    }
    return "?";
}

inline TaskKind task_from_name(const std::string& s) {
    if (s == "tryon") return TaskKind::tryon;
    if (s == "model_free_tryon") return TaskKind::model_free_tryon;
    if (s == "garment_reconstruction") return TaskKind::garment_reconstruction;
    if (s == "tryon_in_layers") return TaskKind::tryon_in_layers;
    throw std::invalid_argument("unknown task: " + s);
}

enum class ConditionRole : int { model_image = 0, garment_image = 1 };

template <typename T>
struct ConditionSpec {
    LatentGrid<T> grid;
    int condition_id = 1;       // >= 1, distinct and consecutive within a sequence
    bool pixel_aligned = false; // shares the target's (y, x) coordinates
    ConditionRole role = ConditionRole::garment_image;
};

struct TaskSpec {
    TaskKind task = TaskKind::tryon;
    int task_token_count = 1;
};

enum class Segment : uint8_t { task = 0, condition = 1, target = 2 };

// The assembled model input: task tokens, then condition tokens (row-major,
// list order), then target tokens (row-major). Values are immutable after
// construction; sampling builds new sequences via scatter_target.
template <typename T>
struct TokenSequence {
    Matrix<T> tokens;                     // L x C (task rows zero; the model adds embeddings)
    std::vector<PositionTriple> positions;
    std::vector<Segment> segment;
    std::vector<uint8_t> loss_mask;       // true only on target tokens
    std::vector<uint8_t> clean_mask;      // true on task and condition tokens
    TaskKind task = TaskKind::tryon;
    int task_token_count = 0;
    int target_rows = 0;
    int target_cols = 0;

    int length() const { return tokens.rows; }
    int channels() const { return tokens.cols; }
};

enum class ResamplePolicy : int { reject = 0, nearest_rows = 1 };

struct LayoutOptions {
    // When false, every condition is laid out as non-aligned with offset
    // columns and all tokens get w = 0 (the vanilla single-image scheme used
    // by the ablation arm).
    bool adaptive_position = true;
    ResamplePolicy resample = ResamplePolicy::reject;
};

struct ShapeRC {
    int rows = 0;
    int cols = 0;
};

namespace detail {

template <typename T>
void validate_conditions(const std::vector<ConditionSpec<T>>& conds) {
    for (size_t i = 0; i < conds.size(); ++i) {
        if (conds[i].condition_id != static_cast<int>(i) + 1)
            throw std::invalid_argument(
                "conditions: condition_ids must be distinct and consecutive from 1");
    }
}

}  // namespace detail

// Column layout. Non-aligned conditions stack left to right with cumulative
// offsets. Pixel-aligned conditions share the target's column range; when any
// aligned condition exists the target restarts at column 0 and non-aligned
// blocks are offset past the target's width, otherwise the target continues
// after the last condition.
template <typename T>
std::vector<PositionTriple> layout_positions(const std::vector<ConditionSpec<T>>& conditions,
                                             ShapeRC target_shape,
                                             const LayoutOptions& opts = {}) {
    if (target_shape.rows < 1 || target_shape.cols < 1)
        throw std::invalid_argument("layout_positions: empty target");
    detail::validate_conditions(conditions);

    const int m = target_shape.rows;
    for (const auto& c : conditions) {
        if (c.grid.rows != m && opts.resample == ResamplePolicy::reject)
            throw std::invalid_argument(
                "layout_positions: condition row count differs from target and no resampling "
                "policy is declared");
    }

    bool any_aligned = false;
    if (opts.adaptive_position)
        for (const auto& c : conditions) any_aligned |= c.pixel_aligned;

    std::vector<PositionTriple> out;
    int offset = any_aligned ? target_shape.cols : 0;
    int last_end = 0;
    for (const auto& c : conditions) {
        const bool aligned = opts.adaptive_position && c.pixel_aligned;
        const int w = opts.adaptive_position ? c.condition_id : 0;
        const int x0 = aligned ? 0 : offset;
        for (int r = 0; r < m; ++r)
            for (int x = 0; x < c.grid.cols; ++x) out.push_back({w, r, x0 + x});
        if (!aligned) {
            offset += c.grid.cols;
            last_end = offset;
        }
    }

    const int target_x0 = any_aligned ? 0 : last_end;
    for (int r = 0; r < m; ++r)
        for (int x = 0; x < target_shape.cols; ++x) out.push_back({0, r, target_x0 + x});
    return out;
}

template <typename T>
TokenSequence<T> assemble(const TaskSpec& task, const std::vector<ConditionSpec<T>>& conditions,
                          const LatentGrid<T>& noisy_target, const LayoutOptions& opts = {}) {
    if (noisy_target.rows < 1 || noisy_target.cols < 1)
        throw std::invalid_argument("assemble: empty target");
    if (task.task_token_count < 1)
        throw std::invalid_argument("assemble: task_token_count must be >= 1");
    detail::validate_conditions(conditions);

    std::vector<ConditionSpec<T>> conds = conditions;
    for (auto& c : conds) {
        if (c.grid.channels != noisy_target.channels)
            throw std::invalid_argument("assemble: condition channel count differs from target");
        if (c.grid.rows != noisy_target.rows) {
            if (opts.resample != ResamplePolicy::nearest_rows)
                throw std::invalid_argument(
                    "assemble: condition row count differs from target and no resampling policy "
                    "is declared");
            c.grid = resample_rows(c.grid, noisy_target.rows);
        }
    }

    const auto grid_positions =
        layout_positions(conds, ShapeRC{noisy_target.rows, noisy_target.cols}, opts);

    int cond_tokens = 0;
    for (const auto& c : conds) cond_tokens += c.grid.token_count();
    const int L = task.task_token_count + cond_tokens + noisy_target.token_count();
    const int C = noisy_target.channels;

    TokenSequence<T> seq;
    seq.tokens = Matrix<T>(L, C);
    seq.positions.reserve(L);
    seq.segment.reserve(L);
    seq.task = task.task;
    seq.task_token_count = task.task_token_count;
    seq.target_rows = noisy_target.rows;
    seq.target_cols = noisy_target.cols;

    for (int i = 0; i < task.task_token_count; ++i) {
        seq.positions.push_back({0, 0, 0});
        seq.segment.push_back(Segment::task);
    }
    int row = task.task_token_count;
    size_t gp = 0;
    for (const auto& c : conds) {
        for (int r = 0; r < c.grid.rows; ++r)
            for (int x = 0; x < c.grid.cols; ++x) {
                const T* src = c.grid.at(r, x);
                T* dst = seq.tokens.row(row++);
                for (int ch = 0; ch < C; ++ch) dst[ch] = src[ch];
                seq.positions.push_back(grid_positions[gp++]);
                seq.segment.push_back(Segment::condition);
            }
    }
    for (int r = 0; r < noisy_target.rows; ++r)
        for (int x = 0; x < noisy_target.cols; ++x) {
            const T* src = noisy_target.at(r, x);
            T* dst = seq.tokens.row(row++);
            for (int ch = 0; ch < C; ++ch) dst[ch] = src[ch];
            seq.positions.push_back(grid_positions[gp++]);
            seq.segment.push_back(Segment::target);
        }

    seq.loss_mask.resize(L);
    seq.clean_mask.resize(L);
    for (int i = 0; i < L; ++i) {
        const bool is_target = seq.segment[i] == Segment::target;
        seq.loss_mask[i] = is_target ? 1 : 0;
        seq.clean_mask[i] = is_target ? 0 : 1;
    }
    return seq;
}

template <typename T>
LatentGrid<T> gather_target(const TokenSequence<T>& seq) {
    LatentGrid<T> out(seq.target_rows, seq.target_cols, seq.channels());
    int idx = 0;
    for (int i = 0; i < seq.length(); ++i) {
        if (!seq.loss_mask[i]) continue;
        const T* src = seq.tokens.row(i);
        T* dst = out.data.data() + static_cast<size_t>(idx++) * seq.channels();
        for (int ch = 0; ch < seq.channels(); ++ch) dst[ch] = src[ch];
    }
    if (idx != out.token_count())
        throw std::runtime_error("gather_target: loss mask does not cover the target shape");
    return out;
}

template <typename T>
TokenSequence<T> scatter_target(const TokenSequence<T>& seq, const LatentGrid<T>& grid) {
    if (grid.rows != seq.target_rows || grid.cols != seq.target_cols ||
        grid.channels != seq.channels())
        throw std::invalid_argument("scatter_target: grid shape mismatch");
    TokenSequence<T> out = seq;
    int idx = 0;
    for (int i = 0; i < out.length(); ++i) {
        if (!out.loss_mask[i]) continue;
        const T* src = grid.data.data() + static_cast<size_t>(idx++) * grid.channels;
        T* dst = out.tokens.row(i);
        for (int ch = 0; ch < grid.channels; ++ch) dst[ch] = src[ch];
    }
    return out;
}

// Plain-text position table used by the inspect-layout command and goldens.
template <typename T>
std::string render_layout_table(const TokenSequence<T>& seq) {
    std::ostringstream os;
    os << "index segment w y x\n";
    for (int i = 0; i < seq.length(); ++i) {
        const char* seg = seq.segment[i] == Segment::task        ? "task"
                          : seq.segment[i] == Segment::condition ? "condition"
                                                                 : "target";
        os << i << ' ' << seg << ' ' << seq.positions[i].w << ' ' << seq.positions[i].y << ' '
           << seq.positions[i].x << '\n';
    }
    return os.str();
}

}  // namespace ropecast
