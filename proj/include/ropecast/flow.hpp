#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ropecast/grid.hpp"
#include "ropecast/layout.hpp"
#include "ropecast/rng.hpp"

namespace ropecast {

enum class TimeDistribution : int { uniform = 0, logit_normal = 1 };

// One rectified-flow training pair. Convention: data at t=0, noise at t=1,
//   z_t = (1-t) * x1 + t * eps,   u = eps - x1.
template <typename T>
struct FlowSample {
    double t = 0.0;
    LatentGrid<T> z_t;
    LatentGrid<T> u_target;
    LatentGrid<T> epsilon;
};

template <typename T>
FlowSample<T> make_flow_sample_at(const LatentGrid<T>& x1, double t, Rng& rng) {
    check_grid(x1, "make_flow_sample");
    FlowSample<T> s;
    s.t = t;
    s.epsilon = LatentGrid<T>(x1.rows, x1.cols, x1.channels);
    for (auto& e : s.epsilon.data) e = static_cast<T>(rng.next_normal());
    s.z_t = x1;
    s.u_target = x1;
    for (size_t i = 0; i < x1.data.size(); ++i) {
        s.z_t.data[i] = static_cast<T>((1.0 - t) * x1.data[i] + t * s.epsilon.data[i]);
        s.u_target.data[i] = s.epsilon.data[i] - x1.data[i];
    }
    return s;
}

inline double draw_time(Rng& rng, TimeDistribution dist) {
    if (dist == TimeDistribution::logit_normal) {
        const double z = rng.next_normal();
        return 1.0 / (1.0 + std::exp(-z));
    }
    return rng.next_uniform();
}

template <typename T>
FlowSample<T> make_flow_sample(const LatentGrid<T>& x1, Rng& rng,
                               TimeDistribution dist = TimeDistribution::uniform) {
    return make_flow_sample_at(x1, draw_time(rng, dist), rng);
}

// ---------------------------------------------------------------------------
// Masked loss

// Mean squared error between predictions and targets over masked rows only.
// Rows outside the mask are never read, so arbitrary garbage there (including
// NaN) cannot change the result.
template <typename T>
double masked_cfm_loss(const Matrix<T>& pred, const Matrix<T>& target,
                       const std::vector<uint8_t>& mask) {
    if (pred.rows != target.rows || pred.cols != target.cols ||
        static_cast<int>(mask.size()) != pred.rows)
        throw std::invalid_argument("masked_cfm_loss: shape mismatch");
    long n = 0;
    double acc = 0.0;
    for (int i = 0; i < pred.rows; ++i) {
        if (!mask[i]) continue;
        ++n;
        const T* p = pred.row(i);
        const T* u = target.row(i);
        for (int j = 0; j < pred.cols; ++j) {
            const double d = static_cast<double>(p[j]) - static_cast<double>(u[j]);
            acc += d * d;
        }
    }
    if (n == 0) throw std::invalid_argument("masked_cfm_loss: empty loss mask");
    return acc / (static_cast<double>(n) * pred.cols);
}

// ---------------------------------------------------------------------------
// Training batch

// One element of a training batch. `seq` holds the assembled input (conditions
// clean, or noised when the clean-latent ablation arm is off), `u` the
// velocity targets aligned to the sequence, and `supervised` the rows under
// the loss (target tokens; plus condition tokens in the ablation arm).
template <typename T>
struct BatchElement {
    TaskSpec task;
    std::vector<ConditionSpec<T>> conditions;  // clean grids
    FlowSample<T> flow;
    LatentGrid<T> x1;
    TokenSequence<T> seq;
    Matrix<T> u;
    std::vector<uint8_t> supervised;
};

template <typename T>
struct TrainingBatch {
    std::vector<BatchElement<T>> elements;
};

struct BatchOptions {
    bool clean_latents = true;      // off: noise conditions and supervise them too
    LayoutOptions layout;
    TimeDistribution time_dist = TimeDistribution::uniform;
    std::optional<double> forced_t;  // test hook
};

// Builds one batch element from a task example. The element's RNG stream must
// be derived per element so batches are order-independent.
template <typename T>
BatchElement<T> make_batch_element(const TaskSpec& task,
                                   const std::vector<ConditionSpec<T>>& conditions,
                                   const LatentGrid<T>& x1, Rng& rng,
                                   const BatchOptions& opts = {}) {
    BatchElement<T> el;
    el.task = task;
    el.conditions = conditions;
    el.x1 = x1;
    const double t = opts.forced_t ? *opts.forced_t : draw_time(rng, opts.time_dist);
    el.flow = make_flow_sample_at(x1, t, rng);

    if (opts.clean_latents) {
        el.seq = assemble(task, conditions, el.flow.z_t, opts.layout);
        el.u = Matrix<T>(el.seq.length(), el.seq.channels());
        el.supervised = el.seq.loss_mask;
        int idx = 0;
        for (int i = 0; i < el.seq.length(); ++i) {
            if (!el.seq.loss_mask[i]) continue;
            const T* src = el.flow.u_target.data.data() +
                           static_cast<size_t>(idx++) * el.seq.channels();
            T* dst = el.u.row(i);
            for (int c = 0; c < el.seq.channels(); ++c) dst[c] = src[c];
        }
    } else {
        // Ablation arm: conditions are noised with the same t (fresh noise per
        // condition, drawn after the target's) and enter the loss.
        std::vector<ConditionSpec<T>> noised = conditions;
        std::vector<FlowSample<T>> cond_flows;
        cond_flows.reserve(conditions.size());
        for (auto& c : noised) {
            cond_flows.push_back(make_flow_sample_at(c.grid, t, rng));
            c.grid = cond_flows.back().z_t;
        }
        el.seq = assemble(task, noised, el.flow.z_t, opts.layout);
        el.u = Matrix<T>(el.seq.length(), el.seq.channels());
        el.supervised.assign(el.seq.length(), 0);
        int cond_idx = 0, within = 0, target_idx = 0;
        for (int i = 0; i < el.seq.length(); ++i) {
            if (el.seq.segment[i] == Segment::condition) {
                const auto& cf = cond_flows[cond_idx];
                const T* src =
                    cf.u_target.data.data() + static_cast<size_t>(within) * el.seq.channels();
                T* dst = el.u.row(i);
                for (int c = 0; c < el.seq.channels(); ++c) dst[c] = src[c];
                el.supervised[i] = 1;
                if (++within == cf.u_target.token_count()) {
                    within = 0;
                    ++cond_idx;
                }
            } else if (el.seq.segment[i] == Segment::target) {
                const T* src = el.flow.u_target.data.data() +
                               static_cast<size_t>(target_idx++) * el.seq.channels();
                T* dst = el.u.row(i);
                for (int c = 0; c < el.seq.channels(); ++c) dst[c] = src[c];
                el.supervised[i] = 1;
            }
        }
    }
    return el;
}

// ---------------------------------------------------------------------------
// Euler sampler

// Velocity field on the target segment: (sequence, t) -> target-shaped grid.
template <typename T>
using VelocityFn = std::function<LatentGrid<T>(const TokenSequence<T>&, double)>;

// Observes the assembled sequence at each step (used by cleanliness checks).
template <typename T>
using StepObserver = std::function<void(int step, double t, const TokenSequence<T>&)>;

// Deterministic Euler integration of the learned ODE from t=1 (noise) down to
// t=0 (data). Conditions are re-assembled clean at every step; only the target
// segment is updated.
template <typename T>
LatentGrid<T> euler_sample(const VelocityFn<T>& velocity, const TaskSpec& task,
                           const std::vector<ConditionSpec<T>>& conditions, ShapeRC target_shape,
                           int channels, int steps, uint64_t seed,
                           const LayoutOptions& layout = {},
                           const StepObserver<T>* observer = nullptr) {
    if (steps < 1) throw std::invalid_argument("euler_sample: steps must be >= 1");
    Rng rng(mix_seed(seed, 0x5a3b));
    LatentGrid<T> z(target_shape.rows, target_shape.cols, channels);
    for (auto& v : z.data) v = static_cast<T>(rng.next_normal());

    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - k * dt;
        TokenSequence<T> seq = assemble(task, conditions, z, layout);
        if (observer) (*observer)(k, t, seq);
        LatentGrid<T> v = velocity(seq, t);
        if (!v.same_shape(z)) throw std::runtime_error("euler_sample: velocity shape mismatch");
        for (size_t i = 0; i < z.data.size(); ++i) {
            z.data[i] -= static_cast<T>(dt) * v.data[i];
            if (!std::isfinite(static_cast<double>(z.data[i])))
                throw std::runtime_error("euler_sample: non-finite state at step " +
                                         std::to_string(k));
        }
    }
    return z;
}

}  // namespace ropecast
