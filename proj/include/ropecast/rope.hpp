#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ropecast {

// Per-token coordinates feeding the rotary embedding. w is the condition-ID
// axis: 0 for target and task tokens, i >= 1 for the i-th image condition.
// y/x are token-granularity row/column.
struct PositionTriple {
    int w = 0;
    int y = 0;
    int x = 0;

    bool operator==(const PositionTriple&) const = default;
};

struct RopeConfig {
    int head_dim = 0;        // D, even
    int d_w = 0, d_y = 0, d_x = 0;  // even, >= 2 each, summing to D
    double theta_base = 10000.0;
};

// Default channel partition: roughly a quarter of the head for the ID axis
// and the rest split evenly between rows and columns, all forced even.
// (8, 12, 12) for D = 32.
inline RopeConfig make_rope_config(int head_dim, double theta_base = 10000.0) {
    RopeConfig cfg;
    cfg.head_dim = head_dim;
    cfg.theta_base = theta_base;
    int dw = 2 * (head_dim / 8);
    if (dw < 2) dw = 2;
    int rest = head_dim - dw;
    int dy = rest / 2;
    if (dy % 2 != 0) dy += 1;
    cfg.d_w = dw;
    cfg.d_y = dy;
    cfg.d_x = rest - dy;
    return cfg;
}

inline void validate_rope_config(const RopeConfig& cfg) {
    auto bad = [&](const std::string& msg) { throw std::invalid_argument("RopeConfig: " + msg); };
    if (cfg.head_dim <= 0 || cfg.head_dim % 2 != 0) bad("head_dim must be a positive even integer");
    for (int d : {cfg.d_w, cfg.d_y, cfg.d_x})
        if (d < 2 || d % 2 != 0) bad("axis dims must be even and >= 2");
    if (cfg.d_w + cfg.d_y + cfg.d_x != cfg.head_dim) bad("axis dims must sum to head_dim");
    if (!(cfg.theta_base > 0.0)) bad("theta_base must be positive");
}

// Frequencies omega_m = theta^(-2m / d_axis) for m in [0, d_axis/2).
template <typename T>
struct RopeFrequencies {
    std::vector<T> w, y, x;

    const std::vector<T>& axis(int i) const { return i == 0 ? w : (i == 1 ? y : x); }
};

template <typename T>
std::vector<T> axis_frequencies(int d_axis, double theta_base) {
    if (d_axis <= 0 || d_axis % 2 != 0)
        throw std::invalid_argument("axis_frequencies: axis dim must be positive and even");
    std::vector<T> out(static_cast<size_t>(d_axis / 2));
    for (int m = 0; m < d_axis / 2; ++m)
        out[m] = static_cast<T>(std::pow(theta_base, -2.0 * m / d_axis));
    return out;
}

template <typename T>
RopeFrequencies<T> make_frequencies(const RopeConfig& cfg) {
    validate_rope_config(cfg);
    RopeFrequencies<T> f;
    f.w = axis_frequencies<T>(cfg.d_w, cfg.theta_base);
    f.y = axis_frequencies<T>(cfg.d_y, cfg.theta_base);
    f.x = axis_frequencies<T>(cfg.d_x, cfg.theta_base);
    return f;
}

// Test hook: all-zero frequencies make every rotation the identity.
template <typename T>
RopeFrequencies<T> zero_frequencies(const RopeConfig& cfg) {
    validate_rope_config(cfg);
    RopeFrequencies<T> f;
    f.w.assign(static_cast<size_t>(cfg.d_w / 2), T(0));
    f.y.assign(static_cast<size_t>(cfg.d_y / 2), T(0));
    f.x.assign(static_cast<size_t>(cfg.d_x / 2), T(0));
    return f;
}

// Rotates consecutive pairs (v[2m], v[2m+1]) by angle p * omega_m, in place.
// The pairing is interleaved: (v1,v2), (v3,v4), ...
template <typename T>
void rotate_axis_inplace(T* v, int d_axis, double p, const std::vector<T>& freqs) {
    for (int m = 0; m < d_axis / 2; ++m) {
        const double a = p * static_cast<double>(freqs[m]);
        const T c = static_cast<T>(std::cos(a));
        const T s = static_cast<T>(std::sin(a));
        const T v0 = v[2 * m];
        const T v1 = v[2 * m + 1];
        v[2 * m] = v0 * c - v1 * s;
        v[2 * m + 1] = v0 * s + v1 * c;
    }
}

template <typename T>
std::vector<T> rotate_axis(const std::vector<T>& v, double p, const std::vector<T>& freqs) {
    if (v.size() != 2 * freqs.size())
        throw std::invalid_argument("rotate_axis: vector length must be 2 * |freqs|");
    std::vector<T> out = v;
    rotate_axis_inplace(out.data(), static_cast<int>(out.size()), p, freqs);
    return out;
}

// Three-axis rotary embedding: the head vector is partitioned (v_w | v_y | v_x)
// and each slice is rotated by its coordinate. `sign` = -1 applies the inverse
// rotation (used by the backward pass).
template <typename T>
void apply_rope_inplace(T* v, const PositionTriple& pos, const RopeConfig& cfg,
                        const RopeFrequencies<T>& freqs, double sign = 1.0) {
    rotate_axis_inplace(v, cfg.d_w, sign * pos.w, freqs.w);
    rotate_axis_inplace(v + cfg.d_w, cfg.d_y, sign * pos.y, freqs.y);
    rotate_axis_inplace(v + cfg.d_w + cfg.d_y, cfg.d_x, sign * pos.x, freqs.x);
}

template <typename T>
std::vector<T> apply_rope(const std::vector<T>& v, const PositionTriple& pos,
                          const RopeConfig& cfg, const RopeFrequencies<T>& freqs) {
    if (static_cast<int>(v.size()) != cfg.head_dim)
        throw std::invalid_argument("apply_rope: vector length must equal head_dim");
    std::vector<T> out = v;
    apply_rope_inplace(out.data(), pos, cfg, freqs);
    return out;
}

}  // namespace ropecast
