#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace ropecast {

// Row-major matrix, the only dense container the model math needs.
template <typename T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}

    T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    T at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
};

// H x W x C feature grid holding patchified pixels (the desk-scale stand-in
// for VAE latents). Layout is row-major with channels fastest.
template <typename T>
struct LatentGrid {
    int rows = 0;
    int cols = 0;
    int channels = 0;
    std::vector<T> data;

    LatentGrid() = default;
    LatentGrid(int r, int c, int ch)
        : rows(r), cols(c), channels(ch), data(static_cast<size_t>(r) * c * ch, T(0)) {}

    T* at(int r, int c) { return data.data() + (static_cast<size_t>(r) * cols + c) * channels; }
    const T* at(int r, int c) const {
        return data.data() + (static_cast<size_t>(r) * cols + c) * channels;
    }
    size_t size() const { return data.size(); }
    int token_count() const { return rows * cols; }

    bool same_shape(const LatentGrid& o) const {
        return rows == o.rows && cols == o.cols && channels == o.channels;
    }
};

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (const T& x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

template <typename T>
void check_grid(const LatentGrid<T>& g, const char* what) {
    if (g.rows < 1 || g.cols < 1 || g.channels < 1)
        throw std::invalid_argument(std::string(what) + ": all grid dims must be >= 1");
    if (!all_finite(g.data))
        throw std::invalid_argument(std::string(what) + ": grid contains non-finite values");
}

// Nearest-neighbour row resampling; layout requires all grids in a sequence
// to share the target's row count.
template <typename T>
LatentGrid<T> resample_rows(const LatentGrid<T>& g, int new_rows) {
    if (new_rows == g.rows) return g;
    LatentGrid<T> out(new_rows, g.cols, g.channels);
    for (int r = 0; r < new_rows; ++r) {
        int src = static_cast<int>((static_cast<long long>(r) * g.rows + g.rows / 2) / new_rows);
        if (src >= g.rows) src = g.rows - 1;
        for (int c = 0; c < g.cols; ++c) {
            const T* s = g.at(src, c);
            T* d = out.at(r, c);
            for (int ch = 0; ch < g.channels; ++ch) d[ch] = s[ch];
        }
    }
    return out;
}

}  // namespace ropecast
