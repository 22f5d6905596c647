#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ropecast/grid.hpp"

namespace ropecast {

using Color = std::array<float, 3>;

// RGB raster, values in [0,1]. The generator quantizes to 1/255 steps so the
// 8-bit PPM files round-trip losslessly at the decoded-pixel level.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;  // h*w*3, channels fastest

    Image() = default;
    Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.f) {}

    float* px(int y, int x) { return data.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const float* px(int y, int x) const {
        return data.data() + (static_cast<size_t>(y) * width + x) * 3;
    }

    void fill(const Color& c) {
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                float* p = px(y, x);
                p[0] = c[0];
                p[1] = c[1];
                p[2] = c[2];
            }
    }

    bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
};

struct Mask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> data;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    long count() const {
        long n = 0;
        for (uint8_t v : data) n += v ? 1 : 0;
        return n;
    }
    Mask complement() const {
        Mask m(height, width);
        for (size_t i = 0; i < data.size(); ++i) m.data[i] = data[i] ? 0 : 1;
        return m;
    }
};

inline float quantize_channel(float v) {
    float q = std::round(v * 255.f);
    if (q < 0.f) q = 0.f;
    if (q > 255.f) q = 255.f;
    return q / 255.f;
}

inline Color quantize(const Color& c) {
    return {quantize_channel(c[0]), quantize_channel(c[1]), quantize_channel(c[2])};
}

// ---------------------------------------------------------------------------
// PPM / PGM io with atomic writes (write-temp-then-rename)

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline int read_pnm_token(std::istream& in) {
    // Skips whitespace and '#' comments.
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int v = 0;
    if (!(in >> v)) throw std::runtime_error("malformed PNM header");
    return v;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                      "\n255\n";
    out.reserve(out.size() + img.data.size());
    for (float v : img.data) {
        float q = std::round(v * 255.f);
        q = q < 0.f ? 0.f : (q > 255.f ? 255.f : q);
        out.push_back(static_cast<char>(static_cast<uint8_t>(q)));
    }
    detail::write_file_atomic(path, out);
}

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '6') throw std::runtime_error("not a P6 PPM: " + path.string());
    const int w = detail::read_pnm_token(f);
    const int h = detail::read_pnm_token(f);
    const int maxval = detail::read_pnm_token(f);
    if (maxval != 255) throw std::runtime_error("unsupported maxval in: " + path.string());
    f.get();  // single whitespace before raster
    Image img(h, w);
    std::vector<uint8_t> raw(static_cast<size_t>(h) * w * 3);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw std::runtime_error("truncated raster in: " + path.string());
    for (size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] / 255.f;
    return img;
}

inline void write_pgm(const std::filesystem::path& path, const Mask& mask) {
    std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) +
                      "\n255\n";
    for (uint8_t v : mask.data) out.push_back(static_cast<char>(v ? 255 : 0));
    detail::write_file_atomic(path, out);
}

inline Mask read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '5') throw std::runtime_error("not a P5 PGM: " + path.string());
    const int w = detail::read_pnm_token(f);
    const int h = detail::read_pnm_token(f);
    const int maxval = detail::read_pnm_token(f);
    if (maxval != 255) throw std::runtime_error("unsupported maxval in: " + path.string());
    f.get();
    Mask mask(h, w);
    std::vector<uint8_t> raw(static_cast<size_t>(h) * w);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw std::runtime_error("truncated raster in: " + path.string());
    for (size_t i = 0; i < raw.size(); ++i) mask.data[i] = raw[i] >= 128 ? 1 : 0;
    return mask;
}

// ---------------------------------------------------------------------------
// Patchify: image pixels -> token grid. Pixels are 8-bit levels k/255; the
// latent value is (k - 128) / 128, which is exact in float, so
// unpatchify(patchify(img)) reproduces the image bit for bit. Unpatchify
// snaps continuous latents back to the 8-bit grid (the same quantization the
// raster files apply).

template <typename T>
LatentGrid<T> patchify(const Image& img, int patch) {
    if (patch < 1 || img.height % patch != 0 || img.width % patch != 0)
        throw std::invalid_argument("patchify: image dims must be divisible by patch size");
    LatentGrid<T> g(img.height / patch, img.width / patch, patch * patch * 3);
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) {
            T* out = g.at(r, c);
            int k = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) {
                    const float* p = img.px(r * patch + dy, c * patch + dx);
                    for (int ch = 0; ch < 3; ++ch) {
                        const float level = std::round(p[ch] * 255.f);
                        out[k++] = static_cast<T>((level - 128.f) * (1.f / 128.f));
                    }
                }
        }
    return g;
}

template <typename T>
Image unpatchify(const LatentGrid<T>& g, int patch) {
    if (g.channels != patch * patch * 3)
        throw std::invalid_argument("unpatchify: channel count does not match patch size");
    Image img(g.rows * patch, g.cols * patch);
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) {
            const T* in = g.at(r, c);
            int k = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) {
                    float* p = img.px(r * patch + dy, c * patch + dx);
                    for (int ch = 0; ch < 3; ++ch) {
                        float level = std::round(static_cast<float>(in[k++]) * 128.f + 128.f);
                        level = level < 0.f ? 0.f : (level > 255.f ? 255.f : level);
                        p[ch] = level / 255.f;
                    }
                }
        }
    return img;
}

}  // namespace ropecast
