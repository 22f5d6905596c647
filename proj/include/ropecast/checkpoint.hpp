#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "ropecast/rng.hpp"

namespace ropecast {

// Checkpoint container:
//   magic "RPCKPT01" | u32 version | u32 header length | header JSON |
//   raw little-endian tensor data | u64 FNV-1a checksum of everything above.
// The header carries the dtype, the named tensor table (name, shape, offset,
// byte count) and an arbitrary JSON metadata object. Reload is bit-exact.

constexpr char kCheckpointMagic[9] = "RPCKPT01";
constexpr uint32_t kCheckpointVersion = 1;

// Tensor payloads are raw little-endian words.
static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

template <typename T>
struct TensorEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<T> data;
};

template <typename T>
struct Checkpoint {
    nlohmann::json meta;
    std::vector<TensorEntry<T>> tensors;

    const TensorEntry<T>* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (sizeof(T) == 4)
        return "f32";
    else
        return "f64";
}

inline void append_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint32_t read_u32(const char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    return v;
}

inline uint64_t read_u64(const char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    return v;
}

inline void write_binary_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
    nlohmann::json header;
    header["dtype"] = detail::dtype_name<T>();
    header["meta"] = ckpt.meta;
    nlohmann::json table = nlohmann::json::array();
    size_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        const size_t nbytes = t.data.size() * sizeof(T);
        table.push_back({{"name", t.name},
                         {"shape", t.shape},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }
    header["tensors"] = table;
    const std::string hj = header.dump();

    std::string out;
    out.reserve(16 + hj.size() + offset + 8);
    out.append(kCheckpointMagic, 8);
    detail::append_u32(out, kCheckpointVersion);
    detail::append_u32(out, static_cast<uint32_t>(hj.size()));
    out += hj;
    for (const auto& t : ckpt.tensors) {
        const size_t pos = out.size();
        out.resize(pos + t.data.size() * sizeof(T));
        std::memcpy(out.data() + pos, t.data.data(), t.data.size() * sizeof(T));
    }
    detail::append_u64(out, fnv1a64(out.data(), out.size()));
    detail::write_binary_atomic(path, out);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint not found: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 24 + 8) throw std::runtime_error("checkpoint truncated: " + path.string());

    const uint64_t stored = detail::read_u64(bytes.data() + bytes.size() - 8);
    const uint64_t actual = fnv1a64(bytes.data(), bytes.size() - 8);
    if (stored != actual)
        throw std::runtime_error("checkpoint checksum mismatch: " + path.string());

    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path.string());
    const uint32_t version = detail::read_u32(bytes.data() + 8);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const uint32_t hlen = detail::read_u32(bytes.data() + 12);
    if (bytes.size() < 16 + hlen + 8)
        throw std::runtime_error("checkpoint truncated: " + path.string());
    const nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));
    if (header.at("dtype").get<std::string>() != detail::dtype_name<T>())
        throw std::runtime_error("checkpoint dtype mismatch");

    Checkpoint<T> ckpt;
    ckpt.meta = header.at("meta");
    const char* base = bytes.data() + 16 + hlen;
    const size_t data_bytes = bytes.size() - 16 - hlen - 8;
    for (const auto& e : header.at("tensors")) {
        TensorEntry<T> t;
        t.name = e.at("name").get<std::string>();
        t.shape = e.at("shape").get<std::vector<int>>();
        const size_t offset = e.at("offset").get<size_t>();
        const size_t nbytes = e.at("nbytes").get<size_t>();
        if (offset + nbytes > data_bytes)
            throw std::runtime_error("checkpoint tensor out of range: " + t.name);
        t.data.resize(nbytes / sizeof(T));
        std::memcpy(t.data.data(), base + offset, nbytes);
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

inline uint64_t file_fingerprint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace ropecast
