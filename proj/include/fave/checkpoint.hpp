#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fave/config.hpp"
#include "fave/sha256.hpp"
#include "fave/tensor.hpp"

namespace fave {

// Checkpoint error kinds stay distinguishable for callers and tests.
struct CheckpointError : Error {
    enum class Kind { CorruptHeader, VersionMismatch, ConfigMismatch, TruncatedBlob };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : Error("checkpoint: " + msg), kind(k) {}
};

// Binary container: little-endian header {magic "FAVE", u32 version,
// 32-byte config digest} followed by named f64 blobs
// {u32 name_len, bytes, u32 rank, u64 dims..., f64 data...}.
// Model parameters, optimizer moments, generator state, and the config
// text itself all travel as blobs.
struct Checkpoint {
    static constexpr u32 kVersion = 1;
    static constexpr char kMagic[4] = {'F', 'A', 'V', 'E'};

    TrainConfig config;
    int stage = 0;
    std::vector<std::pair<std::string, Tensor>> blobs;

    std::array<std::uint8_t, 32> digest() const { return sha256(canonical_config(config)); }

    void put(const std::string& name, Tensor t) {
        for (auto& [n, b] : blobs)
            if (n == name) {
                b = std::move(t);
                return;
            }
        blobs.emplace_back(name, std::move(t));
    }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, b] : blobs)
            if (n == name) return &b;
        return nullptr;
    }

    const Tensor& get(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw CheckpointError(CheckpointError::Kind::TruncatedBlob,
                                      "missing blob '" + name + "'");
        return *t;
    }
};

namespace detail {

template <class T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CheckpointError(CheckpointError::Kind::TruncatedBlob, "truncated blob");
    return v;
}

inline Tensor string_blob(const std::string& s) {
    Tensor t({static_cast<i64>(s.size())});
    for (size_t i = 0; i < s.size(); ++i) t.v[i] = static_cast<real>(static_cast<unsigned char>(s[i]));
    return t;
}

inline std::string blob_string(const Tensor& t) {
    std::string s;
    s.reserve(t.v.size());
    for (real x : t.v) s.push_back(static_cast<char>(static_cast<unsigned char>(x)));
    return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(Checkpoint::kMagic, 4);
    detail::write_pod<u32>(out, Checkpoint::kVersion);
    auto dg = ckpt.digest();
    out.write(reinterpret_cast<const char*>(dg.data()), 32);

    auto write_blob = [&](const std::string& name, const Tensor& t) {
        detail::write_pod<u32>(out, static_cast<u32>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<u32>(out, static_cast<u32>(t.shape.size()));
        for (i64 d : t.shape) detail::write_pod<u64>(out, static_cast<u64>(d));
        for (real x : t.v) detail::write_pod<double>(out, static_cast<double>(x));
    };
    write_blob("__config.json", detail::string_blob(canonical_config(ckpt.config)));
    write_blob("__stage", Tensor({1}, {static_cast<real>(ckpt.stage)}));
    for (const auto& [name, t] : ckpt.blobs) write_blob(name, t);
    if (!out) throw DataError("short write on checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, Checkpoint::kMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::CorruptHeader, "bad magic bytes");
    u32 version = detail::read_pod<u32>(in);
    if (version != Checkpoint::kVersion)
        throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                              "unsupported version " + std::to_string(version));
    std::array<std::uint8_t, 32> digest{};
    in.read(reinterpret_cast<char*>(digest.data()), 32);
    if (!in) throw CheckpointError(CheckpointError::Kind::CorruptHeader, "truncated header");

    Checkpoint ckpt;
    std::string config_text;
    while (true) {
        u32 name_len;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (in.eof()) break;
        if (!in) throw CheckpointError(CheckpointError::Kind::TruncatedBlob, "truncated blob");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw CheckpointError(CheckpointError::Kind::TruncatedBlob, "truncated blob");
        u32 rank = detail::read_pod<u32>(in);
        std::vector<i64> shape(rank);
        for (u32 i = 0; i < rank; ++i) shape[i] = static_cast<i64>(detail::read_pod<u64>(in));
        Tensor t(shape);
        for (i64 i = 0; i < t.size(); ++i)
            t.v[static_cast<size_t>(i)] = static_cast<real>(detail::read_pod<double>(in));
        if (name == "__config.json") config_text = detail::blob_string(t);
        else if (name == "__stage") ckpt.stage = static_cast<int>(t.v[0]);
        else ckpt.blobs.emplace_back(std::move(name), std::move(t));
    }
    if (config_text.empty())
        throw CheckpointError(CheckpointError::Kind::CorruptHeader, "missing embedded config");
    if (sha256(config_text) != digest)
        throw CheckpointError(CheckpointError::Kind::ConfigMismatch,
                              "config mismatch: digest does not cover the embedded config");
    ckpt.config = config_from_json(nlohmann::json::parse(config_text));
    return ckpt;
}

// Stage-2 training and evaluation must run under the recorded config.
inline void require_config_match(const Checkpoint& ckpt, const TrainConfig& cfg) {
    if (canonical_config(ckpt.config) != canonical_config(cfg))
        throw CheckpointError(CheckpointError::Kind::ConfigMismatch,
                              "config mismatch: checkpoint was produced under a different config");
}

}  // namespace fave
