#pragma once

// Checkpoint container, version 1:
//
//   "ESCAIPCK"            8 bytes magic
//   u32 version           = 1
//   u32 scalar_bytes      4 (float) or 8 (double)
//   u64 step, u64 epoch
//   u64 length + bytes    JSON metadata: {"model": ModelConfig, ...}
//   u64 blob_count
//   per blob: u32 name length, name, u32 rank, u64 dims[rank], raw scalars
//
// Blobs are "param/<name>" for weights and "adam_m/<name>", "adam_v/<name>" for
// optimizer moments. All integers and scalars are native little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "model.hpp"

namespace escaip {

template <class T>
struct Checkpoint {
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, Tensor<T>> blobs;
};

namespace detail {
inline constexpr char kCheckpointMagic[8] = {'E', 'S', 'C', 'A', 'I', 'P', 'C', 'K'};
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    os.write(detail::kCheckpointMagic, 8);
    detail::write_pod<std::uint32_t>(os, 1);
    detail::write_pod<std::uint32_t>(os, sizeof(T));
    detail::write_pod(os, ck.step);
    detail::write_pod(os, ck.epoch);
    const std::string meta = ck.metadata.dump();
    detail::write_pod<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::write_pod<std::uint64_t>(os, ck.blobs.size());
    for (const auto& [name, t] : ck.blobs) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::write_pod<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    }
    if (!os) throw DataError("failed writing checkpoint " + path.string());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
        throw DataError(path.string() + " is not a checkpoint");
    }
    if (detail::read_pod<std::uint32_t>(is) != 1) throw DataError("unsupported checkpoint version");
    if (detail::read_pod<std::uint32_t>(is) != sizeof(T)) throw DataError("checkpoint precision does not match");
    Checkpoint<T> ck;
    ck.step = detail::read_pod<std::uint64_t>(is);
    ck.epoch = detail::read_pod<std::uint64_t>(is);
    const auto meta_len = detail::read_pod<std::uint64_t>(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    try {
        ck.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint metadata: ") + e.what());
    }
    const auto count = detail::read_pod<std::uint64_t>(is);
    for (std::uint64_t b = 0; b < count; ++b) {
        const auto len = detail::read_pod<std::uint32_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        const auto rank = detail::read_pod<std::uint32_t>(is);
        if (rank > 8) throw DataError("implausible tensor rank in checkpoint");
        Shape shape(rank);
        for (auto& d : shape) d = detail::read_pod<std::uint64_t>(is);
        Tensor<T> t(shape);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
        if (!is) throw DataError("truncated checkpoint " + path.string());
        ck.blobs.emplace(std::move(name), std::move(t));
    }
    return ck;
}

template <class T>
void store_params(Checkpoint<T>& ck, const ParamStore<T>& store, const std::string& prefix) {
    for (const auto& p : store) ck.blobs[prefix + p.name] = p.value;
}

template <class T>
void restore_params(const Checkpoint<T>& ck, ParamStore<T>& store, const std::string& prefix) {
    for (auto& p : store) {
        auto it = ck.blobs.find(prefix + p.name);
        if (it == ck.blobs.end()) throw DataError("checkpoint lacks " + prefix + p.name);
        if (it->second.shape() != p.value.shape()) throw DataError("checkpoint shape mismatch for " + p.name);
        p.value = it->second;
    }
}

template <class T>
Checkpoint<T> model_checkpoint(const Model<T>& model) {
    Checkpoint<T> ck;
    ck.metadata["model"] = model.config;
    store_params(ck, model.params, "param/");
    return ck;
}

template <class T>
Model<T> model_from_checkpoint(const Checkpoint<T>& ck) {
    if (!ck.metadata.contains("model")) throw DataError("checkpoint lacks a model config");
    ModelConfig cfg;
    try {
        from_json(ck.metadata.at("model"), cfg);
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint model config: ") + e.what());
    }
    Model<T> m = Model<T>::create(cfg, 0);
    restore_params(ck, m.params, "param/");
    return m;
}

template <class T>
Model<T> load_model(const std::filesystem::path& path) {
    return model_from_checkpoint(load_checkpoint<T>(path));
}

}  // namespace escaip
