#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaroute/config.hpp"
#include "adaroute/trainer.hpp"

namespace adaroute {

namespace detail {

inline std::uint64_t fnv1a64(const std::vector<unsigned char>& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

inline void append_doubles(std::vector<unsigned char>& out, const std::vector<double>& v) {
    // payload is little-endian 64-bit reals
    const std::size_t off = out.size();
    out.resize(off + v.size() * sizeof(double));
    std::memcpy(out.data() + off, v.data(), v.size() * sizeof(double));
}

} // namespace detail

// Persists a model (and optionally the optimizer state) as a JSON manifest
// beside one contiguous binary payload of little-endian 64-bit reals.
// `path` is the manifest; the payload lives at path + ".bin".
inline void save_checkpoint(const ModelGraph& g, const RunConfig& cfg, const std::string& path,
                            const AdamW* opt = nullptr, std::size_t steps_done = 0) {
    std::vector<unsigned char> payload;
    json dir = json::array();

    auto add_entry = [&](const std::string& name, const Shape& shape,
                         const std::vector<double>& data, bool frozen) {
        json e;
        e["name"] = name;
        e["shape"] = shape;
        e["offset"] = payload.size();
        e["nbytes"] = data.size() * sizeof(double);
        e["frozen"] = frozen;
        dir.push_back(e);
        detail::append_doubles(payload, data);
    };

    for (const ParamEntry& p : g.params)
        add_entry(p.name, p.tensor.shape(), p.tensor.data(), p.frozen);

    if (opt) {
        std::size_t i = 0;
        for (const ParamEntry& p : g.params) {
            if (p.frozen) continue;
            add_entry("optim.m." + p.name, p.tensor.shape(), opt->moment1(i), false);
            add_entry("optim.v." + p.name, p.tensor.shape(), opt->moment2(i), false);
            ++i;
        }
    }

    json manifest;
    manifest["schema_version"] = 1;
    manifest["payload"] = std::filesystem::path(path).filename().string() + ".bin";
    manifest["payload_hash_fnv1a64"] = detail::hex64(detail::fnv1a64(payload));
    manifest["config"] = to_json(cfg);
    manifest["steps_done"] = steps_done;
    manifest["optimizer_steps"] = opt ? opt->step_count() : 0;
    manifest["has_optimizer"] = opt != nullptr;
    manifest["tensors"] = dir;

    const std::string bin_path = path + ".bin";
    {
        std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot write checkpoint payload: " + bin_path);
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size()));
    }
    {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw ConfigError("cannot write checkpoint manifest: " + path);
        out << manifest.dump(2) << "\n";
    }
}

struct LoadedCheckpoint {
    RunConfig cfg;
    ModelGraph model;
    std::size_t steps_done = 0;
    bool has_optimizer = false;
    std::size_t optimizer_steps = 0;
    // moment vectors keyed like the trainable-parameter order of the model
    std::vector<std::vector<double>> moment1, moment2;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read checkpoint manifest: " + path);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw ConfigError("invalid checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("schema_version", 0) != 1)
        throw ConfigError("checkpoint schema version mismatch; cannot migrate");

    const std::string bin_path =
        (std::filesystem::path(path).parent_path() / manifest.at("payload").get<std::string>())
            .string();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw ConfigError("cannot read checkpoint payload: " + bin_path);
    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bin)),
                                       std::istreambuf_iterator<char>());
    const std::string want = manifest.at("payload_hash_fnv1a64").get<std::string>();
    if (detail::hex64(detail::fnv1a64(payload)) != want)
        throw IntegrityError("checkpoint payload hash mismatch");

    LoadedCheckpoint out;
    out.cfg = config_from_json(manifest.at("config"));
    out.model = build_model(out.cfg);
    out.steps_done = manifest.value("steps_done", 0);
    out.has_optimizer = manifest.value("has_optimizer", false);
    out.optimizer_steps = manifest.value("optimizer_steps", 0);

    auto read_span = [&](std::size_t offset, std::size_t nbytes) {
        if (offset + nbytes > payload.size())
            throw IntegrityError("checkpoint directory overruns the payload");
        std::vector<double> v(nbytes / sizeof(double));
        std::memcpy(v.data(), payload.data() + offset, nbytes);
        return v;
    };

    std::map<std::string, std::vector<double>> moments_m, moments_v;
    for (const json& e : manifest.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const std::size_t offset = e.at("offset").get<std::size_t>();
        const std::size_t nbytes = e.at("nbytes").get<std::size_t>();
        if (name.rfind("optim.m.", 0) == 0) {
            moments_m[name.substr(8)] = read_span(offset, nbytes);
            continue;
        }
        if (name.rfind("optim.v.", 0) == 0) {
            moments_v[name.substr(8)] = read_span(offset, nbytes);
            continue;
        }
        const ParamEntry& p = out.model.find(name);
        std::vector<double> data = read_span(offset, nbytes);
        if (data.size() != p.tensor.size())
            throw IntegrityError("checkpoint tensor " + name + " has wrong extent");
        p.tensor.data() = std::move(data);
    }

    if (out.has_optimizer) {
        for (const ParamEntry& p : out.model.params) {
            if (p.frozen) continue;
            auto im = moments_m.find(p.name);
            auto iv = moments_v.find(p.name);
            if (im == moments_m.end() || iv == moments_v.end())
                throw IntegrityError("checkpoint optimizer state incomplete at " + p.name);
            out.moment1.push_back(im->second);
            out.moment2.push_back(iv->second);
        }
    }
    return out;
}

// Restores optimizer moments saved with the checkpoint into a fresh trainer.
inline void restore_optimizer(Trainer& trainer, const LoadedCheckpoint& ckpt) {
    if (!ckpt.has_optimizer) return;
    AdamW& opt = trainer.optimizer();
    if (opt.n_params() != ckpt.moment1.size())
        throw IntegrityError("optimizer state does not match the trainable set");
    for (std::size_t i = 0; i < ckpt.moment1.size(); ++i) {
        opt.moment1(i) = ckpt.moment1[i];
        opt.moment2(i) = ckpt.moment2[i];
    }
    opt.set_step_count(ckpt.optimizer_steps);
    trainer.set_steps_done(ckpt.steps_done);
}

} // namespace adaroute
