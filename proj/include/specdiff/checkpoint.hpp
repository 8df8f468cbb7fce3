#pragma once

// Checkpoint read/write for the model bundle. Kept separate from net.hpp so
// only serialization code pays for the json include.

#include <fstream>

#include "json.hpp"
#include "specdiff/net.hpp"

namespace specdiff::net {

namespace detail {

inline nlohmann::json arch_descriptor(Model& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (const ParamView& p : model.param_views())
        layers.push_back({{"name", p.name}, {"size", p.size}});
    return layers;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta,
                            const std::vector<double>* adam_m = nullptr,
                            const std::vector<double>* adam_v = nullptr) {
    require((adam_m == nullptr) == (adam_v == nullptr),
            "save_checkpoint: optimizer tensors come as a pair");
    nlohmann::json header = {
        {"arch", detail::arch_descriptor(model)},
        {"seed", meta.seed},
        {"step", meta.step},
        {"epoch", meta.epoch},
        {"optimizer", adam_m != nullptr},
    };
    if (!meta.config_json.empty())
        header["config"] = nlohmann::json::parse(meta.config_json);
    std::string hs = header.dump();

    std::string buf;
    buf.append(kCheckpointMagic, 8);
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, std::uint32_t(hs.size()));
    buf += hs;
    size_t n = model.n_params();
    for (const ParamView& p : model.param_views())
        for (size_t i = 0; i < p.size; ++i) detail::put_f64(buf, p.data[i]);
    if (adam_m) {
        require(adam_m->size() == n && adam_v->size() == n,
                "save_checkpoint: optimizer tensor size mismatch");
        for (double d : *adam_m) detail::put_f64(buf, d);
        for (double d : *adam_v) detail::put_f64(buf, d);
    }
    std::uint64_t sum = detail::fnv1a(reinterpret_cast<const unsigned char*>(buf.data()), buf.size());
    detail::put_u64(buf, sum);

    std::ofstream f(path, std::ios::binary);
    require(f.good(), "save_checkpoint: cannot open " + path);
    f.write(buf.data(), std::streamsize(buf.size()));
    require(f.good(), "save_checkpoint: write failed for " + path);
}

inline CheckpointMeta load_checkpoint(const std::string& path, Model& model,
                                      std::vector<double>* adam_m = nullptr,
                                      std::vector<double>* adam_v = nullptr) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "load_checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(buf.size() >= 8 + 4 + 4 + 8, "checkpoint: truncated");

    const unsigned char* raw = reinterpret_cast<const unsigned char*>(buf.data());
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    std::uint64_t stored_le = 0;
    for (int i = 0; i < 8; ++i) stored_le |= std::uint64_t(raw[buf.size() - 8 + i]) << (8 * i);
    require(detail::fnv1a(raw, buf.size() - 8) == stored_le, "checkpoint: checksum mismatch");
    require(std::memcmp(buf.data(), kCheckpointMagic, 8) == 0, "checkpoint: bad magic");

    detail::ByteReader r{raw + 8, buf.size() - 16};
    std::uint32_t version = r.u32();
    require(version == kCheckpointVersion, "checkpoint: unsupported version");
    std::uint32_t hlen = r.u32();
    r.need(hlen);
    nlohmann::json header = nlohmann::json::parse(buf.substr(8 + 8, hlen));
    r.pos += hlen;

    nlohmann::json expect = detail::arch_descriptor(model);
    require(header.at("arch") == expect, "checkpoint: architecture descriptor mismatch");

    CheckpointMeta meta;
    meta.seed = header.at("seed").get<std::uint64_t>();
    meta.step = header.at("step").get<std::int64_t>();
    meta.epoch = header.at("epoch").get<std::int64_t>();
    meta.has_optimizer = header.at("optimizer").get<bool>();
    if (header.contains("config")) meta.config_json = header["config"].dump();
    model.seed = meta.seed;

    for (ParamView p : model.param_views())
        for (size_t i = 0; i < p.size; ++i) p.data[i] = r.f64();
    if (meta.has_optimizer) {
        size_t n = model.n_params();
        if (adam_m == nullptr || adam_v == nullptr) {
            // inference-only load: the optimizer payload is checksummed but unused
            r.pos += 2 * n * sizeof(double);
        } else {
            adam_m->resize(n);
            adam_v->resize(n);
            for (double& d : *adam_m) d = r.f64();
            for (double& d : *adam_v) d = r.f64();
        }
    }
    require(r.pos == r.n, "checkpoint: trailing bytes");
    return meta;
}

}  // namespace specdiff::net
