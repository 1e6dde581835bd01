#pragma once

// Parameter checkpoint: magic, version, named tensor table, little-endian
// f64 data, plus a JSON sidecar carrying the architecture and a hash of the
// training configuration.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vse/datasets.hpp"
#include "vse/errors.hpp"
#include "vse/io.hpp"
#include "vse/measurement.hpp"
#include "vse/neuralnet.hpp"
#include "vse/vse.hpp"

namespace vse::ckpt {

using json = nlohmann::json;

inline constexpr char kMagic[8] = {'V', 'S', 'E', 'P', 'A', 'R', 'A', 'M'};
inline constexpr std::uint32_t kFormatVersion = 1;

// FNV-1a over the dumped JSON; good enough to tell two configs apart.
inline std::string config_hash(const json& config) {
    const std::string s = config.dump();
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline json architecture_json(const VseModel<CameraMeasurement>& model) {
    return json{{"input_dim", model.input_dim()},
                {"state_dim", model.state_dim()},
                {"hidden_dim", model.post.hidden_dim},
                {"num_layers", model.post.num_layers()},
                {"head_hidden", model.post.head_hidden},
                {"sample_count", model.sample_count},
                {"sigma_w2", model.sigma_w2},
                {"camera", data::camera_config_to_json(model.meas.cfg)}};
}

inline void save(const std::string& path, VseModel<CameraMeasurement>& model,
                 const json& train_config, int epochs_completed = 0) {
    io::ChecksumWriter w(path);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kFormatVersion);

    auto views = nn::param_views(model.prior, "prior.");
    auto post_views = nn::param_views(model.post, "post.");
    views.insert(views.end(), post_views.begin(), post_views.end());

    w.u32(static_cast<std::uint32_t>(views.size()));
    for (const auto& t : views) {
        w.u32(static_cast<std::uint32_t>(t.name.size()));
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.rows));
        w.u32(static_cast<std::uint32_t>(t.cols));
        w.f64_array(t.data, static_cast<std::size_t>(t.size()));
    }
    w.finish_with_crc();

    json side = architecture_json(model);
    side["train_config"] = train_config;
    side["train_config_hash"] = config_hash(train_config);
    side["epochs_completed"] = epochs_completed;
    std::ofstream out(path + ".json");
    if (!out) throw FileFormatError("cannot write checkpoint sidecar for " + path);
    out << side.dump(2) << "\n";
}

struct Loaded {
    VseModel<CameraMeasurement> model;
    json sidecar;
    int epochs_completed = 0;
};

inline Loaded load(const std::string& path) {
    json side;
    {
        std::ifstream in(path + ".json");
        if (!in) throw FileFormatError("missing checkpoint sidecar: " + path + ".json");
        in >> side;
    }
    const camera::Config cam = data::camera_config_from_json(side.at("camera"));
    VseModel<CameraMeasurement> model{
        nn::GruStackParams::zeros(side.at("input_dim"), side.at("hidden_dim"),
                                  side.at("num_layers"), side.at("head_hidden"),
                                  side.at("state_dim")),
        nn::GruStackParams::zeros(side.at("input_dim"), side.at("hidden_dim"),
                                  side.at("num_layers"), side.at("head_hidden"),
                                  side.at("state_dim")),
        CameraMeasurement(cam), side.at("sigma_w2"), side.at("sample_count")};

    io::ChecksumReader r(path);
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw FileFormatError("not a VSEPARAM file: " + path);
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw VersionError("unsupported VSEPARAM version " + std::to_string(version));

    auto views = nn::param_views(model.prior, "prior.");
    auto post_views = nn::param_views(model.post, "post.");
    views.insert(views.end(), post_views.begin(), post_views.end());

    const std::uint32_t count = r.u32();
    if (count != views.size())
        throw ContractError("checkpoint tensor count does not match architecture");
    for (auto& t : views) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        if (name != t.name) throw ContractError("checkpoint tensor order mismatch at " + name);
        const std::uint32_t rows = r.u32();
        const std::uint32_t cols = r.u32();
        if (rows != static_cast<std::uint32_t>(t.rows) ||
            cols != static_cast<std::uint32_t>(t.cols))
            throw ContractError("checkpoint shape mismatch for " + name);
        r.f64_array(t.data, static_cast<std::size_t>(t.size()));
    }
    r.verify_trailing_crc();

    Loaded out{std::move(model), side, side.value("epochs_completed", 0)};
    return out;
}

}  // namespace vse::ckpt
