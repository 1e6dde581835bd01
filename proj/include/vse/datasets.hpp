#pragma once

// Dataset generation (Lorenz trajectories through the camera at a target
// SMNR) and the checksummed binary container. States travel with the file for
// evaluation only; an audit counter exposes whether anything read them.

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vse/camera.hpp"
#include "vse/errors.hpp"
#include "vse/io.hpp"
#include "vse/lorenz.hpp"

namespace vse::data {

using json = nlohmann::json;

inline constexpr char kMagic[8] = {'V', 'S', 'E', 'D', 'A', 'T', 'A', '\0'};
inline constexpr std::uint32_t kFormatVersion = 1;

// Stream-id layout for generation: trajectory attempt k of sequence i draws
// from (k << 32) | i; measurement noise of sequence i from (1 << 48) | i.
inline constexpr std::uint64_t kNoiseStreamTag = 1ull << 48;

namespace detail {

struct AuditCounter {
    mutable std::atomic<std::uint64_t> value{0};
    AuditCounter() = default;
    AuditCounter(const AuditCounter& o) : value(o.value.load()) {}
    AuditCounter& operator=(const AuditCounter& o) {
        value.store(o.value.load());
        return *this;
    }
};

}  // namespace detail

class SequenceDataset {
public:
    SequenceDataset() = default;
    SequenceDataset(std::vector<Eigen::MatrixXd> measurements,
                    std::vector<Eigen::MatrixXd> states, json meta)
        : measurements_(std::move(measurements)), states_(std::move(states)),
          meta_(std::move(meta)) {
        if (!states_.empty() && states_.size() != measurements_.size())
            throw ContractError("SequenceDataset: states/measurements count mismatch");
    }

    int num_sequences() const { return static_cast<int>(measurements_.size()); }
    int seq_len() const { return measurements_.empty() ? 0 : static_cast<int>(measurements_[0].rows()); }
    int meas_dim() const { return measurements_.empty() ? 0 : static_cast<int>(measurements_[0].cols()); }
    bool has_states() const { return !states_.empty(); }
    int state_dim() const { return has_states() ? static_cast<int>(states_[0].cols()) : 0; }

    const std::vector<Eigen::MatrixXd>& measurements() const { return measurements_; }
    const Eigen::MatrixXd& measurements(int i) const { return measurements_.at(i); }

    // Evaluation-only section; every access is counted so the unsupervised
    // boundary can be audited.
    const Eigen::MatrixXd& states(int i) const {
        audit_.value.fetch_add(1, std::memory_order_relaxed);
        return states_.at(i);
    }
    std::vector<Eigen::MatrixXd> all_states() const {
        std::vector<Eigen::MatrixXd> out;
        out.reserve(states_.size());
        for (int i = 0; i < static_cast<int>(states_.size()); ++i) out.push_back(states(i));
        return out;
    }
    std::uint64_t state_reads() const { return audit_.value.load(); }
    void reset_state_read_audit() const { audit_.value.store(0); }

    const json& meta() const { return meta_; }
    json& meta() { return meta_; }

private:
    // Serialization bypasses the audit counter; it is not an evaluation read.
    friend void save(const SequenceDataset& ds, const std::string& path);

    std::vector<Eigen::MatrixXd> measurements_;
    std::vector<Eigen::MatrixXd> states_;
    json meta_;
    detail::AuditCounter audit_;
};

inline json lorenz_config_to_json(const lorenz::Config& c) {
    return json{{"delta", c.delta},
                {"sigma_e2", c.sigma_e2},
                {"taylor_order", c.taylor_order},
                {"x0", {c.x0(0), c.x0(1), c.x0(2)}},
                {"burn_in", c.burn_in}};
}

inline lorenz::Config lorenz_config_from_json(const json& j) {
    lorenz::Config c;
    c.delta = j.at("delta");
    c.sigma_e2 = j.at("sigma_e2");
    c.taylor_order = j.at("taylor_order");
    const auto& x0 = j.at("x0");
    c.x0 << x0.at(0).get<double>(), x0.at(1).get<double>(), x0.at(2).get<double>();
    c.burn_in = j.at("burn_in");
    return c;
}

inline json camera_config_to_json(const camera::Config& c) {
    return json{{"res_x", c.res_x},     {"res_y", c.res_y},   {"x_min", c.x_min},
                {"x_max", c.x_max},     {"y_min", c.y_min},   {"y_max", c.y_max},
                {"amplitude", c.amplitude}, {"depth_floor", c.depth_floor}};
}

inline camera::Config camera_config_from_json(const json& j) {
    camera::Config c;
    c.res_x = j.at("res_x");
    c.res_y = j.at("res_y");
    c.x_min = j.at("x_min");
    c.x_max = j.at("x_max");
    c.y_min = j.at("y_min");
    c.y_max = j.at("y_max");
    c.amplitude = j.at("amplitude");
    c.depth_floor = j.at("depth_floor");
    return c;
}

// Simulates n_seq trajectories on distinct substreams, calibrates the
// measurement noise on the generated clean set, then adds noise. A diverged
// simulation is retried on the next attempt substream and recorded in meta.
inline SequenceDataset generate(int n_seq, int T, double target_smnr_db,
                                const lorenz::Config& lz, const camera::Config& cam,
                                std::uint64_t seed) {
    if (n_seq < 1 || T < 1) throw ContractError("data::generate: n_seq and T must be >= 1");
    cam.validate();
    const camera::Grid grid = camera::pixel_grid(cam);

    std::vector<Eigen::MatrixXd> states(n_seq), clean(n_seq);
    json regenerated = json::array();
    for (int i = 0; i < n_seq; ++i) {
        for (std::uint64_t attempt = 0;; ++attempt) {
            const std::uint64_t sid = (attempt << 32) | static_cast<std::uint64_t>(i);
            try {
                states[i] = lorenz::simulate(lz, T, RngStream(seed, sid)).states;
                if (attempt > 0) regenerated.push_back({{"sequence", i}, {"attempts", attempt}});
                break;
            } catch (const SimulationDiverged&) {
                if (attempt > 64) throw;
            }
        }
        Eigen::MatrixXd h(T, cam.pixels());
        for (int t = 0; t < T; ++t)
            h.row(t) = camera::measure_clean(states[i].row(t).transpose(), cam, grid).transpose();
        clean[i] = std::move(h);
    }

    const double sigma_w2 = camera::calibrate_sigma_w(clean, target_smnr_db);
    std::vector<Eigen::MatrixXd> meas(n_seq);
    const double sigma = std::sqrt(sigma_w2);
    for (int i = 0; i < n_seq; ++i) {
        RngStream noise(seed, kNoiseStreamTag | static_cast<std::uint64_t>(i));
        meas[i] = clean[i];
        for (int t = 0; t < T; ++t)
            for (int k = 0; k < cam.pixels(); ++k) meas[i](t, k) += sigma * noise.normal();
    }

    json meta{{"seed", seed},
              {"n_seq", n_seq},
              {"t_len", T},
              {"target_smnr_db", target_smnr_db},
              {"sigma_w2", sigma_w2},
              {"lorenz", lorenz_config_to_json(lz)},
              {"camera", camera_config_to_json(cam)},
              {"regenerated", regenerated},
              {"states_are", "ground_truth_for_evaluation_only"}};
    return SequenceDataset(std::move(meas), std::move(states), std::move(meta));
}

// Binary layout: magic, version u32, N/T/n/m u64, flags u32 (bit0 states),
// row-major f64 payload per sequence, trailing CRC64. Meta rides in a JSON
// sidecar at path + ".json".
inline void save(const SequenceDataset& ds, const std::string& path) {
    io::ChecksumWriter w(path);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kFormatVersion);
    w.u64(static_cast<std::uint64_t>(ds.num_sequences()));
    w.u64(static_cast<std::uint64_t>(ds.seq_len()));
    w.u64(static_cast<std::uint64_t>(ds.meas_dim()));
    w.u64(static_cast<std::uint64_t>(ds.state_dim()));
    w.u32(ds.has_states() ? 1u : 0u);
    for (int i = 0; i < ds.num_sequences(); ++i) {
        const Eigen::MatrixXd& m = ds.measurements(i);
        for (Eigen::Index t = 0; t < m.rows(); ++t)
            for (Eigen::Index k = 0; k < m.cols(); ++k) w.f64(m(t, k));
    }
    if (ds.has_states()) {
        for (const Eigen::MatrixXd& m : ds.states_)
            for (Eigen::Index t = 0; t < m.rows(); ++t)
                for (Eigen::Index k = 0; k < m.cols(); ++k) w.f64(m(t, k));
    }
    w.finish_with_crc();

    std::ofstream side(path + ".json");
    if (!side) throw FileFormatError("cannot write meta sidecar for " + path);
    side << ds.meta().dump(2) << "\n";
}

inline SequenceDataset load(const std::string& path) {
    io::ChecksumReader r(path);
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw FileFormatError("not a VSEDATA file: " + path);
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw VersionError("unsupported VSEDATA version " + std::to_string(version));
    const auto n_seq = static_cast<int>(r.u64());
    const auto t_len = static_cast<int>(r.u64());
    const auto n = static_cast<int>(r.u64());
    const auto m = static_cast<int>(r.u64());
    const std::uint32_t flags = r.u32();

    std::vector<Eigen::MatrixXd> meas(n_seq), states;
    for (int i = 0; i < n_seq; ++i) {
        meas[i].resize(t_len, n);
        for (int t = 0; t < t_len; ++t)
            for (int k = 0; k < n; ++k) r.f64_array(&meas[i](t, k), 1);
    }
    if (flags & 1u) {
        states.resize(n_seq);
        for (int i = 0; i < n_seq; ++i) {
            states[i].resize(t_len, m);
            for (int t = 0; t < t_len; ++t)
                for (int k = 0; k < m; ++k) r.f64_array(&states[i](t, k), 1);
        }
    }
    r.verify_trailing_crc();

    json meta;
    std::ifstream side(path + ".json");
    if (side) side >> meta;
    return SequenceDataset(std::move(meas), std::move(states), std::move(meta));
}

}  // namespace vse::data
