#pragma once

// Metrics and the NMSE-versus-SMNR experiment harness. The NMSE operates on
// elementwise absolute values, making it blind to the camera's mirror-image
// ambiguity.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "vse/camera.hpp"
#include "vse/checkpoint.hpp"
#include "vse/datasets.hpp"
#include "vse/errors.hpp"
#include "vse/particle_filter.hpp"
#include "vse/vse.hpp"

namespace vse::eval {

// NMSE in dB, or the tagged "exact" outcome when the numerator is zero
// (never a raw -inf).
struct NmseDb {
    bool exact = false;
    double db = std::numeric_limits<double>::quiet_NaN();

    std::string to_string() const {
        if (exact) return "exact";
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", db);
        return buf;
    }
};

struct Result {
    NmseDb nmse;
    std::vector<NmseDb> per_sequence;
    double smnr_db = std::numeric_limits<double>::quiet_NaN();
    double inference_seconds = std::numeric_limits<double>::quiet_NaN();
};

// Per sequence: 10*log10( sum_t ||abs(x_t) - abs(xhat_t)||^2 / sum_t ||x_t||^2 ),
// averaged over sequences. No global sign alignment is attempted.
inline Result nmse_db(const std::vector<Eigen::MatrixXd>& truth,
                      const std::vector<Eigen::MatrixXd>& estimates) {
    if (truth.size() != estimates.size() || truth.empty())
        throw ContractError("nmse_db: shape mismatch or empty input");
    Result r;
    double acc = 0.0;
    bool any_exact = false;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i].rows() != estimates[i].rows() || truth[i].cols() != estimates[i].cols())
            throw ContractError("nmse_db: sequence shape mismatch");
        const double den = truth[i].squaredNorm();
        if (!(den > 0.0)) throw DegenerateMetric("nmse_db: zero-energy truth sequence");
        const double num = (truth[i].cwiseAbs() - estimates[i].cwiseAbs()).squaredNorm();
        NmseDb v;
        if (num == 0.0) {
            v.exact = true;
            any_exact = true;
        } else {
            v.db = 10.0 * std::log10(num / den);
            acc += v.db;
        }
        r.per_sequence.push_back(v);
    }
    if (any_exact) {
        r.nmse.exact = true;  // the mean with a -inf term is -inf
    } else {
        r.nmse.db = acc / static_cast<double>(truth.size());
    }
    return r;
}

// Evaluates the SMNR formula with the temporal-mean estimator; exact inverse
// of camera::calibrate_sigma_w.
inline double measured_smnr_db(const std::vector<Eigen::MatrixXd>& clean_set, double sigma_w2) {
    if (!(sigma_w2 > 0.0)) throw ContractError("measured_smnr_db: sigma_w2 must be positive");
    const double mean_db = camera::detail::mean_signal_power_db(clean_set);
    const Eigen::Index n = clean_set.front().cols();
    return mean_db - 10.0 * std::log10(static_cast<double>(n) * sigma_w2);
}

// ----- NMSE-versus-SMNR sweep ------------------------------------------------

struct SweepConfig {
    std::vector<double> smnr_list;
    std::map<double, std::string> vse_checkpoints;  // SMNR -> checkpoint path
    int pf_particles = 500;
    int n_test = 20;
    int t_test = 200;
    std::uint64_t seed = 1;
    lorenz::Config lorenz;
    camera::Config camera;
};

struct SweepRow {
    double smnr_db;
    std::string method;
    NmseDb nmse;
    double seconds;
    std::uint64_t seed;
};

inline std::vector<SweepRow> sweep(const SweepConfig& cfg) {
    std::vector<SweepRow> rows;
    for (std::size_t si = 0; si < cfg.smnr_list.size(); ++si) {
        const double smnr = cfg.smnr_list[si];
        const auto it = cfg.vse_checkpoints.find(smnr);
        if (it == cfg.vse_checkpoints.end())
            throw ContractError("sweep: missing VSE checkpoint for SMNR " + std::to_string(smnr) +
                                " dB");
        auto loaded = ckpt::load(it->second);

        const std::uint64_t set_seed = cfg.seed + si;
        data::SequenceDataset test =
            data::generate(cfg.n_test, cfg.t_test, smnr, cfg.lorenz, cfg.camera, set_seed);
        const double sigma_w2 = test.meta().at("sigma_w2");
        const auto truth = test.all_states();

        {
            std::vector<Eigen::MatrixXd> est;
            const auto t0 = std::chrono::steady_clock::now();
            for (int i = 0; i < test.num_sequences(); ++i)
                est.push_back(infer(loaded.model, test.measurements(i)).estimates);
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            rows.push_back({smnr, "vse", nmse_db(truth, est).nmse, secs, set_seed});
        }
        {
            std::vector<Eigen::MatrixXd> est;
            const auto t0 = std::chrono::steady_clock::now();
            for (int i = 0; i < test.num_sequences(); ++i)
                est.push_back(pf::run(test.measurements(i), cfg.lorenz, cfg.camera, sigma_w2,
                                      cfg.pf_particles,
                                      RngStream(set_seed, 0x9F1Eull << 32 | static_cast<std::uint64_t>(i))));
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            rows.push_back({smnr, "pf", nmse_db(truth, est).nmse, secs, set_seed});
        }
    }
    return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FileFormatError("cannot write sweep CSV: " + path);
    out << "smnr_db,method,nmse_db,seconds,seed\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.6g", r.smnr_db);
        out << buf << "," << r.method << "," << r.nmse.to_string() << ",";
        std::snprintf(buf, sizeof buf, "%.6f", r.seconds);
        out << buf << "," << r.seed << "\n";
    }
}

}  // namespace vse::eval
