#pragma once

// The known nonlinear measurement system: a Gaussian point-spread camera that
// projects a 3-D state onto a fixed pixel grid, plus SMNR calibration of the
// additive measurement noise.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "vse/errors.hpp"
#include "vse/mathcore.hpp"

namespace vse::camera {

struct Config {
    int res_x = 8;
    int res_y = 8;
    double x_min = -30.0, x_max = 30.0;
    double y_min = -40.0, y_max = 40.0;
    double amplitude = 10.0;
    double depth_floor = 1e-3;  // clamp for the x3 depth in the exponent

    int pixels() const { return res_x * res_y; }

    void validate() const {
        if (res_x < 2 || res_y < 2) throw ContractError("camera::Config: resolution must be >= 2");
        if (!(x_max > x_min) || !(y_max > y_min))
            throw ContractError("camera::Config: ranges must have positive width");
        if (!(amplitude > 0.0)) throw ContractError("camera::Config: amplitude must be positive");
        if (!(depth_floor > 0.0)) throw ContractError("camera::Config: depth_floor must be positive");
    }
};

using Grid = Eigen::Matrix<double, Eigen::Dynamic, 2>;

// Inclusive-endpoint grid, y-major then x, fixed for serialization:
// pixel i sits at (x_min + (i % res_x) * dx, y_min + (i / res_x) * dy).
inline Grid pixel_grid(const Config& cfg) {
    cfg.validate();
    const double dx = (cfg.x_max - cfg.x_min) / (cfg.res_x - 1);
    const double dy = (cfg.y_max - cfg.y_min) / (cfg.res_y - 1);
    Grid g(cfg.pixels(), 2);
    for (int iy = 0; iy < cfg.res_y; ++iy)
        for (int ix = 0; ix < cfg.res_x; ++ix) {
            g(iy * cfg.res_x + ix, 0) = cfg.x_min + ix * dx;
            g(iy * cfg.res_x + ix, 1) = cfg.y_min + iy * dy;
        }
    return g;
}

// h_i = amplitude * exp(-||g_i - (x1,x2)||^2 / (2 * max(x3, depth_floor))).
inline Eigen::VectorXd measure_clean(const Eigen::Vector3d& x, const Config& cfg,
                                     const Grid& grid) {
    const double depth = std::max(x(2), cfg.depth_floor);
    Eigen::VectorXd h(grid.rows());
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
        const double d0 = grid(i, 0) - x(0);
        const double d1 = grid(i, 1) - x(1);
        h(i) = cfg.amplitude * std::exp(-(d0 * d0 + d1 * d1) / (2.0 * depth));
    }
    return h;
}

inline Eigen::VectorXd measure_clean(const Eigen::Vector3d& x, const Config& cfg) {
    return measure_clean(x, cfg, pixel_grid(cfg));
}

inline Eigen::VectorXd measure_noisy(const Eigen::Vector3d& x, const Config& cfg, double sigma_w2,
                                     RngStream& stream) {
    if (sigma_w2 < 0.0) throw ContractError("measure_noisy: sigma_w2 must be >= 0");
    Eigen::VectorXd y = measure_clean(x, cfg);
    const double sigma = std::sqrt(sigma_w2);
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += sigma * stream.normal();
    return y;
}

namespace detail {

// 10*log10 of the temporal signal power sum_t ||h_t - mean_t(h)||^2 for one
// sequence of clean measurements (T x n).
inline double signal_power_db(const Eigen::MatrixXd& clean) {
    const Eigen::RowVectorXd mean = clean.colwise().mean();
    const double power = (clean.rowwise() - mean).squaredNorm();
    if (!(power > 0.0))
        throw DegenerateSignal("SMNR undefined: clean sequence has zero temporal variance");
    return 10.0 * std::log10(power);
}

inline double mean_signal_power_db(const std::vector<Eigen::MatrixXd>& clean_set) {
    if (clean_set.empty()) throw ContractError("SMNR: empty clean measurement set");
    double acc = 0.0;
    for (const auto& seq : clean_set) acc += signal_power_db(seq);
    return acc / static_cast<double>(clean_set.size());
}

}  // namespace detail

// Returns sigma_w2 such that the measured SMNR of the set equals the target.
// The SMNR per sequence is 10*log10(sum_t ||h_t - mean(h)||^2 / (n*sigma_w2)),
// averaged over sequences; the inversion is exact because sigma_w2 only
// scales the denominator.
inline double calibrate_sigma_w(const std::vector<Eigen::MatrixXd>& clean_set,
                                double target_smnr_db) {
    const double mean_db = detail::mean_signal_power_db(clean_set);
    const Eigen::Index n = clean_set.front().cols();
    return std::pow(10.0, (mean_db - target_smnr_db) / 10.0) / static_cast<double>(n);
}

}  // namespace vse::camera
