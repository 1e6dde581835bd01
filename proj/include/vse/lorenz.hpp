#pragma once

// Ground-truth generator: the stochastic Lorenz system discretized with a
// truncated-Taylor matrix exponential. Used for dataset generation and by the
// particle filter; the learned estimator never sees it.

#include <Eigen/Dense>

#include <cstdint>
#include <utility>

#include "vse/errors.hpp"
#include "vse/mathcore.hpp"

namespace vse::lorenz {

struct Config {
    double delta = 0.02;      // step size in seconds
    double sigma_e2 = 0.1;    // process-noise variance per axis (-10 dB)
    int taylor_order = 5;
    Eigen::Vector3d x0{1.0, 1.0, 1.0};
    int burn_in = 0;

    void validate() const {
        if (!(delta > 0.0)) throw ContractError("lorenz::Config: delta must be positive");
        if (sigma_e2 < 0.0) throw ContractError("lorenz::Config: sigma_e2 must be >= 0");
        if (taylor_order < 1) throw ContractError("lorenz::Config: taylor_order must be >= 1");
    }
};

struct Trajectory {
    Eigen::MatrixXd states;  // T x 3
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
};

// State-dependent coupling matrix; A(x) * x equals the continuous Lorenz
// right-hand side with the classic (10, 28, 8/3) parameters.
inline Eigen::Matrix3d coupling_matrix(double x1) {
    Eigen::Matrix3d a;
    a << -10.0, 10.0, 0.0,
          28.0, -1.0, -x1,
           0.0,   x1, -8.0 / 3.0;
    return a;
}

inline Eigen::Matrix3d transition_matrix(const Eigen::Vector3d& x, const Config& cfg) {
    return taylor_expm<Eigen::Matrix3d>(cfg.delta * coupling_matrix(x(0)), cfg.taylor_order);
}

inline Eigen::Vector3d step(const Eigen::Vector3d& x, const Eigen::Vector3d& noise,
                            const Config& cfg) {
    return transition_matrix(x, cfg) * x + noise;
}

// Runs the discrete map for burn_in + T steps, drawing process noise from the
// stream (three normals per step), and returns the last T states.
inline Trajectory simulate(const Config& cfg, int T, RngStream stream) {
    cfg.validate();
    if (T < 1) throw ContractError("lorenz::simulate: T must be >= 1");

    const double sigma_e = std::sqrt(cfg.sigma_e2);
    Trajectory out;
    out.states.resize(T, 3);
    out.seed = stream.seed();
    out.stream_id = stream.stream_id();

    Eigen::Vector3d x = cfg.x0;
    const int total = cfg.burn_in + T;
    for (int t = 0; t < total; ++t) {
        Eigen::Vector3d e;
        e << sigma_e * stream.normal(), sigma_e * stream.normal(), sigma_e * stream.normal();
        x = step(x, e, cfg);
        if (!x.allFinite() || x.cwiseAbs().maxCoeff() > 1e6) throw SimulationDiverged(t);
        if (t >= cfg.burn_in) out.states.row(t - cfg.burn_in) = x.transpose();
    }
    return out;
}

}  // namespace vse::lorenz
