#pragma once

// Bootstrap particle filter: transition-prior proposal, log-domain weights,
// systematic resampling below an ESS threshold. Model-aware baseline given
// the true Lorenz and camera models.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "vse/camera.hpp"
#include "vse/errors.hpp"
#include "vse/lorenz.hpp"
#include "vse/mathcore.hpp"

namespace vse::pf {

struct Cloud {
    Eigen::MatrixXd particles;    // P x m
    Eigen::VectorXd log_weights;  // length P

    int count() const { return static_cast<int>(particles.rows()); }
};

// Particles from N([0,0,25], 20^2 I), covering the attractor support.
inline Cloud init(int P, RngStream& stream) {
    if (P < 1) throw ContractError("pf::init: P must be >= 1");
    Cloud c;
    c.particles.resize(P, 3);
    const Eigen::Vector3d mean(0.0, 0.0, 25.0);
    for (int p = 0; p < P; ++p)
        for (int k = 0; k < 3; ++k) c.particles(p, k) = mean(k) + 20.0 * stream.normal();
    c.log_weights = Eigen::VectorXd::Constant(P, -std::log(static_cast<double>(P)));
    return c;
}

inline double logsumexp(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

// Standard systematic scheme with offsets (u + k) / P; copy counts deviate
// from P * w_j by at most one.
inline std::vector<int> systematic_resample(const Eigen::VectorXd& weights, double u) {
    const int P = static_cast<int>(weights.size());
    if (P < 1) throw ContractError("systematic_resample: empty weights");
    if (!(u >= 0.0 && u < 1.0)) throw ContractError("systematic_resample: u must be in [0,1)");
    std::vector<int> idx(P);
    double cumulative = weights(0);
    int j = 0;
    for (int k = 0; k < P; ++k) {
        const double pos = (u + k) / static_cast<double>(P);
        while (cumulative <= pos && j < P - 1) {
            ++j;
            cumulative += weights(j);
        }
        idx[k] = j;
    }
    return idx;
}

struct StepResult {
    Eigen::VectorXd estimate;  // weighted particle mean before any resampling
    double ess = 0.0;
    bool resampled = false;
};

// One bootstrap update against arbitrary transition/likelihood callables.
// propagate(row, stream) advances one particle in place; loglik(row) scores
// it. Particles are processed in index order so results are deterministic.
template <class Propagate, class LogLik>
StepResult step_generic(Cloud& cloud, Propagate&& propagate, LogLik&& loglik,
                        RngStream& stream) {
    const int P = cloud.count();
    for (int p = 0; p < P; ++p) {
        Eigen::VectorXd row = cloud.particles.row(p).transpose();
        propagate(row, stream);
        cloud.particles.row(p) = row.transpose();
        cloud.log_weights(p) += loglik(row);
    }
    const double lse = logsumexp(cloud.log_weights);
    if (!std::isfinite(lse))
        throw DegenerateFilter("particle filter: all weights underflowed");
    cloud.log_weights.array() -= lse;

    const Eigen::VectorXd w = cloud.log_weights.array().exp();
    StepResult r;
    r.estimate = cloud.particles.transpose() * w;
    r.ess = 1.0 / w.squaredNorm();
    if (r.ess < P / 2.0) {
        const auto idx = systematic_resample(w, stream.uniform01());
        Eigen::MatrixXd resampled(P, cloud.particles.cols());
        for (int k = 0; k < P; ++k) resampled.row(k) = cloud.particles.row(idx[k]);
        cloud.particles = std::move(resampled);
        cloud.log_weights.setConstant(-std::log(static_cast<double>(P)));
        r.resampled = true;
    }
    return r;
}

// Production step: Lorenz transition prior, camera likelihood.
inline StepResult step(Cloud& cloud, const Eigen::VectorXd& y, const lorenz::Config& lz,
                       const camera::Config& cam, double sigma_w2, RngStream& stream) {
    const camera::Grid grid = camera::pixel_grid(cam);
    const double sigma_e = std::sqrt(lz.sigma_e2);
    auto propagate = [&](Eigen::VectorXd& x, RngStream& s) {
        Eigen::Vector3d noise(sigma_e * s.normal(), sigma_e * s.normal(), sigma_e * s.normal());
        x = lorenz::step(Eigen::Vector3d(x), noise, lz);
    };
    auto loglik = [&](const Eigen::VectorXd& x) {
        return gaussian_logpdf_iso(y, camera::measure_clean(Eigen::Vector3d(x), cam, grid),
                                   sigma_w2);
    };
    return step_generic(cloud, propagate, loglik, stream);
}

// Full filtering pass; returns the T x 3 weighted-mean trajectory.
inline Eigen::MatrixXd run(const Eigen::MatrixXd& y_seq, const lorenz::Config& lz,
                           const camera::Config& cam, double sigma_w2, int P, RngStream stream) {
    if (y_seq.rows() < 1) throw ContractError("pf::run: empty measurement sequence");
    const camera::Grid grid = camera::pixel_grid(cam);
    const double sigma_e = std::sqrt(lz.sigma_e2);
    Cloud cloud = init(P, stream);
    Eigen::MatrixXd est(y_seq.rows(), 3);
    for (Eigen::Index t = 0; t < y_seq.rows(); ++t) {
        const Eigen::VectorXd y = y_seq.row(t).transpose();
        auto propagate = [&](Eigen::VectorXd& x, RngStream& s) {
            Eigen::Vector3d noise(sigma_e * s.normal(), sigma_e * s.normal(),
                                  sigma_e * s.normal());
            x = lorenz::step(Eigen::Vector3d(x), noise, lz);
        };
        auto loglik = [&](const Eigen::VectorXd& x) {
            return gaussian_logpdf_iso(y, camera::measure_clean(Eigen::Vector3d(x), cam, grid),
                                       sigma_w2);
        };
        est.row(t) = step_generic(cloud, propagate, loglik, stream).estimate.transpose();
    }
    return est;
}

}  // namespace vse::pf
