#pragma once

// Measurement models pluggable into the ELBO: the production point-spread
// camera and a linear map used by the linear-Gaussian oracle tests.

#include <Eigen/Dense>

#include "vse/autodiff.hpp"
#include "vse/camera.hpp"

namespace vse {

struct CameraMeasurement {
    camera::Config cfg;
    camera::Grid grid;

    CameraMeasurement() : CameraMeasurement(camera::Config{}) {}
    explicit CameraMeasurement(const camera::Config& c) : cfg(c), grid(camera::pixel_grid(c)) {}

    int dim() const { return cfg.pixels(); }
    int state_dim() const { return 3; }

    Eigen::VectorXd apply_value(const Eigen::VectorXd& x) const {
        return camera::measure_clean(Eigen::Vector3d(x), cfg, grid);
    }
    ad::Var apply_ad(ad::Tape& tape, ad::Var x) const { return tape.camera_project(x); }
};

struct LinearMeasurement {
    Eigen::MatrixXd H;

    LinearMeasurement() = default;
    explicit LinearMeasurement(Eigen::MatrixXd h) : H(std::move(h)) {}

    int dim() const { return static_cast<int>(H.rows()); }
    int state_dim() const { return static_cast<int>(H.cols()); }

    Eigen::VectorXd apply_value(const Eigen::VectorXd& x) const { return H * x; }
    ad::Var apply_ad(ad::Tape& tape, ad::Var x) const {
        return tape.matvec(tape.leaf_mat(H), static_cast<int>(H.rows()),
                           static_cast<int>(H.cols()), x);
    }
};

}  // namespace vse
