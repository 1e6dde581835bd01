#include <catch_amalgamated.hpp>

#include "test_helpers.hpp"
#include "vse/lorenz.hpp"

using namespace vse;
using Catch::Approx;

TEST_CASE("transition matrix structure at x1 = 0") {
    lorenz::Config cfg;
    const Eigen::Matrix3d f = lorenz::transition_matrix(Eigen::Vector3d(0.0, 5.0, -3.0), cfg);
    // zero coupling leaves the third axis decoupled
    CHECK(f(1, 2) == 0.0);
    CHECK(f(2, 1) == 0.0);
    CHECK(f(0, 2) == 0.0);
    CHECK(f(2, 0) == 0.0);
    const Eigen::Matrix3d direct =
        taylor_expm<Eigen::Matrix3d>(cfg.delta * lorenz::coupling_matrix(0.0), cfg.taylor_order);
    CHECK((f - direct).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("transition matrix order 5 close to order 9") {
    lorenz::Config cfg5, cfg9;
    cfg9.taylor_order = 9;
    RngStream rng(2, 0);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        Eigen::Vector3d x(50.0 * (rng.uniform01() - 0.5), rng.normal(), rng.normal());
        const Eigen::Matrix3d d =
            lorenz::transition_matrix(x, cfg5) - lorenz::transition_matrix(x, cfg9);
        worst = std::max(worst, d.cwiseAbs().maxCoeff());
    }
    // oracle-measured truncation gap for this family is ~9.4e-6 worst case
    CHECK(worst < 2e-5);
}

TEST_CASE("transition matrix tends to identity as delta -> 0") {
    lorenz::Config cfg;
    cfg.delta = 1e-8;
    const Eigen::Matrix3d f = lorenz::transition_matrix(Eigen::Vector3d(7.0, -3.0, 20.0), cfg);
    CHECK((f - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("step fixes the origin and is deterministic") {
    lorenz::Config cfg;
    const Eigen::Vector3d zero = Eigen::Vector3d::Zero();
    CHECK(lorenz::step(zero, zero, cfg).cwiseAbs().maxCoeff() == 0.0);

    const Eigen::Vector3d x(0.4, -1.2, 9.0);
    CHECK((lorenz::step(x, zero, cfg) - lorenz::step(x, zero, cfg)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("step agrees with an RK4 integration of the continuous system") {
    lorenz::Config cfg;  // delta 0.02
    const Eigen::Vector3d x0(1.0, 1.0, 1.0);
    const Eigen::Vector3d discrete = lorenz::step(x0, Eigen::Vector3d::Zero(), cfg);
    const Eigen::Vector3d reference = testutil::lorenz_rk4(x0, cfg.delta, 3);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(discrete(k) - reference(k)) < 1e-3);
}

TEST_CASE("simulate is reproducible and noise-free runs are deterministic") {
    lorenz::Config cfg;
    cfg.sigma_e2 = 0.0;
    const auto a = lorenz::simulate(cfg, 200, RngStream(1, 1));
    const auto b = lorenz::simulate(cfg, 200, RngStream(1, 1));
    CHECK((a.states - b.states).cwiseAbs().maxCoeff() == 0.0);

    cfg.sigma_e2 = 0.1;
    const auto c = lorenz::simulate(cfg, 5, RngStream(1, 1));
    const auto d = lorenz::simulate(cfg, 5, RngStream(1, 2));
    CHECK(c.states.row(0) != d.states.row(0));
}

TEST_CASE("simulate prefix property") {
    lorenz::Config cfg;
    const auto full = lorenz::simulate(cfg, 300, RngStream(9, 4));
    const auto prefix = lorenz::simulate(cfg, 120, RngStream(9, 4));
    CHECK((full.states.topRows(120) - prefix.states).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("stochastic trajectories stay inside the attractor box") {
    lorenz::Config cfg;  // sigma_e2 = 0.1
    const auto traj = lorenz::simulate(cfg, 1000, RngStream(2024, 0));
    CHECK(traj.states.col(0).cwiseAbs().maxCoeff() <= 25.0);
    CHECK(traj.states.col(1).cwiseAbs().maxCoeff() <= 30.0);
    CHECK(traj.states.col(2).minCoeff() >= -5.0);
    CHECK(traj.states.col(2).maxCoeff() <= 55.0);
}

TEST_CASE("deterministic long run keeps the classic attractor statistic") {
    lorenz::Config cfg;
    cfg.sigma_e2 = 0.0;
    const auto traj = lorenz::simulate(cfg, 10000, RngStream(0, 0));
    const double mean_x3 = traj.states.col(2).mean();
    CHECK(mean_x3 > 20.0);
    CHECK(mean_x3 < 30.0);
}

TEST_CASE("burn-in discards leading steps") {
    lorenz::Config with_burn;
    with_burn.burn_in = 50;
    lorenz::Config no_burn;
    const auto burned = lorenz::simulate(with_burn, 100, RngStream(5, 5));
    const auto full = lorenz::simulate(no_burn, 150, RngStream(5, 5));
    CHECK((burned.states - full.states.bottomRows(100)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("divergence guard reports the step") {
    lorenz::Config cfg;
    cfg.delta = 1.0;  // wildly unstable discretization
    cfg.x0 << 30.0, 30.0, 30.0;
    try {
        lorenz::simulate(cfg, 100, RngStream(1, 1));
        FAIL("expected SimulationDiverged");
    } catch (const SimulationDiverged& e) {
        CHECK(e.step >= 0);
    }
}
