#include <catch_amalgamated.hpp>

#include <cmath>

#include "test_helpers.hpp"
#include "vse/lorenz.hpp"
#include "vse/mathcore.hpp"

using namespace vse;
using Catch::Approx;

TEST_CASE("gaussian_logpdf matches closed form") {
    Eigen::VectorXd y1(1), m1(1), v1(1);
    y1 << 0.0;
    m1 << 0.0;
    v1 << 1.0;
    CHECK(gaussian_logpdf(y1, m1, v1) == Approx(-0.91893853320467274).epsilon(1e-12));

    Eigen::VectorXd y64 = Eigen::VectorXd::Zero(64);
    Eigen::VectorXd v64 = Eigen::VectorXd::Ones(64);
    CHECK(gaussian_logpdf(y64, y64, v64) == Approx(-58.812066125099055).epsilon(1e-12));

    y1 << 2.0;
    v1 << 4.0;
    CHECK(gaussian_logpdf(y1, m1, v1) == Approx(-2.1120857137646181).epsilon(1e-12));

    // isotropic overload agrees with the general one
    Eigen::VectorXd y(5), m(5);
    for (int i = 0; i < 5; ++i) {
        y(i) = 0.3 * i - 1.0;
        m(i) = 0.1 * i;
    }
    CHECK(gaussian_logpdf_iso(y, m, 2.5) ==
          Approx(gaussian_logpdf(y, m, Eigen::VectorXd::Constant(5, 2.5))).epsilon(1e-14));
}

TEST_CASE("gaussian_logpdf input validation") {
    Eigen::VectorXd y(2), m(2), v(2);
    y.setZero();
    m.setZero();
    v << 1.0, -1.0;
    CHECK_THROWS_AS(gaussian_logpdf(y, m, v), DomainError);
    Eigen::VectorXd m3 = Eigen::VectorXd::Zero(3);
    v << 1.0, 1.0;
    CHECK_THROWS_AS(gaussian_logpdf(y, m3, v), ContractError);
}

TEST_CASE("gaussian_logpdf integrates to one in 1-D") {
    // Simpson quadrature over +-10 sigma.
    const double mean = 0.7, var = 2.3;
    const double sigma = std::sqrt(var);
    const int n = 4000;  // even
    const double a = mean - 10.0 * sigma, b = mean + 10.0 * sigma;
    const double h = (b - a) / n;
    auto pdf = [&](double x) {
        Eigen::VectorXd xv(1), mv(1), vv(1);
        xv << x;
        mv << mean;
        vv << var;
        return std::exp(gaussian_logpdf(xv, mv, vv));
    };
    double acc = pdf(a) + pdf(b);
    for (int i = 1; i < n; ++i) acc += pdf(a + i * h) * (i % 2 ? 4.0 : 2.0);
    CHECK(acc * h / 3.0 == Approx(1.0).epsilon(1e-6));
}

TEST_CASE("kl_gauss_diag closed-form examples") {
    Eigen::VectorXd mu(3);
    mu << 2.0, 0.0, 0.0;  // ||mu||^2 = 4
    GaussianBelief q(mu, Eigen::VectorXd::Ones(3));
    GaussianBelief p(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3));
    CHECK(kl_gauss_diag(q, q) == 0.0);
    CHECK(kl_gauss_diag(q, p) == Approx(2.0).epsilon(1e-12));

    GaussianBelief q0(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3));
    GaussianBelief p2(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Constant(3, 2.0));
    CHECK(kl_gauss_diag(q0, p2) == Approx(0.28972077083991796).epsilon(1e-12));

    GaussianBelief p4(Eigen::VectorXd::Zero(4), Eigen::VectorXd::Ones(4));
    CHECK_THROWS_AS(kl_gauss_diag(q0, p4), ContractError);
}

TEST_CASE("kl_gauss_diag is nonnegative, zero iff equal") {
    RngStream rng(11, 0);
    for (int rep = 0; rep < 200; ++rep) {
        Eigen::VectorXd qm = rng.normal_vec(3), pm = rng.normal_vec(3);
        Eigen::VectorXd qv(3), pv(3);
        for (int i = 0; i < 3; ++i) {
            qv(i) = std::exp(rng.normal());
            pv(i) = std::exp(rng.normal());
        }
        GaussianBelief q(qm, qv), p(pm, pv);
        CHECK(kl_gauss_diag(q, p) >= 0.0);
        CHECK(kl_gauss_diag(q, q) <= 1e-12);
    }
}

TEST_CASE("kl_gauss_diag agrees with Monte-Carlo estimate") {
    // E_q[log q - log p] over reparameterized draws; a handful of pairs here,
    // the acceptance suite runs the full hundred.
    RngStream rng(5, 99);
    for (int rep = 0; rep < 5; ++rep) {
        Eigen::VectorXd qm = rng.normal_vec(3);
        Eigen::VectorXd pm = qm + rng.normal_vec(3);
        Eigen::VectorXd qv(3), pv(3);
        for (int i = 0; i < 3; ++i) {
            qv(i) = std::exp(0.5 * rng.normal());
            pv(i) = std::exp(0.5 * rng.normal());
        }
        GaussianBelief q(qm, qv), p(pm, pv);
        const double exact = kl_gauss_diag(q, p);

        RngStream mc(17, 1000 + rep);
        const int n = 1000000;
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            const Eigen::VectorXd x = reparam_sample(q, mc.normal_vec(3));
            acc += gaussian_logpdf(x, q.mean, q.var_diag) - gaussian_logpdf(x, p.mean, p.var_diag);
        }
        const double est = acc / n;
        CHECK(std::abs(est - exact) / std::max(exact, 1e-3) < 0.01);
    }
}

TEST_CASE("taylor_expm basics") {
    Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(3, 3);
    CHECK(taylor_expm(zero, 7).isApprox(Eigen::MatrixXd::Identity(3, 3), 0.0));

    Eigen::MatrixXd one(1, 1);
    one << 1.0;
    CHECK(taylor_expm(one, 5)(0, 0) == Approx(163.0 / 60.0).epsilon(1e-15));

    CHECK_THROWS_AS(taylor_expm(one, -1), ContractError);
}

TEST_CASE("taylor_expm order 5 against scaling-and-squaring oracle") {
    // Oracle-measured truncation for the Lorenz family at delta = 0.02:
    // x1 = 0 gives ~1.8e-5 worst-case elementwise relative error, |x1| <= 25
    // gives ~9.4e-5.
    const Eigen::Matrix3d a0 = 0.02 * lorenz::coupling_matrix(0.0);
    const Eigen::MatrixXd t5 = taylor_expm(Eigen::MatrixXd(a0), 5);
    const Eigen::MatrixXd oracle = testutil::expm_scaling_squaring(a0);
    double worst = 0.0;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            const double den = std::max(std::abs(oracle(r, c)), 1e-12);
            worst = std::max(worst, std::abs(t5(r, c) - oracle(r, c)) / den);
        }
    CHECK(worst < 2.5e-5);

    RngStream rng(3, 0);
    double worst_family = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const double x1 = 50.0 * (rng.uniform01() - 0.5);
        const Eigen::MatrixXd m = 0.02 * lorenz::coupling_matrix(x1);
        const Eigen::MatrixXd t = taylor_expm(m, 5);
        const Eigen::MatrixXd ex = testutil::expm_scaling_squaring(m);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                const double den = std::max(std::abs(ex(r, c)), 1e-12);
                worst_family = std::max(worst_family, std::abs(t(r, c) - ex(r, c)) / den);
            }
    }
    CHECK(worst_family < 1.5e-4);
}

TEST_CASE("taylor_expm error shrinks with order") {
    RngStream rng(4, 0);
    for (int rep = 0; rep < 20; ++rep) {
        const double x1 = 50.0 * (rng.uniform01() - 0.5);
        const Eigen::MatrixXd m = 0.02 * lorenz::coupling_matrix(x1);
        const Eigen::MatrixXd ex = testutil::expm_scaling_squaring(m);
        const double e5 = (taylor_expm(m, 5) - ex).cwiseAbs().maxCoeff();
        const double e9 = (taylor_expm(m, 9) - ex).cwiseAbs().maxCoeff();
        CHECK(e9 < e5);
    }
}

TEST_CASE("reparam_sample") {
    Eigen::VectorXd mean(3);
    mean << 1.0, -2.0, 0.5;
    Eigen::VectorXd var(3);
    var << 0.5, 2.0, 1.0;
    GaussianBelief b(mean, var);

    CHECK(reparam_sample(b, Eigen::VectorXd::Zero(3)) == mean);

    GaussianBelief unit(mean, Eigen::VectorXd::Ones(3));
    Eigen::VectorXd eps(3);
    eps << 0.3, -0.7, 1.1;
    CHECK((reparam_sample(unit, eps) - (mean + eps)).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(reparam_sample(b, Eigen::VectorXd::Zero(2)), ContractError);

    // Monte-Carlo moments within 5 sigma statistical bands.
    RngStream rng(8, 1);
    const int n = 100000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(3), sumsq = Eigen::VectorXd::Zero(3);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd x = reparam_sample(b, rng.normal_vec(3));
        sum += x;
        sumsq += x.cwiseProduct(x);
    }
    for (int k = 0; k < 3; ++k) {
        const double mhat = sum(k) / n;
        const double vhat = sumsq(k) / n - mhat * mhat;
        CHECK(std::abs(mhat - mean(k)) < 5.0 * std::sqrt(var(k) / n));
        CHECK(std::abs(vhat - var(k)) < 5.0 * var(k) * std::sqrt(2.0 / n));
    }
}

TEST_CASE("rng determinism and stream independence") {
    RngStream a(42, 7), b(42, 7);
    const Eigen::VectorXd va = a.normal_vec(1000), vb = b.normal_vec(1000);
    CHECK((va - vb).cwiseAbs().maxCoeff() == 0.0);

    // prefix property: n draws then m more equals n+m draws
    RngStream c(42, 7);
    Eigen::VectorXd first = c.normal_vec(400), second = c.normal_vec(600);
    Eigen::VectorXd joined(1000);
    joined << first, second;
    CHECK((joined - va).cwiseAbs().maxCoeff() == 0.0);

    RngStream d(42, 8);
    CHECK(d.normal() != RngStream(42, 7).normal());
}

TEST_CASE("rng moments within CLT bands") {
    RngStream rng(123, 0);
    const int n = 1000000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sumsq += x * x;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.004);
    CHECK(std::abs(var - 1.0) < 0.006);
}

TEST_CASE("rng cross-stream correlation is small") {
    RngStream a(77, 1), b(77, 2);
    const int n = 100000;
    double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < n; ++i) {
        const double x = a.normal(), y = b.normal();
        sa += x;
        sb += y;
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    const double cov = sab / n - (sa / n) * (sb / n);
    const double corr = cov / std::sqrt((saa / n - sa / n * sa / n) * (sbb / n - sb / n * sb / n));
    CHECK(std::abs(corr) < 0.01);
}

TEST_CASE("belief invariants") {
    CHECK_THROWS_AS(GaussianBelief(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(2)),
                    ContractError);
    auto b = GaussianBelief::floored(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Constant(2, -5.0));
    CHECK(b.var_diag.minCoeff() == kVarianceFloor);
    CHECK(b.valid());
}
