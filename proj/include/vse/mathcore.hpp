#pragma once

// Gaussian primitives, KL divergence, truncated matrix exponential and the
// counter-based random stream used everywhere else. All operations are pure;
// RngStream values must not be shared mutably across threads.

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdint>

#include "vse/errors.hpp"

namespace vse {

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kLog2Pi = 1.8378770664093454836;

// Diagonal-covariance Gaussian over the state.
struct GaussianBelief {
    Eigen::VectorXd mean;
    Eigen::VectorXd var_diag;

    GaussianBelief() = default;
    GaussianBelief(Eigen::VectorXd m, Eigen::VectorXd v)
        : mean(std::move(m)), var_diag(std::move(v)) {
        if (mean.size() != var_diag.size())
            throw ContractError("GaussianBelief: mean and var_diag length mismatch");
    }

    // Clamps the variance to the floor instead of trusting the caller.
    static GaussianBelief floored(Eigen::VectorXd m, Eigen::VectorXd v) {
        v = v.cwiseMax(kVarianceFloor);
        return GaussianBelief(std::move(m), std::move(v));
    }

    Eigen::Index dim() const { return mean.size(); }

    bool valid() const {
        return mean.size() == var_diag.size() && mean.allFinite() && var_diag.allFinite() &&
               (var_diag.array() >= kVarianceFloor).all();
    }
};

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
    z += kGolden;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::atomic<std::uint64_t>& rng_draw_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

}  // namespace detail

// Counter-based random stream: output i is a pure function of
// (seed, stream_id, i), so identical streams reproduce identical draws
// bit-exactly and distinct stream ids never alias.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id)
        : seed_(seed), stream_id_(stream_id), counter_(0) {
        key_ = detail::mix64(detail::mix64(seed) ^ (stream_id * 0xD2B74407B1CE6E93ull + 1));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    // Uniform on [0,1), one counter slot.
    double uniform01() {
        detail::rng_draw_counter().fetch_add(1, std::memory_order_relaxed);
        return static_cast<double>(next_raw() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; consumes two counter slots.
    double normal() {
        detail::rng_draw_counter().fetch_add(1, std::memory_order_relaxed);
        const double u1 = (static_cast<double>(next_raw() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
        const double u2 = static_cast<double>(next_raw() >> 11) * 0x1.0p-53;          // [0,1)
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    Eigen::VectorXd normal_vec(Eigen::Index count) {
        Eigen::VectorXd out(count);
        for (Eigen::Index i = 0; i < count; ++i) out(i) = normal();
        return out;
    }

    // Global count of uniform/normal draws since process start. Used to audit
    // that inference performs no sampling.
    static std::uint64_t total_draws() {
        return detail::rng_draw_counter().load(std::memory_order_relaxed);
    }

private:
    std::uint64_t next_raw() {
        const std::uint64_t block = detail::mix64(detail::mix64(key_ + counter_) + key_);
        ++counter_;
        return block;
    }

    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t key_;
    std::uint64_t counter_;
};

inline Eigen::VectorXd rng_normal(RngStream& stream, Eigen::Index count) {
    return stream.normal_vec(count);
}

// log N(y; mean, diag(var_diag)), evaluated in the log domain.
inline double gaussian_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean,
                              const Eigen::VectorXd& var_diag) {
    if (y.size() != mean.size() || y.size() != var_diag.size())
        throw ContractError("gaussian_logpdf: dimension mismatch");
    if (!(var_diag.array() > 0.0).all())
        throw DomainError("gaussian_logpdf: variance entries must be strictly positive");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double d = y(i) - mean(i);
        acc += kLog2Pi + std::log(var_diag(i)) + d * d / var_diag(i);
    }
    return -0.5 * acc;
}

// Overload for isotropic noise, the common case in the reconstruction term.
inline double gaussian_logpdf_iso(const Eigen::VectorXd& y, const Eigen::VectorXd& mean,
                                  double var) {
    if (y.size() != mean.size()) throw ContractError("gaussian_logpdf: dimension mismatch");
    if (!(var > 0.0)) throw DomainError("gaussian_logpdf: variance must be strictly positive");
    const double sq = (y - mean).squaredNorm();
    return -0.5 * (static_cast<double>(y.size()) * (kLog2Pi + std::log(var)) + sq / var);
}

// D_KL(q || p) for diagonal Gaussians, exact closed form.
inline double kl_gauss_diag(const GaussianBelief& q, const GaussianBelief& p) {
    if (q.dim() != p.dim()) throw ContractError("kl_gauss_diag: dimension mismatch");
    if (!q.valid() || !p.valid()) throw DomainError("kl_gauss_diag: invalid belief");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < q.dim(); ++i) {
        const double qv = q.var_diag(i), pv = p.var_diag(i);
        const double dm = q.mean(i) - p.mean(i);
        acc += std::log(pv / qv) - 1.0 + qv / pv + dm * dm / pv;
    }
    return 0.5 * acc;
}

// Truncated Taylor series sum_{j=0..order} A^j / j!.
template <class Mat>
Mat taylor_expm(const Mat& a, int order) {
    if (order < 0) throw ContractError("taylor_expm: order must be >= 0");
    Mat acc = Mat::Identity(a.rows(), a.cols());
    Mat term = Mat::Identity(a.rows(), a.cols());
    for (int j = 1; j <= order; ++j) {
        term = (term * a / static_cast<double>(j)).eval();
        acc += term;
    }
    return acc;
}

// mean + sqrt(var) .* eps, the reparameterized draw.
inline Eigen::VectorXd reparam_sample(const GaussianBelief& belief, const Eigen::VectorXd& eps) {
    if (eps.size() != belief.dim()) throw ContractError("reparam_sample: eps length mismatch");
    return belief.mean + belief.var_diag.cwiseSqrt().cwiseProduct(eps);
}

}  // namespace vse
