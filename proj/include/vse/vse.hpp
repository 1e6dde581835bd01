#pragma once

// Variational state estimation: a posterior network and a prior network
// trained jointly by maximizing a per-step evidence lower bound from
// measurement-only data. Inference uses the posterior network alone and is
// sampling-free.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "vse/errors.hpp"
#include "vse/mathcore.hpp"
#include "vse/measurement.hpp"
#include "vse/neuralnet.hpp"

namespace vse {

// Stream-id tags keep the independent noise sources of a training run from
// aliasing (all draws still derive from the one user seed).
namespace stream_tag {
inline constexpr std::uint64_t kPriorInit = 1ull << 56;
inline constexpr std::uint64_t kPostInit = 2ull << 56;
inline constexpr std::uint64_t kShuffle = 3ull << 56;
inline constexpr std::uint64_t kValEps = 4ull << 56;
inline constexpr std::uint64_t kTrainEps = 1ull << 62;
}  // namespace stream_tag

template <class M>
struct VseModel {
    nn::GruStackParams prior;  // emits p(x_t | y_{1:t-1})
    nn::GruStackParams post;   // emits q(x_t | y_{1:t})
    M meas;
    double sigma_w2 = 1.0;
    int sample_count = 10;  // reconstruction samples per step during training

    int input_dim() const { return post.input_dim; }
    int state_dim() const { return post.output_dim; }
};

struct ModelConfig {
    int hidden = 80;
    int layers = 2;
    int head_hidden = 128;
    int state_dim = 3;
    int sample_count = 10;
    double init_belief_std = 15.0;
};

template <class M>
VseModel<M> make_model(const M& meas, double sigma_w2, const ModelConfig& cfg,
                       std::uint64_t seed) {
    VseModel<M> model{{}, {}, meas, sigma_w2, cfg.sample_count};
    RngStream prior_rng(seed, stream_tag::kPriorInit);
    RngStream post_rng(seed, stream_tag::kPostInit);
    model.prior = nn::GruStackParams::init(meas.dim(), cfg.hidden, cfg.layers, cfg.head_hidden,
                                           cfg.state_dim, prior_rng, cfg.init_belief_std);
    model.post = nn::GruStackParams::init(meas.dim(), cfg.hidden, cfg.layers, cfg.head_hidden,
                                          cfg.state_dim, post_rng, cfg.init_belief_std);
    return model;
}

// Per-sequence ELBO decomposition; total is the left-to-right sum over steps
// of (recon - kl).
struct ElboReport {
    Eigen::VectorXd recon;
    Eigen::VectorXd kl;
    double total = 0.0;
};

inline ad::Tape make_tape(const CameraMeasurement& meas) { return ad::Tape(meas.cfg); }
inline ad::Tape make_tape(const LinearMeasurement&) { return ad::Tape(); }

namespace detail {

template <class M>
ad::Var meas_apply(nn::AdEngine& e, const M& meas, ad::Var x) {
    return meas.apply_ad(e.tape, x);
}
template <class M>
Eigen::VectorXd meas_apply(nn::ValueEngine&, const M& meas, const Eigen::VectorXd& x) {
    return meas.apply_value(x);
}

// Scalar-term helpers so the same elbo source works for both engines.
inline ad::Var logpdf_iso(nn::AdEngine& e, ad::Var h, const Eigen::VectorXd& y, double var) {
    return e.tape.logpdf_iso(h, e.tape.leaf(y), var);
}
inline double logpdf_iso(nn::ValueEngine&, const Eigen::VectorXd& h, const Eigen::VectorXd& y,
                         double var) {
    return gaussian_logpdf_iso(y, h, var);
}

inline ad::Var kl_term(nn::AdEngine& e, ad::Var qm, ad::Var qv, ad::Var pm, ad::Var pv) {
    return e.tape.kl_diag(qm, qv, pm, pv);
}
inline double kl_term(nn::ValueEngine&, const Eigen::VectorXd& qm, const Eigen::VectorXd& qv,
                      const Eigen::VectorXd& pm, const Eigen::VectorXd& pv) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < qm.size(); ++i) {
        const double dm = qm(i) - pm(i);
        acc += std::log(pv(i) / qv(i)) - 1.0 + qv(i) / pv(i) + dm * dm / pv(i);
    }
    return 0.5 * acc;
}

inline ad::Var reparam(nn::AdEngine& e, ad::Var mean, ad::Var var, const Eigen::VectorXd& eps) {
    return e.tape.add(mean, e.tape.hadamard(e.tape.sqrt(var), e.tape.leaf(eps)));
}
inline Eigen::VectorXd reparam(nn::ValueEngine&, const Eigen::VectorXd& mean,
                               const Eigen::VectorXd& var, const Eigen::VectorXd& eps) {
    return mean + var.cwiseSqrt().cwiseProduct(eps);
}

inline ad::Var sca_add(nn::AdEngine& e, ad::Var a, ad::Var b) { return e.tape.add(a, b); }
inline double sca_add(nn::ValueEngine&, double a, double b) { return a + b; }
inline ad::Var sca_sub(nn::AdEngine& e, ad::Var a, ad::Var b) { return e.tape.sub(a, b); }
inline double sca_sub(nn::ValueEngine&, double a, double b) { return a - b; }
inline ad::Var sca_scale(nn::AdEngine& e, ad::Var a, double c) { return e.tape.scale(a, c); }
inline double sca_scale(nn::ValueEngine&, double a, double c) { return c * a; }
inline double sca_value(nn::AdEngine& e, ad::Var a) { return e.tape.scalar_value(a); }
inline double sca_value(nn::ValueEngine&, double a) { return a; }

template <class E>
struct ElboCoreOut {
    using Sca = std::conditional_t<std::is_same_v<E, nn::AdEngine>, ad::Var, double>;
    Sca total;   // fold over t of (recon_t - kl_t)
    Sca kl_sum;  // fold over t of kl_t
};

// One source of truth for the objective. eps holds T*L vectors in (t, l)
// order. Returns the total-ELBO scalar in the engine's domain and fills the
// per-step report.
template <class E, class M>
ElboCoreOut<E> elbo_core(E& e, const nn::BoundGru<E>& prior_net, const nn::BoundGru<E>& post_net,
                         const M& meas, const Eigen::MatrixXd& y, double sigma_w2, int L,
                         const std::vector<Eigen::VectorXd>& eps, ElboReport* report) {
    const Eigen::Index T = y.rows();
    auto prior_state = prior_net.initial_state(e);
    auto post_state = post_net.initial_state(e);
    if (report) {
        report->recon.resize(T);
        report->kl.resize(T);
    }

    using Sca = typename ElboCoreOut<E>::Sca;
    Sca total{};
    Sca kl_sum{};
    for (Eigen::Index t = 0; t < T; ++t) {
        const Eigen::VectorXd y_t = y.row(t).transpose();
        auto post_top = post_net.advance(e, post_state, e.vec(y_t));
        auto [qm, qv] = post_net.head(e, post_top);

        // The prior at step t sees y_{t-1}; a zero placeholder starts it off.
        auto prior_in = t == 0 ? e.zeros(y.cols()) : e.vec(y.row(t - 1).transpose());
        auto prior_top = prior_net.advance(e, prior_state, prior_in);
        auto [pm, pv] = prior_net.head(e, prior_top);

        Sca recon_acc{};
        for (int l = 0; l < L; ++l) {
            auto x = reparam(e, qm, qv, eps[static_cast<std::size_t>(t) * L + l]);
            auto h = meas_apply(e, meas, x);
            Sca lp = logpdf_iso(e, h, y_t, sigma_w2);
            recon_acc = l == 0 ? lp : sca_add(e, recon_acc, lp);
        }
        Sca recon = sca_scale(e, recon_acc, 1.0 / static_cast<double>(L));
        Sca kl = kl_term(e, qm, qv, pm, pv);
        Sca term = sca_sub(e, recon, kl);
        total = t == 0 ? term : sca_add(e, total, term);
        kl_sum = t == 0 ? kl : sca_add(e, kl_sum, kl);
        if (report) {
            report->recon(t) = sca_value(e, recon);
            report->kl(t) = sca_value(e, kl);
        }
    }
    if (report) report->total = sca_value(e, total);
    return {total, kl_sum};
}

inline std::vector<Eigen::VectorXd> draw_eps(RngStream& stream, Eigen::Index T, int L, int m) {
    std::vector<Eigen::VectorXd> eps;
    eps.reserve(static_cast<std::size_t>(T) * L);
    for (Eigen::Index t = 0; t < T; ++t)
        for (int l = 0; l < L; ++l) eps.push_back(stream.normal_vec(m));
    return eps;
}

}  // namespace detail

// Beliefs q(x_t | y_{1:t}); causal, deterministic, no sampling anywhere.
inline std::vector<GaussianBelief> posterior_sequence(const nn::GruStackParams& psi,
                                                      const Eigen::MatrixXd& y) {
    if (y.cols() != psi.input_dim) throw ContractError("posterior_sequence: input dim mismatch");
    nn::ValueEngine e;
    auto net = nn::BoundGru<nn::ValueEngine>::bind(e, psi);
    auto state = net.initial_state(e);
    std::vector<GaussianBelief> beliefs;
    beliefs.reserve(y.rows());
    for (Eigen::Index t = 0; t < y.rows(); ++t) {
        auto top = net.advance(e, state, y.row(t).transpose());
        auto [mean, var] = net.head(e, top);
        beliefs.emplace_back(std::move(mean), std::move(var));
    }
    return beliefs;
}

// Beliefs p(x_t | y_{1:t-1}); step t consumes y_{t-1}, step 1 a zero vector.
inline std::vector<GaussianBelief> prior_sequence(const nn::GruStackParams& theta,
                                                  const Eigen::MatrixXd& y) {
    if (y.cols() != theta.input_dim) throw ContractError("prior_sequence: input dim mismatch");
    nn::ValueEngine e;
    auto net = nn::BoundGru<nn::ValueEngine>::bind(e, theta);
    auto state = net.initial_state(e);
    std::vector<GaussianBelief> beliefs;
    beliefs.reserve(y.rows());
    for (Eigen::Index t = 0; t < y.rows(); ++t) {
        Eigen::VectorXd in =
            t == 0 ? Eigen::VectorXd::Zero(y.cols()) : Eigen::VectorXd(y.row(t - 1).transpose());
        auto top = net.advance(e, state, in);
        auto [mean, var] = net.head(e, top);
        beliefs.emplace_back(std::move(mean), std::move(var));
    }
    return beliefs;
}

template <class M>
ElboReport elbo(const VseModel<M>& model, const Eigen::MatrixXd& y, RngStream stream) {
    if (y.cols() != model.input_dim()) throw ContractError("elbo: input dim mismatch");
    auto eps = detail::draw_eps(stream, y.rows(), model.sample_count, model.state_dim());
    nn::ValueEngine e;
    auto prior_net = nn::BoundGru<nn::ValueEngine>::bind(e, model.prior);
    auto post_net = nn::BoundGru<nn::ValueEngine>::bind(e, model.post);
    ElboReport report;
    detail::elbo_core(e, prior_net, post_net, model.meas, y, model.sigma_w2, model.sample_count,
                      eps, &report);
    return report;
}

// ELBO plus exact reverse-mode gradients for both networks (overwrites the
// grad structures). Same draw order as elbo(), so values agree bit-for-bit.
// kl_weight < 1 softens the KL term in the optimized objective only; the
// returned report always carries the true ELBO.
template <class M>
ElboReport elbo_with_grad(const VseModel<M>& model, const Eigen::MatrixXd& y, RngStream stream,
                          nn::GruStackParams& dtheta, nn::GruStackParams& dpsi,
                          double kl_weight = 1.0) {
    if (y.cols() != model.input_dim()) throw ContractError("elbo_with_grad: input dim mismatch");
    auto eps = detail::draw_eps(stream, y.rows(), model.sample_count, model.state_dim());

    ad::Tape tape = make_tape(model.meas);
    tape.reserve(64 + static_cast<std::size_t>(y.rows()) * (96 + 6 * model.sample_count));
    nn::AdEngine e{tape};
    auto prior_bind = nn::bind_to_tape(tape, model.prior);
    auto post_bind = nn::bind_to_tape(tape, model.post);

    ElboReport report;
    auto out = detail::elbo_core(e, prior_bind.net, post_bind.net, model.meas, y, model.sigma_w2,
                                 model.sample_count, eps, &report);
    // Objective: mean ELBO per time step (maximized), so the loss root is
    // -total / T. With a softened KL, total + (1 - w) * kl_sum equals
    // recon_sum - w * kl_sum.
    ad::Var objective =
        kl_weight == 1.0 ? out.total
                         : tape.add(out.total, tape.scale(out.kl_sum, 1.0 - kl_weight));
    ad::Var loss = tape.scale(objective, -1.0 / static_cast<double>(y.rows()));
    tape.backward(loss);
    nn::pull_gradients(tape, prior_bind, dtheta, "prior.");
    nn::pull_gradients(tape, post_bind, dpsi, "post.");
    return report;
}

struct InferResult {
    std::vector<GaussianBelief> beliefs;
    Eigen::MatrixXd estimates;  // T x m, the belief means
};

// Inference: the posterior network only; the prior network is not evaluated
// and no RNG is touched.
template <class M>
InferResult infer(const VseModel<M>& model, const Eigen::MatrixXd& y) {
    InferResult r;
    r.beliefs = posterior_sequence(model.post, y);
    r.estimates.resize(y.rows(), model.state_dim());
    for (Eigen::Index t = 0; t < y.rows(); ++t) r.estimates.row(t) = r.beliefs[t].mean.transpose();
    return r;
}

// ----- training -------------------------------------------------------------

struct TrainConfig {
    int epochs = 500;
    int batch_size = 128;
    double lr = 1e-3;
    double lr_floor = 1e-5;
    int lr_patience = 20;          // halve lr after this many non-improving epochs
    int early_stop_patience = 50;  // stop after this many; 0 disables
    double clip_norm = 10.0;
    double val_fraction = 0.1;
    std::uint64_t seed = 0;
    int threads = 1;
    int kl_warmup_epochs = 0;  // ramp the KL weight 0 -> 1 over this many epochs
    int first_epoch = 0;       // for resumed runs, keeps epoch numbering monotone
};

struct EpochLog {
    int epoch;
    double train_elbo;  // mean per-step ELBO over the epoch's training batches
    double val_elbo;
    double lr;
    double grad_norm;  // pre-clip global norm of the last batch
    double wall_s;
};

struct TrainResult {
    std::vector<EpochLog> log;
    bool diverged = false;
    std::string divergence_reason;
    int epochs_run = 0;
};

namespace detail {

template <class M>
struct SeqGradTask {
    const VseModel<M>* model;
    const Eigen::MatrixXd* y;
    RngStream stream;
    double kl_weight;
    nn::GruStackParams dtheta, dpsi;
    double elbo_per_step = 0.0;
    bool failed = false;
    std::string fail_reason;

    void run() {
        try {
            ElboReport rep = elbo_with_grad(*model, *y, stream, dtheta, dpsi, kl_weight);
            elbo_per_step = rep.total / static_cast<double>(y->rows());
        } catch (const TrainingInstability& e) {
            failed = true;
            fail_reason = e.what();
        }
    }
};

}  // namespace detail

// Unsupervised training on measurement sequences. Deterministic given
// (sequences, cfg): gradients are reduced in batch order regardless of thread
// count. On a non-finite loss the parameters roll back to the last completed
// epoch.
template <class M>
TrainResult train(VseModel<M>& model, const std::vector<Eigen::MatrixXd>& sequences,
                  const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = nullptr) {
    if (sequences.empty()) throw ContractError("train: empty dataset");
    const int n_total = static_cast<int>(sequences.size());
    int n_val = cfg.val_fraction > 0.0
                    ? static_cast<int>(std::floor(cfg.val_fraction * n_total))
                    : 0;
    if (n_val == 0 && cfg.val_fraction > 0.0 && n_total >= 2) n_val = 1;
    const int n_train = n_total - n_val;
    if (n_train < 1) throw ContractError("train: no training sequences after validation split");

    auto param_views_all = [&]() {
        auto v = nn::param_views(model.prior, "prior.");
        auto v2 = nn::param_views(model.post, "post.");
        v.insert(v.end(), v2.begin(), v2.end());
        return v;
    };
    auto views = param_views_all();
    nn::AdamState adam = nn::AdamState::like(views);

    const int hidden = model.post.hidden_dim;
    const int layers = model.post.num_layers();
    const int head_hidden = model.post.head_hidden;
    const int m = model.state_dim();
    const int n = model.input_dim();
    auto zero_like = [&] { return nn::GruStackParams::zeros(n, hidden, layers, head_hidden, m); };

    // Mean per-step ELBO over the validation split with epoch-independent
    // draws, so the schedule compares like against like.
    auto eval_val = [&]() {
        double acc = 0.0;
        for (int i = 0; i < n_val; ++i) {
            const Eigen::MatrixXd& y = sequences[n_train + i];
            RngStream s(cfg.seed, stream_tag::kValEps | static_cast<std::uint64_t>(i));
            acc += elbo(model, y, s).total / static_cast<double>(y.rows());
        }
        return n_val > 0 ? acc / n_val : std::numeric_limits<double>::quiet_NaN();
    };

    TrainResult result;
    VseModel<M> snapshot = model;
    double lr = cfg.lr;
    double best_signal = -std::numeric_limits<double>::infinity();
    int lr_stall = 0, stop_stall = 0;

    std::vector<int> order(n_train);
    for (int i = 0; i < n_train; ++i) order[i] = i;

    for (int epoch = cfg.first_epoch; epoch < cfg.first_epoch + cfg.epochs; ++epoch) {
        const auto t_start = std::chrono::steady_clock::now();
        const double kl_weight =
            cfg.kl_warmup_epochs > 0
                ? std::min(1.0, static_cast<double>(epoch + 1) / cfg.kl_warmup_epochs)
                : 1.0;

        // Seeded Fisher-Yates shuffle of the training order.
        RngStream shuffle_rng(cfg.seed, stream_tag::kShuffle | static_cast<std::uint64_t>(epoch));
        for (int i = n_train - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.uniform01() * (i + 1));
            std::swap(order[i], order[j]);
        }

        double epoch_elbo = 0.0;
        double last_grad_norm = 0.0;
        bool bad_epoch = false;
        std::string bad_reason;

        for (int start = 0; start < n_train && !bad_epoch; start += cfg.batch_size) {
            const int count = std::min(cfg.batch_size, n_train - start);
            std::vector<detail::SeqGradTask<M>> tasks;
            tasks.reserve(count);
            for (int k = 0; k < count; ++k) {
                const int seq_idx = order[start + k];
                const std::uint64_t sid =
                    stream_tag::kTrainEps |
                    (static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(n_total) +
                     static_cast<std::uint64_t>(seq_idx));
                tasks.push_back({&model, &sequences[seq_idx], RngStream(cfg.seed, sid), kl_weight,
                                 zero_like(), zero_like()});
            }

            if (cfg.threads <= 1 || count == 1) {
                for (auto& t : tasks) t.run();
            } else {
                std::atomic<int> next{0};
                auto worker = [&] {
                    for (;;) {
                        const int i = next.fetch_add(1);
                        if (i >= count) return;
                        tasks[i].run();
                    }
                };
                std::vector<std::thread> pool;
                const int k_threads = std::min(cfg.threads, count);
                pool.reserve(k_threads);
                for (int i = 0; i < k_threads; ++i) pool.emplace_back(worker);
                for (auto& th : pool) th.join();
            }

            // Ordered reduction: fold gradients in batch order so results do
            // not depend on the thread count.
            nn::GruStackParams dtheta = zero_like(), dpsi = zero_like();
            auto acc_theta = nn::param_views(dtheta);
            auto acc_psi = nn::param_views(dpsi);
            double batch_elbo = 0.0;
            for (auto& t : tasks) {
                if (t.failed) {
                    bad_epoch = true;
                    bad_reason = t.fail_reason;
                    break;
                }
                batch_elbo += t.elbo_per_step;
                auto vt = nn::param_views(t.dtheta);
                auto vp = nn::param_views(t.dpsi);
                for (std::size_t i = 0; i < vt.size(); ++i)
                    Eigen::Map<Eigen::VectorXd>(acc_theta[i].data, acc_theta[i].size()) +=
                        Eigen::Map<const Eigen::VectorXd>(vt[i].data, vt[i].size());
                for (std::size_t i = 0; i < vp.size(); ++i)
                    Eigen::Map<Eigen::VectorXd>(acc_psi[i].data, acc_psi[i].size()) +=
                        Eigen::Map<const Eigen::VectorXd>(vp[i].data, vp[i].size());
            }
            if (bad_epoch) break;
            batch_elbo /= count;
            if (!std::isfinite(batch_elbo)) {
                bad_epoch = true;
                bad_reason = "non-finite batch loss";
                break;
            }
            epoch_elbo += batch_elbo * count;

            auto grad_views = nn::param_views(dtheta, "prior.");
            auto gp = nn::param_views(dpsi, "post.");
            grad_views.insert(grad_views.end(), gp.begin(), gp.end());
            for (auto& g : grad_views)
                Eigen::Map<Eigen::VectorXd>(g.data, g.size()) /= static_cast<double>(count);
            last_grad_norm = nn::clip_gradients(grad_views, cfg.clip_norm);
            nn::adam_step(views, grad_views, adam, lr);
        }

        if (bad_epoch) {
            model = snapshot;  // last good checkpoint
            result.diverged = true;
            result.divergence_reason =
                bad_reason.empty() ? "non-finite loss" : bad_reason;
            break;
        }

        const double train_elbo = epoch_elbo / n_train;
        const double val_elbo = eval_val();
        const double signal = n_val > 0 ? val_elbo : train_elbo;
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

        EpochLog log{epoch, train_elbo, val_elbo, lr, last_grad_norm, wall};
        result.log.push_back(log);
        result.epochs_run = epoch - cfg.first_epoch + 1;
        if (on_epoch) on_epoch(log);
        snapshot = model;

        // The schedule only starts once the optimized objective is the true
        // ELBO; warm-up epochs are not comparable.
        if (kl_weight >= 1.0) {
            if (signal > best_signal) {
                best_signal = signal;
                lr_stall = 0;
                stop_stall = 0;
            } else {
                ++lr_stall;
                ++stop_stall;
                if (lr_stall >= cfg.lr_patience && lr > cfg.lr_floor) {
                    lr = std::max(lr / 2.0, cfg.lr_floor);
                    lr_stall = 0;
                }
                if (cfg.early_stop_patience > 0 && stop_stall >= cfg.early_stop_patience) break;
            }
        }
    }
    return result;
}

}  // namespace vse
