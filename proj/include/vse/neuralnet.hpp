#pragma once

// The learnable machinery shared by both estimation networks: a stacked GRU,
// a fully-connected Gaussian head, and the Adam optimizer. The forward pass
// is templated over an engine so the plain evaluation path and the tape
// (gradient) path share one arithmetic source.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "vse/autodiff.hpp"
#include "vse/errors.hpp"
#include "vse/mathcore.hpp"

namespace vse::nn {

struct GruLayerParams {
    Eigen::MatrixXd Wz, Wr, Wh;  // input paths, hidden x in
    Eigen::MatrixXd Uz, Ur, Uh;  // hidden paths, hidden x hidden
    Eigen::VectorXd bz, br, bh;
};

struct HeadParams {
    Eigen::MatrixXd W1;             // head_hidden x gru_hidden
    Eigen::VectorXd b1;
    Eigen::MatrixXd Wmean, Wvar;    // out x head_hidden
    Eigen::VectorXd bmean, braw_var;
};

// Weights of one network: GRU stack plus Gaussian head. The raw-variance
// output passes through softplus and the variance floor, so beliefs are
// always valid.
struct GruStackParams {
    int input_dim = 0;
    int hidden_dim = 0;
    int head_hidden = 0;
    int output_dim = 0;
    std::vector<GruLayerParams> layers;
    HeadParams head;

    static GruStackParams zeros(int input, int hidden, int num_layers, int head_hidden, int out) {
        GruStackParams p;
        p.input_dim = input;
        p.hidden_dim = hidden;
        p.head_hidden = head_hidden;
        p.output_dim = out;
        p.layers.resize(num_layers);
        for (int l = 0; l < num_layers; ++l) {
            const int in = l == 0 ? input : hidden;
            auto& lay = p.layers[l];
            lay.Wz = Eigen::MatrixXd::Zero(hidden, in);
            lay.Wr = Eigen::MatrixXd::Zero(hidden, in);
            lay.Wh = Eigen::MatrixXd::Zero(hidden, in);
            lay.Uz = Eigen::MatrixXd::Zero(hidden, hidden);
            lay.Ur = Eigen::MatrixXd::Zero(hidden, hidden);
            lay.Uh = Eigen::MatrixXd::Zero(hidden, hidden);
            lay.bz = Eigen::VectorXd::Zero(hidden);
            lay.br = Eigen::VectorXd::Zero(hidden);
            lay.bh = Eigen::VectorXd::Zero(hidden);
        }
        p.head.W1 = Eigen::MatrixXd::Zero(head_hidden, hidden);
        p.head.b1 = Eigen::VectorXd::Zero(head_hidden);
        p.head.Wmean = Eigen::MatrixXd::Zero(out, head_hidden);
        p.head.bmean = Eigen::VectorXd::Zero(out);
        p.head.Wvar = Eigen::MatrixXd::Zero(out, head_hidden);
        p.head.braw_var = Eigen::VectorXd::Zero(out);
        return p;
    }

    // Weights uniform in +-1/sqrt(fan_in), biases zero, except the
    // raw-variance bias which is set so the initial belief std equals
    // init_belief_std. Beliefs must start broad enough to cover the state
    // range, otherwise the reconstruction gradient underflows and training
    // stalls at the trivial optimum.
    static GruStackParams init(int input, int hidden, int num_layers, int head_hidden, int out,
                               RngStream& rng, double init_belief_std = 15.0) {
        GruStackParams p = zeros(input, hidden, num_layers, head_hidden, out);
        auto fill = [&rng](Eigen::MatrixXd& m) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols()));
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                for (Eigen::Index r = 0; r < m.rows(); ++r)
                    m(r, c) = bound * (2.0 * rng.uniform01() - 1.0);
        };
        for (auto& lay : p.layers) {
            fill(lay.Wz);
            fill(lay.Wr);
            fill(lay.Wh);
            fill(lay.Uz);
            fill(lay.Ur);
            fill(lay.Uh);
        }
        fill(p.head.W1);
        fill(p.head.Wmean);
        fill(p.head.Wvar);
        const double v = init_belief_std * init_belief_std;
        // inverse softplus: softplus(x) = v  =>  x = log(expm1(v))
        const double raw = v > 30.0 ? v : std::log(std::expm1(v));
        p.head.braw_var.setConstant(raw);
        return p;
    }

    int num_layers() const { return static_cast<int>(layers.size()); }
};

struct TensorView {
    std::string name;
    double* data;
    Eigen::Index rows, cols;
    Eigen::Index size() const { return rows * cols; }
};

// Canonical enumeration order for checkpointing, Adam state and tape
// binding. bind_to_tape below must create leaves in exactly this order.
inline std::vector<TensorView> param_views(GruStackParams& p, const std::string& prefix = "") {
    std::vector<TensorView> out;
    auto add = [&out](const std::string& name, Eigen::MatrixXd& m) {
        out.push_back({name, m.data(), m.rows(), m.cols()});
    };
    auto addv = [&out](const std::string& name, Eigen::VectorXd& v) {
        out.push_back({name, v.data(), v.size(), 1});
    };
    for (int l = 0; l < p.num_layers(); ++l) {
        const std::string base = prefix + "l" + std::to_string(l) + ".";
        auto& lay = p.layers[l];
        add(base + "Wz", lay.Wz);
        add(base + "Wr", lay.Wr);
        add(base + "Wh", lay.Wh);
        add(base + "Uz", lay.Uz);
        add(base + "Ur", lay.Ur);
        add(base + "Uh", lay.Uh);
        addv(base + "bz", lay.bz);
        addv(base + "br", lay.br);
        addv(base + "bh", lay.bh);
    }
    add(prefix + "head.W1", p.head.W1);
    addv(prefix + "head.b1", p.head.b1);
    add(prefix + "head.Wmean", p.head.Wmean);
    addv(prefix + "head.bmean", p.head.bmean);
    add(prefix + "head.Wvar", p.head.Wvar);
    addv(prefix + "head.braw_var", p.head.braw_var);
    return out;
}

// ----- engine-templated forward pass --------------------------------------

struct AdEngine {
    ad::Tape& tape;
    using Vec = ad::Var;
    using Mat = ad::Var;

    Mat mat(const Eigen::MatrixXd& m) { return tape.leaf_mat(m); }
    Vec vec(const Eigen::VectorXd& v) { return tape.leaf(v); }
    Vec zeros(Eigen::Index n) { return tape.leaf(Eigen::VectorXd::Zero(n)); }
    Vec matvec(Mat w, int rows, int cols, Vec x) { return tape.matvec(w, rows, cols, x); }
    Vec add(Vec a, Vec b) { return tape.add(a, b); }
    Vec hadamard(Vec a, Vec b) { return tape.hadamard(a, b); }
    Vec sigmoid(Vec a) { return tape.sigmoid(a); }
    Vec tanh(Vec a) { return tape.tanh(a); }
    Vec relu(Vec a) { return tape.relu(a); }
    Vec softplus(Vec a) { return tape.softplus(a); }
    Vec add_const(Vec a, double c) { return tape.add_const(a, c); }
    Vec lerp(Vec gate, Vec b, Vec c) { return tape.lerp(gate, b, c); }
};

struct ValueEngine {
    using Vec = Eigen::VectorXd;
    using Mat = const Eigen::MatrixXd*;

    Mat mat(const Eigen::MatrixXd& m) { return &m; }
    Vec vec(const Eigen::VectorXd& v) { return v; }
    Vec zeros(Eigen::Index n) { return Eigen::VectorXd::Zero(n); }
    Vec matvec(Mat w, int, int, const Vec& x) { return (*w) * x; }
    Vec add(const Vec& a, const Vec& b) { return a + b; }
    Vec hadamard(const Vec& a, const Vec& b) { return a.cwiseProduct(b); }
    Vec sigmoid(const Vec& a) {
        return a.unaryExpr([](double x) { return ad::stable_sigmoid(x); });
    }
    Vec tanh(const Vec& a) { return a.array().tanh(); }
    Vec relu(const Vec& a) { return a.cwiseMax(0.0); }
    Vec softplus(const Vec& a) {
        return a.unaryExpr([](double x) { return ad::stable_softplus(x); });
    }
    Vec add_const(const Vec& a, double c) { return (a.array() + c).matrix(); }
    Vec lerp(const Vec& gate, const Vec& b, const Vec& c) {
        return gate.cwiseProduct(b) + (1.0 - gate.array()).matrix().cwiseProduct(c);
    }
};

// Network parameters bound into an engine. For AdEngine the bound matrices
// are tape leaves whose gradients are read back after the reverse sweep.
template <class E>
struct BoundGru {
    struct Layer {
        typename E::Mat Wz, Wr, Wh, Uz, Ur, Uh;
        typename E::Vec bz, br, bh;
        int in = 0, hidden = 0;
    };
    std::vector<Layer> layers;
    typename E::Mat W1, Wmean, Wvar;
    typename E::Vec b1, bmean, braw_var;
    int hidden_dim = 0, head_hidden = 0, output_dim = 0;

    static BoundGru bind(E& e, const GruStackParams& p) {
        BoundGru b;
        b.hidden_dim = p.hidden_dim;
        b.head_hidden = p.head_hidden;
        b.output_dim = p.output_dim;
        for (const auto& lay : p.layers) {
            Layer bl;
            bl.in = static_cast<int>(lay.Wz.cols());
            bl.hidden = static_cast<int>(lay.Wz.rows());
            bl.Wz = e.mat(lay.Wz);
            bl.Wr = e.mat(lay.Wr);
            bl.Wh = e.mat(lay.Wh);
            bl.Uz = e.mat(lay.Uz);
            bl.Ur = e.mat(lay.Ur);
            bl.Uh = e.mat(lay.Uh);
            bl.bz = e.vec(lay.bz);
            bl.br = e.vec(lay.br);
            bl.bh = e.vec(lay.bh);
            b.layers.push_back(std::move(bl));
        }
        b.W1 = e.mat(p.head.W1);
        b.b1 = e.vec(p.head.b1);
        b.Wmean = e.mat(p.head.Wmean);
        b.bmean = e.vec(p.head.bmean);
        b.Wvar = e.mat(p.head.Wvar);
        b.braw_var = e.vec(p.head.braw_var);
        return b;
    }

    // Hidden state per layer; starts at zero.
    std::vector<typename E::Vec> initial_state(E& e) const {
        std::vector<typename E::Vec> h;
        for (const auto& l : layers) h.push_back(e.zeros(l.hidden));
        return h;
    }

    // One GRU step through the stack; updates the per-layer hidden states and
    // returns the top hidden state. Gates: z = sigm(Wz x + Uz h + bz),
    // r = sigm(Wr x + Ur h + br), cand = tanh(Wh x + Uh (r.*h) + bh),
    // h' = z .* h + (1-z) .* cand.
    typename E::Vec advance(E& e, std::vector<typename E::Vec>& state,
                            typename E::Vec input) const {
        typename E::Vec x = input;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const Layer& lay = layers[l];
            typename E::Vec h = state[l];
            auto z = e.sigmoid(e.add(
                e.add(e.matvec(lay.Wz, lay.hidden, lay.in, x), e.matvec(lay.Uz, lay.hidden, lay.hidden, h)),
                lay.bz));
            auto r = e.sigmoid(e.add(
                e.add(e.matvec(lay.Wr, lay.hidden, lay.in, x), e.matvec(lay.Ur, lay.hidden, lay.hidden, h)),
                lay.br));
            auto rh = e.hadamard(r, h);
            auto cand = e.tanh(e.add(
                e.add(e.matvec(lay.Wh, lay.hidden, lay.in, x), e.matvec(lay.Uh, lay.hidden, lay.hidden, rh)),
                lay.bh));
            typename E::Vec hnew = e.lerp(z, h, cand);
            state[l] = hnew;
            x = hnew;
        }
        return x;
    }

    // hidden -> relu FC -> (mean, var = softplus(raw) + floor)
    std::pair<typename E::Vec, typename E::Vec> head(E& e, typename E::Vec top) const {
        auto a1 = e.relu(e.add(e.matvec(W1, head_hidden, hidden_dim, top), b1));
        auto mean = e.add(e.matvec(Wmean, output_dim, head_hidden, a1), bmean);
        auto raw = e.add(e.matvec(Wvar, output_dim, head_hidden, a1), braw_var);
        auto var = e.add_const(e.softplus(raw), kVarianceFloor);
        return {mean, var};
    }
};

// ----- concrete (value-engine) entry points --------------------------------

// Runs the stack over a T x n input matrix; returns the T x hidden outputs of
// the top layer. Causal: row t depends only on rows 0..t.
inline Eigen::MatrixXd gru_forward(const GruStackParams& p, const Eigen::MatrixXd& inputs) {
    if (inputs.cols() != p.input_dim) throw ContractError("gru_forward: input dimension mismatch");
    ValueEngine e;
    auto bound = BoundGru<ValueEngine>::bind(e, p);
    auto state = bound.initial_state(e);
    Eigen::MatrixXd out(inputs.rows(), p.hidden_dim);
    for (Eigen::Index t = 0; t < inputs.rows(); ++t)
        out.row(t) = bound.advance(e, state, inputs.row(t).transpose()).transpose();
    return out;
}

inline GaussianBelief gaussian_head(const GruStackParams& p, const Eigen::VectorXd& hidden) {
    if (hidden.size() != p.hidden_dim) throw ContractError("gaussian_head: hidden size mismatch");
    ValueEngine e;
    auto bound = BoundGru<ValueEngine>::bind(e, p);
    auto [mean, var] = bound.head(e, hidden);
    return GaussianBelief(std::move(mean), std::move(var));
}

// ----- Adam ----------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<Eigen::VectorXd> m, v;  // aligned with the views order

    static AdamState like(const std::vector<TensorView>& views) {
        AdamState s;
        for (const auto& t : views) {
            s.m.push_back(Eigen::VectorXd::Zero(t.size()));
            s.v.push_back(Eigen::VectorXd::Zero(t.size()));
        }
        return s;
    }
};

inline void adam_step(std::vector<TensorView>& params, const std::vector<TensorView>& grads,
                      AdamState& s, double lr) {
    if (params.size() != grads.size() || params.size() != s.m.size())
        throw ContractError("adam_step: parameter/gradient/state count mismatch");
    s.step += 1;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].size() != grads[i].size())
            throw ContractError("adam_step: shape mismatch for " + params[i].name);
        double* p = params[i].data;
        const double* g = grads[i].data;
        double* m = s.m[i].data();
        double* v = s.v[i].data();
        const Eigen::Index n = params[i].size();
        for (Eigen::Index k = 0; k < n; ++k) {
            m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
            v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] -= lr * mhat / (std::sqrt(vhat) + s.eps);
        }
    }
}

// Global-norm gradient clipping; returns the pre-clip norm.
inline double clip_gradients(std::vector<TensorView>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        sq += Eigen::Map<const Eigen::VectorXd>(g.data, g.size()).squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (auto& g : grads) Eigen::Map<Eigen::VectorXd>(g.data, g.size()) *= scale;
    }
    return norm;
}

// ----- tape binding and gradient extraction --------------------------------

// Leaves created in param_views order so gradients can be pulled back by
// position.
struct TapeBinding {
    BoundGru<AdEngine> net;
    std::vector<ad::Var> leaves;
};

inline TapeBinding bind_to_tape(ad::Tape& tape, const GruStackParams& p) {
    AdEngine e{tape};
    TapeBinding b{BoundGru<AdEngine>::bind(e, p), {}};
    for (const auto& lay : b.net.layers) {
        b.leaves.insert(b.leaves.end(), {lay.Wz, lay.Wr, lay.Wh, lay.Uz, lay.Ur, lay.Uh,
                                         lay.bz, lay.br, lay.bh});
    }
    b.leaves.insert(b.leaves.end(),
                    {b.net.W1, b.net.b1, b.net.Wmean, b.net.bmean, b.net.Wvar, b.net.braw_var});
    return b;
}

// Copies tape gradients into a parameter-shaped structure after a backward
// sweep. Throws TrainingInstability naming the parameter if any gradient is
// non-finite.
inline void pull_gradients(const ad::Tape& tape, const TapeBinding& binding,
                           GruStackParams& grads_out, const std::string& prefix) {
    auto views = param_views(grads_out, prefix);
    if (views.size() != binding.leaves.size())
        throw ContractError("pull_gradients: binding/view count mismatch");
    for (std::size_t i = 0; i < views.size(); ++i) {
        const Eigen::VectorXd& g = tape.gradient(binding.leaves[i]);
        Eigen::Map<Eigen::VectorXd> dst(views[i].data, views[i].size());
        if (g.size() == 0) {
            dst.setZero();
            continue;
        }
        if (g.size() != views[i].size())
            throw ContractError("pull_gradients: size mismatch for " + views[i].name);
        if (!g.allFinite()) throw TrainingInstability(views[i].name);
        dst = g;
    }
}

}  // namespace vse::nn
