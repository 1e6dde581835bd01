#pragma once

// Reverse-mode tape over vector-valued nodes. The op set covers exactly what
// the ELBO graph needs; every backward rule is checked against central finite
// differences in the test suite.

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "vse/camera.hpp"
#include "vse/errors.hpp"

namespace vse::ad {

using Vec = Eigen::VectorXd;

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
}

enum class Op : std::uint8_t {
    kLeaf,
    kAdd,        // a + b
    kSub,        // a - b
    kHadamard,   // a .* b
    kMatVec,     // reshape(a, rows x cols) * b
    kSigmoid,
    kTanh,
    kRelu,
    kSoftplus,
    kSqrt,
    kScale,      // scalar * a
    kAddConst,   // a + scalar (elementwise)
    kLerp,       // a .* b + (1 - a) .* c   (gate a, then-branch b, else-branch c)
    kCamera,     // point-spread camera applied to a 3-state
    kLogpdfIso,  // scalar log N(value(b); a, scalar * I)
    kKlDiag,     // scalar KL(N(a, diag b) || N(c, diag d))
};

struct Var {
    int id = -1;
    bool ok() const { return id >= 0; }
};

struct Node {
    Op op = Op::kLeaf;
    int a = -1, b = -1, c = -1, d = -1;
    int rows = 0, cols = 0;  // kMatVec
    double scalar = 0.0;     // kScale / kAddConst / kLogpdfIso variance
    Vec value;
    Vec grad;  // empty until first accumulation
};

class Tape {
public:
    Tape() = default;

    // Graphs containing kCamera nodes need the camera configured up front.
    explicit Tape(const camera::Config& cam) : has_camera_(true), cam_(cam) {
        grid_ = camera::pixel_grid(cam);
    }

    void reserve(std::size_t n) { nodes_.reserve(n); }
    std::size_t size() const { return nodes_.size(); }

    const Vec& value(Var v) const { return nodes_[v.id].value; }
    double scalar_value(Var v) const { return nodes_[v.id].value(0); }

    // Gradient of the last backward() root with respect to node v; empty when
    // the node is not on any path to the root.
    const Vec& gradient(Var v) const { return nodes_[v.id].grad; }

    Var leaf(const Vec& v) { return push(Op::kLeaf, -1, -1, v); }

    // Matrices enter the tape flattened column-major.
    Var leaf_mat(const Eigen::MatrixXd& m) {
        Vec flat = Eigen::Map<const Vec>(m.data(), m.size());
        return push(Op::kLeaf, -1, -1, std::move(flat));
    }

    Var add(Var a, Var b) { return push(Op::kAdd, a.id, b.id, val(a) + val(b)); }
    Var sub(Var a, Var b) { return push(Op::kSub, a.id, b.id, val(a) - val(b)); }
    Var hadamard(Var a, Var b) {
        return push(Op::kHadamard, a.id, b.id, val(a).cwiseProduct(val(b)));
    }

    Var matvec(Var w, int rows, int cols, Var x) {
        Eigen::Map<const Eigen::MatrixXd> m(val(w).data(), rows, cols);
        Node n;
        n.op = Op::kMatVec;
        n.a = w.id;
        n.b = x.id;
        n.rows = rows;
        n.cols = cols;
        n.value = m * val(x);
        return push_node(std::move(n));
    }

    Var sigmoid(Var a) {
        Vec out = val(a).unaryExpr([](double x) { return stable_sigmoid(x); });
        return push(Op::kSigmoid, a.id, -1, std::move(out));
    }
    Var tanh(Var a) {
        Vec out = val(a).array().tanh();
        return push(Op::kTanh, a.id, -1, std::move(out));
    }
    Var relu(Var a) {
        Vec out = val(a).cwiseMax(0.0);
        return push(Op::kRelu, a.id, -1, std::move(out));
    }
    Var softplus(Var a) {
        Vec out = val(a).unaryExpr([](double x) { return stable_softplus(x); });
        return push(Op::kSoftplus, a.id, -1, std::move(out));
    }
    Var sqrt(Var a) { return push(Op::kSqrt, a.id, -1, val(a).cwiseSqrt()); }
    Var scale(Var a, double s) {
        Node n;
        n.op = Op::kScale;
        n.a = a.id;
        n.scalar = s;
        n.value = s * val(a);
        return push_node(std::move(n));
    }
    Var add_const(Var a, double c) {
        Node n;
        n.op = Op::kAddConst;
        n.a = a.id;
        n.scalar = c;
        n.value = val(a).array() + c;
        return push_node(std::move(n));
    }

    // gate .* b + (1 - gate) .* c
    Var lerp(Var gate, Var b, Var c) {
        Node n;
        n.op = Op::kLerp;
        n.a = gate.id;
        n.b = b.id;
        n.c = c.id;
        n.value = val(gate).cwiseProduct(val(b)) +
                  (1.0 - val(gate).array()).matrix().cwiseProduct(val(c));
        return push_node(std::move(n));
    }

    Var camera_project(Var state) {
        if (!has_camera_) throw ContractError("Tape: camera op used without camera config");
        Eigen::Vector3d x = val(state).head<3>();
        return push(Op::kCamera, state.id, -1, camera::measure_clean(x, cam_, grid_));
    }

    // log N(y; h, var * I) as a 1-element node; y is observed data.
    Var logpdf_iso(Var h, Var y, double var) {
        const Vec& hv = val(h);
        const Vec& yv = val(y);
        const double sq = (yv - hv).squaredNorm();
        Vec out(1);
        out(0) = -0.5 * (static_cast<double>(hv.size()) * (kLog2Pi + std::log(var)) + sq / var);
        Node n;
        n.op = Op::kLogpdfIso;
        n.a = h.id;
        n.b = y.id;
        n.scalar = var;
        n.value = std::move(out);
        return push_node(std::move(n));
    }

    // KL(N(qm, diag qv) || N(pm, diag pv)) as a 1-element node.
    Var kl_diag(Var qm, Var qv, Var pm, Var pv) {
        const Vec& qmv = val(qm);
        const Vec& qvv = val(qv);
        const Vec& pmv = val(pm);
        const Vec& pvv = val(pv);
        double acc = 0.0;
        for (Eigen::Index i = 0; i < qmv.size(); ++i) {
            const double dm = qmv(i) - pmv(i);
            acc += std::log(pvv(i) / qvv(i)) - 1.0 + qvv(i) / pvv(i) + dm * dm / pvv(i);
        }
        Vec out(1);
        out(0) = 0.5 * acc;
        Node n;
        n.op = Op::kKlDiag;
        n.a = qm.id;
        n.b = qv.id;
        n.c = pm.id;
        n.d = pv.id;
        n.value = std::move(out);
        return push_node(std::move(n));
    }

    // Reverse sweep seeding d(root)/d(root) = 1. Root must be scalar.
    void backward(Var root) {
        if (nodes_[root.id].value.size() != 1)
            throw ContractError("Tape::backward: root must be a scalar node");
        for (auto& n : nodes_) n.grad.resize(0);
        nodes_[root.id].grad = Vec::Ones(1);
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.grad.size() == 0) continue;  // not on a path to the root
            propagate(n);
        }
    }

private:
    const Vec& val(Var v) const { return nodes_[v.id].value; }

    Var push(Op op, int a, int b, Vec value) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.value = std::move(value);
        return push_node(std::move(n));
    }

    Var push_node(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Vec& grad_ref(int id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Vec::Zero(n.value.size());
        return n.grad;
    }

    void propagate(Node& n) {
        const Vec& g = n.grad;
        switch (n.op) {
            case Op::kLeaf:
                break;
            case Op::kAdd:
                grad_ref(n.a) += g;
                grad_ref(n.b) += g;
                break;
            case Op::kSub:
                grad_ref(n.a) += g;
                grad_ref(n.b) -= g;
                break;
            case Op::kHadamard:
                grad_ref(n.a) += g.cwiseProduct(nodes_[n.b].value);
                grad_ref(n.b) += g.cwiseProduct(nodes_[n.a].value);
                break;
            case Op::kMatVec: {
                Eigen::Map<const Eigen::MatrixXd> m(nodes_[n.a].value.data(), n.rows, n.cols);
                Eigen::Map<Eigen::MatrixXd> gm(grad_ref(n.a).data(), n.rows, n.cols);
                gm.noalias() += g * nodes_[n.b].value.transpose();
                grad_ref(n.b).noalias() += m.transpose() * g;
                break;
            }
            case Op::kSigmoid: {
                const Vec& s = n.value;
                grad_ref(n.a) += g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix()));
                break;
            }
            case Op::kTanh:
                grad_ref(n.a) += g.cwiseProduct((1.0 - n.value.array().square()).matrix());
                break;
            case Op::kRelu: {
                Vec& ga = grad_ref(n.a);
                const Vec& in = nodes_[n.a].value;
                for (Eigen::Index i = 0; i < in.size(); ++i)
                    if (in(i) > 0.0) ga(i) += g(i);
                break;
            }
            case Op::kSoftplus: {
                Vec& ga = grad_ref(n.a);
                const Vec& in = nodes_[n.a].value;
                for (Eigen::Index i = 0; i < in.size(); ++i)
                    ga(i) += g(i) * stable_sigmoid(in(i));
                break;
            }
            case Op::kSqrt:
                grad_ref(n.a) += g.cwiseQuotient(2.0 * n.value);
                break;
            case Op::kScale:
                grad_ref(n.a) += n.scalar * g;
                break;
            case Op::kAddConst:
                grad_ref(n.a) += g;
                break;
            case Op::kLerp: {
                const Vec& gate = nodes_[n.a].value;
                const Vec& bv = nodes_[n.b].value;
                const Vec& cv = nodes_[n.c].value;
                grad_ref(n.a) += g.cwiseProduct(bv - cv);
                grad_ref(n.b) += g.cwiseProduct(gate);
                grad_ref(n.c) += g.cwiseProduct((1.0 - gate.array()).matrix());
                break;
            }
            case Op::kCamera: {
                const Vec& state = nodes_[n.a].value;
                const Vec& h = n.value;
                const double depth = std::max(state(2), cam_.depth_floor);
                Vec& ga = grad_ref(n.a);
                double g0 = 0.0, g1 = 0.0, g2 = 0.0;
                const bool depth_active = state(2) > cam_.depth_floor;
                for (Eigen::Index i = 0; i < h.size(); ++i) {
                    const double d0 = grid_(i, 0) - state(0);
                    const double d1 = grid_(i, 1) - state(1);
                    const double gh = g(i) * h(i);
                    g0 += gh * d0 / depth;
                    g1 += gh * d1 / depth;
                    if (depth_active) g2 += gh * (d0 * d0 + d1 * d1) / (2.0 * depth * depth);
                }
                ga(0) += g0;
                ga(1) += g1;
                ga(2) += g2;
                break;
            }
            case Op::kLogpdfIso: {
                const double g0 = g(0);
                const Vec& h = nodes_[n.a].value;
                const Vec& y = nodes_[n.b].value;
                grad_ref(n.a) += (g0 / n.scalar) * (y - h);
                break;
            }
            case Op::kKlDiag: {
                const double g0 = 0.5 * g(0);
                const Vec& qm = nodes_[n.a].value;
                const Vec& qv = nodes_[n.b].value;
                const Vec& pm = nodes_[n.c].value;
                const Vec& pv = nodes_[n.d].value;
                Vec& gqm = grad_ref(n.a);
                Vec& gqv = grad_ref(n.b);
                Vec& gpm = grad_ref(n.c);
                Vec& gpv = grad_ref(n.d);
                for (Eigen::Index i = 0; i < qm.size(); ++i) {
                    const double dm = qm(i) - pm(i);
                    gqm(i) += g0 * 2.0 * dm / pv(i);
                    gpm(i) -= g0 * 2.0 * dm / pv(i);
                    gqv(i) += g0 * (1.0 / pv(i) - 1.0 / qv(i));
                    gpv(i) += g0 * (1.0 / pv(i) - qv(i) / (pv(i) * pv(i)) -
                                    dm * dm / (pv(i) * pv(i)));
                }
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    bool has_camera_ = false;
    camera::Config cam_;
    camera::Grid grid_;
};

}  // namespace vse::ad
