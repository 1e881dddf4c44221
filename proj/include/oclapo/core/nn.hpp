#pragma once

#include "oclapo/core/graph.hpp"
#include "oclapo/core/rng.hpp"
#include "oclapo/core/tensor_file.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace oclapo::nn {

using ad::Graph;
using ad::Mat;

template <typename S>
struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;
    Mat<S> m, v;  // Adam moments
};

/// Owns all trainable tensors of one model. Pointers returned by add() stay
/// valid for the store's lifetime.
template <typename S>
class ParamStore {
public:
    Param<S>* add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        for (const auto& p : params_)
            if (p->name == name) throw std::runtime_error("duplicate param: " + name);
        auto p = std::make_unique<Param<S>>();
        p->name = name;
        p->value = Mat<S>::Zero(rows, cols);
        p->grad = Mat<S>::Zero(rows, cols);
        p->m = Mat<S>::Zero(rows, cols);
        p->v = Mat<S>::Zero(rows, cols);
        params_.push_back(std::move(p));
        return params_.back().get();
    }

    Param<S>* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    const std::vector<std::unique_ptr<Param<S>>>& all() const { return params_; }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p->grad.setZero();
    }

    /// Fresh Adam moments and step count; values stay.
    void reset_optimizer() {
        for (auto& p : params_) {
            p->m.setZero();
            p->v.setZero();
        }
        step_ = 0;
    }

    double grad_norm() const {
        double s = 0;
        for (const auto& p : params_) s += static_cast<double>(p->grad.squaredNorm());
        return std::sqrt(s);
    }

    /// Global-norm clipping; returns the pre-clip norm.
    double clip_grad_norm(double max_norm) {
        const double n = grad_norm();
        if (n > max_norm && n > 0) {
            const S f = static_cast<S>(max_norm / n);
            for (auto& p : params_) p->grad *= f;
        }
        return n;
    }

    void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        ++step_;
        const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
        const S bc1 = static_cast<S>(1.0 - std::pow(beta1, step_));
        const S bc2 = static_cast<S>(1.0 - std::pow(beta2, step_));
        const S a = static_cast<S>(lr), e = static_cast<S>(eps);
        for (auto& p : params_) {
            p->m = b1 * p->m + (S(1) - b1) * p->grad;
            p->v.array() = b2 * p->v.array() + (S(1) - b2) * p->grad.array().square();
            p->value.array() -=
                a * (p->m.array() / bc1) / ((p->v.array() / bc2).sqrt() + e);
        }
    }

    void sgd_step(double lr) {
        ++step_;
        for (auto& p : params_) p->value -= static_cast<S>(lr) * p->grad;
    }

    int step() const { return step_; }

    void save(const std::string& path) const {
        std::vector<std::pair<std::string, TensorRec>> recs;
        recs.reserve(params_.size());
        for (const auto& p : params_) {
            Eigen::MatrixXf f = p->value.template cast<float>();
            recs.emplace_back(p->name, to_record(f));
        }
        write_named_records(path, recs);
    }

    /// Loads values by name into already-declared params; every param must be
    /// present with matching shape. Optimizer state is reset.
    void load(const std::string& path) {
        auto recs = read_named_records(path);
        for (auto& p : params_) {
            const TensorRec* r = nullptr;
            for (const auto& [name, rec] : recs)
                if (name == p->name) r = &rec;
            if (!r) throw std::runtime_error("checkpoint missing param: " + p->name);
            Eigen::MatrixXf f = to_matrix(*r);
            if (f.rows() != p->value.rows() || f.cols() != p->value.cols())
                throw std::runtime_error("checkpoint shape mismatch: " + p->name);
            p->value = f.cast<S>();
            p->m.setZero();
            p->v.setZero();
        }
        step_ = 0;
    }

private:
    std::vector<std::unique_ptr<Param<S>>> params_;
    int step_ = 0;
};

/// Puts a parameter on the tape; after backward(), call collect_grads().
template <typename S>
int use(Graph<S>& g, Param<S>* p) {
    int id = g.leaf(p->value, true);
    g.nodes[static_cast<size_t>(id)].param = p;
    return id;
}

/// Accumulates tape gradients back into their parameters.
template <typename S>
void collect_grads(Graph<S>& g) {
    for (auto& n : g.nodes)
        if (n.param && n.grad.size() != 0) static_cast<Param<S>*>(n.param)->grad += n.grad;
}

// ----------------------------------------------------------------- schedules

/// Linear warmup to `base`, then exponential decay by factor 0.5 every
/// `half_life` steps. half_life == 0 disables decay.
struct LrSchedule {
    double base = 1e-3;
    int warmup = 0;
    int half_life = 0;

    double at(int step) const {
        double lr = base;
        if (warmup > 0 && step < warmup) lr *= static_cast<double>(step + 1) / warmup;
        if (half_life > 0) lr *= std::pow(0.5, static_cast<double>(step) / half_life);
        return lr;
    }
};

// -------------------------------------------------------------------- inits

template <typename S>
void init_uniform(Mat<S>& w, Rng& rng, double scale) {
    for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            w(i, j) = static_cast<S>(rng.uniform(-scale, scale));
}

/// Kaiming-style fan-in uniform.
template <typename S>
void init_fanin(Mat<S>& w, Rng& rng, Eigen::Index fan_in) {
    init_uniform(w, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

template <typename S>
void init_normal(Mat<S>& w, Rng& rng, double sd) {
    for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            w(i, j) = static_cast<S>(sd * rng.normal());
}

// -------------------------------------------------------------------- layers

template <typename S>
struct Linear {
    Param<S>* W = nullptr;
    Param<S>* b = nullptr;

    static Linear create(ParamStore<S>& ps, const std::string& name, Eigen::Index in,
                         Eigen::Index out, Rng& rng) {
        Linear l;
        l.W = ps.add(name + ".W", out, in);
        l.b = ps.add(name + ".b", out, 1);
        init_fanin(l.W->value, rng, in);
        return l;
    }

    int operator()(Graph<S>& g, int x) const {
        return ad::colwise_add(g, ad::matmul(g, use(g, W), x), use(g, b));
    }
};

template <typename S>
struct LayerNorm {
    Param<S>* gain = nullptr;
    Param<S>* bias = nullptr;

    static LayerNorm create(ParamStore<S>& ps, const std::string& name, Eigen::Index dim) {
        LayerNorm n;
        n.gain = ps.add(name + ".g", dim, 1);
        n.bias = ps.add(name + ".b", dim, 1);
        n.gain->value.setOnes();
        return n;
    }

    int operator()(Graph<S>& g, int x) const {
        return ad::layernorm_cols(g, x, use(g, gain), use(g, bias));
    }
};

template <typename S>
struct Conv {
    Param<S>* W = nullptr;
    Param<S>* b = nullptr;
    ad::ConvSpec spec;

    static Conv create(ParamStore<S>& ps, const std::string& name, const ad::ConvSpec& cs,
                       Rng& rng) {
        Conv c;
        c.spec = cs;
        c.W = ps.add(name + ".W", cs.out_ch, static_cast<Eigen::Index>(cs.in_ch) * cs.kernel *
                                                  cs.kernel);
        c.b = ps.add(name + ".b", cs.out_ch, 1);
        init_fanin(c.W->value, rng, static_cast<Eigen::Index>(cs.in_ch) * cs.kernel * cs.kernel);
        return c;
    }

    int operator()(Graph<S>& g, int x, int batch, int H, int W_) const {
        if (spec.kernel == 1 && spec.stride == 1)
            return ad::colwise_add(g, ad::matmul(g, use(g, W), x), use(g, b));
        return ad::conv2d(g, x, use(g, W), use(g, b), spec, batch, H, W_);
    }
};

/// x + W2 * gelu(W1 * ln(x)); the pre-norm residual MLP block.
template <typename S>
struct ResidualBlock {
    LayerNorm<S> ln;
    Linear<S> fc1, fc2;

    static ResidualBlock create(ParamStore<S>& ps, const std::string& name, Eigen::Index dim,
                                Eigen::Index hidden, Rng& rng) {
        ResidualBlock b;
        b.ln = LayerNorm<S>::create(ps, name + ".ln", dim);
        b.fc1 = Linear<S>::create(ps, name + ".fc1", dim, hidden, rng);
        b.fc2 = Linear<S>::create(ps, name + ".fc2", hidden, dim, rng);
        return b;
    }

    int operator()(Graph<S>& g, int x) const {
        return ad::add(g, x, fc2(g, ad::gelu(g, fc1(g, ln(g, x)))));
    }
};

/// x + conv_b(gelu(conv_a(x))); channel- and resolution-preserving 3x3 pair.
template <typename S>
struct ConvResBlock {
    Conv<S> a, b;

    static ConvResBlock create(ParamStore<S>& ps, const std::string& name, int ch, Rng& rng) {
        ConvResBlock r;
        r.a = Conv<S>::create(ps, name + ".a", {ch, ch, 3, 1, 1}, rng);
        r.b = Conv<S>::create(ps, name + ".b", {ch, ch, 3, 1, 1}, rng);
        return r;
    }

    int operator()(Graph<S>& g, int x, int batch, int H, int W_) const {
        return ad::add(g, x, b(g, ad::gelu(g, a(g, x, batch, H, W_)), batch, H, W_));
    }
};

/// Minimal GRU cell: state update from (input u, state s), both (dim, n).
template <typename S>
struct GruCell {
    Linear<S> wz, wr, wh;  // act on [u; s] except wh which acts on [u; r*s]

    static GruCell create(ParamStore<S>& ps, const std::string& name, Eigen::Index in,
                          Eigen::Index dim, Rng& rng) {
        GruCell c;
        c.wz = Linear<S>::create(ps, name + ".z", in + dim, dim, rng);
        c.wr = Linear<S>::create(ps, name + ".r", in + dim, dim, rng);
        c.wh = Linear<S>::create(ps, name + ".h", in + dim, dim, rng);
        return c;
    }

    int operator()(Graph<S>& g, int u, int s) const {
        int us = ad::concat_rows(g, u, s);
        int z = ad::sigmoid(g, wz(g, us));
        int r = ad::sigmoid(g, wr(g, us));
        int h = ad::tanh_(g, wh(g, ad::concat_rows(g, u, ad::cmul(g, r, s))));
        // s' = (1-z)*h + z*s
        int one = g.constant(Mat<S>::Ones(g.val(z).rows(), g.val(z).cols()));
        return ad::add(g, ad::cmul(g, ad::sub(g, one, z), h), ad::cmul(g, z, s));
    }
};

}  // namespace oclapo::nn
