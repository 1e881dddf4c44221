#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

namespace oclapo::ad {

// Reverse-mode tape over dense Eigen matrices. Nodes are created in
// evaluation order; backward() replays the tape in reverse. Image batches
// use the layout (channels, batch*H*W) with column index (b*H + y)*W + x.

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
class Graph {
public:
    struct Node {
        Mat<S> val;
        Mat<S> grad;
        bool rg = false;  // requires grad
        std::function<void()> back;
        void* param = nullptr;
    };

    std::vector<Node> nodes;

    // backward closures capture the graph by reference, so it must not move
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = delete;
    Graph& operator=(Graph&&) = delete;

    int constant(Mat<S> v) {
        nodes.push_back(Node{std::move(v), {}, false, nullptr, nullptr});
        return static_cast<int>(nodes.size()) - 1;
    }

    int leaf(Mat<S> v, bool requires_grad) {
        nodes.push_back(Node{std::move(v), {}, requires_grad, nullptr, nullptr});
        return static_cast<int>(nodes.size()) - 1;
    }

    const Mat<S>& val(int id) const { return nodes[static_cast<size_t>(id)].val; }
    Mat<S>& val(int id) { return nodes[static_cast<size_t>(id)].val; }
    Mat<S>& grad(int id) { return ensure_grad(id); }
    bool rg(int id) const { return nodes[static_cast<size_t>(id)].rg; }

    Mat<S>& ensure_grad(int id) {
        auto& n = nodes[static_cast<size_t>(id)];
        if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.val.rows(), n.val.cols());
        return n.grad;
    }

    /// Seeds d(loss)/d(loss) = 1 and replays the tape. `loss` must be 1x1.
    void backward(int loss) {
        if (val(loss).size() != 1) throw std::runtime_error("backward: loss must be scalar");
        ensure_grad(loss)(0, 0) = S(1);
        for (int i = loss; i >= 0; --i) {
            auto& n = nodes[static_cast<size_t>(i)];
            if (n.rg && n.back && n.grad.size() != 0) n.back();
        }
    }

    size_t size() const { return nodes.size(); }
    void clear() { nodes.clear(); }
};

namespace detail {
template <typename S>
bool any_rg(Graph<S>& g, std::initializer_list<int> ids) {
    for (int i : ids)
        if (g.rg(i)) return true;
    return false;
}
}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <typename S>
int add(Graph<S>& g, int a, int b) {
    int y = g.leaf(g.val(a) + g.val(b), detail::any_rg(g, {a, b}));
    g.nodes[y].back = [&g, a, b, y] {
        if (g.rg(a)) g.ensure_grad(a) += g.grad(y);
        if (g.rg(b)) g.ensure_grad(b) += g.grad(y);
    };
    return y;
}

template <typename S>
int sub(Graph<S>& g, int a, int b) {
    int y = g.leaf(g.val(a) - g.val(b), detail::any_rg(g, {a, b}));
    g.nodes[y].back = [&g, a, b, y] {
        if (g.rg(a)) g.ensure_grad(a) += g.grad(y);
        if (g.rg(b)) g.ensure_grad(b) -= g.grad(y);
    };
    return y;
}

/// y = a + alpha * b
template <typename S>
int add_scaled(Graph<S>& g, int a, int b, S alpha) {
    int y = g.leaf(g.val(a) + alpha * g.val(b), detail::any_rg(g, {a, b}));
    g.nodes[y].back = [&g, a, b, y, alpha] {
        if (g.rg(a)) g.ensure_grad(a) += g.grad(y);
        if (g.rg(b)) g.ensure_grad(b) += alpha * g.grad(y);
    };
    return y;
}

template <typename S>
int cmul(Graph<S>& g, int a, int b) {
    int y = g.leaf(g.val(a).cwiseProduct(g.val(b)), detail::any_rg(g, {a, b}));
    g.nodes[y].back = [&g, a, b, y] {
        if (g.rg(a)) g.ensure_grad(a).array() += g.grad(y).array() * g.val(b).array();
        if (g.rg(b)) g.ensure_grad(b).array() += g.grad(y).array() * g.val(a).array();
    };
    return y;
}

template <typename S>
int scale(Graph<S>& g, int a, S c) {
    int y = g.leaf(c * g.val(a), g.rg(a));
    g.nodes[y].back = [&g, a, y, c] {
        if (g.rg(a)) g.ensure_grad(a) += c * g.grad(y);
    };
    return y;
}

template <typename S>
int matmul(Graph<S>& g, int a, int b) {
    Mat<S> v = g.val(a) * g.val(b);
    int y = g.leaf(std::move(v), detail::any_rg(g, {a, b}));
    g.nodes[y].back = [&g, a, b, y] {
        if (g.rg(a)) g.ensure_grad(a).noalias() += g.grad(y) * g.val(b).transpose();
        if (g.rg(b)) g.ensure_grad(b).noalias() += g.val(a).transpose() * g.grad(y);
    };
    return y;
}

/// Block-diagonal matmul. `a` is `blocks` column-blocks of (ra, ca), `b` is
/// `blocks` column-blocks of (rb, cb). Per block: Y_i = A_i * B_i, or
/// A_i^T * B_i when `trans_a`.
template <typename S>
int bmm(Graph<S>& g, int a, int b, int blocks, bool trans_a = false) {
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    const int ca = static_cast<int>(A.cols()) / blocks;
    const int cb = static_cast<int>(B.cols()) / blocks;
    const int ry = trans_a ? ca : static_cast<int>(A.rows());
    Mat<S> Y(ry, static_cast<Eigen::Index>(blocks) * cb);
    for (int i = 0; i < blocks; ++i) {
        auto Ai = A.middleCols(static_cast<Eigen::Index>(i) * ca, ca);
        auto Bi = B.middleCols(static_cast<Eigen::Index>(i) * cb, cb);
        auto Yi = Y.middleCols(static_cast<Eigen::Index>(i) * cb, cb);
        if (trans_a)
            Yi.noalias() = Ai.transpose() * Bi;
        else
            Yi.noalias() = Ai * Bi;
    }
    int y = g.leaf(std::move(Y), detail::any_rg(g, {a, b}));
    g.nodes[y].back = [&g, a, b, y, blocks, ca, cb, trans_a] {
        const auto& A = g.val(a);
        const auto& B = g.val(b);
        const auto& dY = g.grad(y);
        for (int i = 0; i < blocks; ++i) {
            auto Ai = A.middleCols(static_cast<Eigen::Index>(i) * ca, ca);
            auto Bi = B.middleCols(static_cast<Eigen::Index>(i) * cb, cb);
            auto dYi = dY.middleCols(static_cast<Eigen::Index>(i) * cb, cb);
            if (g.rg(a)) {
                auto dAi = g.ensure_grad(a).middleCols(static_cast<Eigen::Index>(i) * ca, ca);
                if (trans_a)
                    dAi.noalias() += Bi * dYi.transpose();
                else
                    dAi.noalias() += dYi * Bi.transpose();
            }
            if (g.rg(b)) {
                auto dBi = g.ensure_grad(b).middleCols(static_cast<Eigen::Index>(i) * cb, cb);
                if (trans_a)
                    dBi.noalias() += Ai * dYi;
                else
                    dBi.noalias() += Ai.transpose() * dYi;
            }
        }
    };
    return y;
}

/// y(:,j) = a(:,j) + v  (bias broadcast over columns; v is (rows,1)).
template <typename S>
int colwise_add(Graph<S>& g, int a, int v) {
    Mat<S> y = g.val(a).colwise() + g.val(v).col(0);
    int id = g.leaf(std::move(y), detail::any_rg(g, {a, v}));
    g.nodes[id].back = [&g, a, v, id] {
        if (g.rg(a)) g.ensure_grad(a) += g.grad(id);
        if (g.rg(v)) g.ensure_grad(v).col(0) += g.grad(id).rowwise().sum();
    };
    return id;
}

// ---------------------------------------------------------------- activations

template <typename S>
int relu(Graph<S>& g, int a) {
    int y = g.leaf(g.val(a).cwiseMax(S(0)), g.rg(a));
    g.nodes[y].back = [&g, a, y] {
        if (g.rg(a))
            g.ensure_grad(a).array() +=
                g.grad(y).array() * (g.val(a).array() > S(0)).template cast<S>();
    };
    return y;
}

/// Tanh-approximation GELU.
template <typename S>
int gelu(Graph<S>& g, int a) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S k = S(0.044715);
    const auto& x = g.val(a).array();
    Mat<S> t = (c * (x + k * x.cube())).tanh().matrix();
    Mat<S> y = (S(0.5) * x * (S(1) + t.array())).matrix();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, t = std::move(t), c, k] {
        if (!g.rg(a)) return;
        const auto& x = g.val(a).array();
        auto th = t.array();
        auto sech2 = S(1) - th * th;
        auto dydx = S(0.5) * (S(1) + th) + S(0.5) * x * sech2 * (c * (S(1) + S(3) * k * x * x));
        g.ensure_grad(a).array() += g.grad(id).array() * dydx;
    };
    return id;
}

template <typename S>
int sigmoid(Graph<S>& g, int a) {
    Mat<S> y = (S(1) / (S(1) + (-g.val(a).array()).exp())).matrix();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id] {
        if (!g.rg(a)) return;
        const auto& y = g.val(id).array();
        g.ensure_grad(a).array() += g.grad(id).array() * y * (S(1) - y);
    };
    return id;
}

template <typename S>
int tanh_(Graph<S>& g, int a) {
    Mat<S> y = g.val(a).array().tanh().matrix();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id] {
        if (!g.rg(a)) return;
        const auto& y = g.val(id).array();
        g.ensure_grad(a).array() += g.grad(id).array() * (S(1) - y * y);
    };
    return id;
}

template <typename S>
int softplus(Graph<S>& g, int a) {
    const auto& x = g.val(a).array();
    Mat<S> y = (x.max(S(0)) + (S(1) + (-x.abs()).exp()).log()).matrix();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id] {
        if (!g.rg(a)) return;
        const auto& x = g.val(a).array();
        g.ensure_grad(a).array() += g.grad(id).array() * (S(1) / (S(1) + (-x).exp()));
    };
    return id;
}

template <typename S>
int square(Graph<S>& g, int a) {
    Mat<S> y = g.val(a).array().square().matrix();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id] {
        if (g.rg(a)) g.ensure_grad(a).array() += S(2) * g.grad(id).array() * g.val(a).array();
    };
    return id;
}

// ------------------------------------------------------------- normalization

/// Softmax over rows, independently per column.
template <typename S>
int softmax_cols(Graph<S>& g, int a) {
    Mat<S> y = g.val(a);
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
        auto c = y.col(j).array();
        c -= c.maxCoeff();
        c = c.exp();
        c /= c.sum();
    }
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id] {
        if (!g.rg(a)) return;
        const auto& y = g.val(id);
        const auto& dy = g.grad(id);
        auto& da = g.ensure_grad(a);
        for (Eigen::Index j = 0; j < y.cols(); ++j) {
            const S dot = dy.col(j).dot(y.col(j));
            da.col(j).array() += (dy.col(j).array() - dot) * y.col(j).array();
        }
    };
    return id;
}

/// Softmax within groups of `gs` consecutive columns, independently per row.
template <typename S>
int softmax_group_cols(Graph<S>& g, int a, int gs) {
    Mat<S> y = g.val(a);
    const Eigen::Index groups = y.cols() / gs;
    for (Eigen::Index b = 0; b < groups; ++b) {
        auto blk = y.middleCols(b * gs, gs);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            auto row = blk.row(r).array();
            row -= row.maxCoeff();
            row = row.exp();
            row /= row.sum();
        }
    }
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, gs] {
        if (!g.rg(a)) return;
        const auto& y = g.val(id);
        const auto& dy = g.grad(id);
        auto& da = g.ensure_grad(a);
        const Eigen::Index groups = y.cols() / gs;
        for (Eigen::Index b = 0; b < groups; ++b) {
            for (Eigen::Index r = 0; r < y.rows(); ++r) {
                auto yr = y.row(r).segment(b * gs, gs).array();
                auto dr = dy.row(r).segment(b * gs, gs).array();
                const S dot = (yr * dr).sum();
                da.row(r).segment(b * gs, gs).array() += (dr - dot) * yr;
            }
        }
    };
    return id;
}

/// y(:,j) = x(:,j) / (sum(x(:,j)) + eps)
template <typename S>
int normalize_cols_sum(Graph<S>& g, int a, S eps) {
    const auto& x = g.val(a);
    Mat<S> y = x;
    Eigen::Matrix<S, 1, Eigen::Dynamic> sums = x.colwise().sum().array() + eps;
    for (Eigen::Index j = 0; j < y.cols(); ++j) y.col(j) /= sums(j);
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, sums = std::move(sums)] {
        if (!g.rg(a)) return;
        const auto& y = g.val(id);
        const auto& dy = g.grad(id);
        auto& da = g.ensure_grad(a);
        for (Eigen::Index j = 0; j < y.cols(); ++j) {
            const S s = sums(j);
            const S dot = dy.col(j).dot(y.col(j));
            da.col(j).array() += dy.col(j).array() / s - dot / s;
        }
    };
    return id;
}

/// LayerNorm per column (over rows), with learned gain/bias of shape (rows,1).
template <typename S>
int layernorm_cols(Graph<S>& g, int a, int gain, int bias, S eps = S(1e-5)) {
    const auto& x = g.val(a);
    const auto r = static_cast<S>(x.rows());
    Eigen::Matrix<S, 1, Eigen::Dynamic> mu = x.colwise().mean();
    Mat<S> xc = x.rowwise() - mu;
    Eigen::Matrix<S, 1, Eigen::Dynamic> inv_sd =
        (xc.array().square().colwise().sum() / r + eps).rsqrt();
    Mat<S> xhat = xc;
    for (Eigen::Index j = 0; j < xhat.cols(); ++j) xhat.col(j) *= inv_sd(j);
    Mat<S> y = (xhat.array().colwise() * g.val(gain).col(0).array()).colwise() +
               g.val(bias).col(0).array();
    int id = g.leaf(std::move(y), detail::any_rg(g, {a, gain, bias}));
    g.nodes[id].back = [&g, a, gain, bias, id, xhat = std::move(xhat),
                        inv_sd = std::move(inv_sd), r] {
        const auto& dy = g.grad(id);
        if (g.rg(gain))
            g.ensure_grad(gain).col(0) += dy.cwiseProduct(xhat).rowwise().sum();
        if (g.rg(bias)) g.ensure_grad(bias).col(0) += dy.rowwise().sum();
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& gn = g.val(gain).col(0);
        for (Eigen::Index j = 0; j < dy.cols(); ++j) {
            Eigen::Matrix<S, Eigen::Dynamic, 1> dxh = dy.col(j).cwiseProduct(gn);
            const S m1 = dxh.mean();
            const S m2 = dxh.dot(xhat.col(j)) / r;
            da.col(j).array() +=
                inv_sd(j) * (dxh.array() - m1 - xhat.col(j).array() * m2);
        }
    };
    return id;
}

// -------------------------------------------------------------- reshuffling

template <typename S>
int concat_rows(Graph<S>& g, int a, int b) {
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    Mat<S> y(A.rows() + B.rows(), A.cols());
    y.topRows(A.rows()) = A;
    y.bottomRows(B.rows()) = B;
    const auto ra = A.rows();
    int id = g.leaf(std::move(y), detail::any_rg(g, {a, b}));
    g.nodes[id].back = [&g, a, b, id, ra] {
        const auto& dy = g.grad(id);
        if (g.rg(a)) g.ensure_grad(a) += dy.topRows(ra);
        if (g.rg(b)) g.ensure_grad(b) += dy.bottomRows(dy.rows() - ra);
    };
    return id;
}

template <typename S>
int gather_rows(Graph<S>& g, int a, std::vector<int> rows) {
    const auto& A = g.val(a);
    Mat<S> y(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (size_t i = 0; i < rows.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, rows = std::move(rows)] {
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& dy = g.grad(id);
        for (size_t i = 0; i < rows.size(); ++i)
            da.row(rows[i]) += dy.row(static_cast<Eigen::Index>(i));
    };
    return id;
}

/// Each column of `a` repeated `times` times consecutively.
template <typename S>
int repeat_each_col(Graph<S>& g, int a, int times) {
    const auto& A = g.val(a);
    Mat<S> y(A.rows(), A.cols() * times);
    for (Eigen::Index j = 0; j < A.cols(); ++j)
        for (int t = 0; t < times; ++t) y.col(j * times + t) = A.col(j);
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, times] {
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& dy = g.grad(id);
        for (Eigen::Index j = 0; j < da.cols(); ++j)
            for (int t = 0; t < times; ++t) da.col(j) += dy.col(j * times + t);
    };
    return id;
}

/// The whole block of columns tiled `times` times: [A A ... A].
template <typename S>
int tile_cols(Graph<S>& g, int a, int times) {
    const auto& A = g.val(a);
    Mat<S> y(A.rows(), A.cols() * times);
    for (int t = 0; t < times; ++t) y.middleCols(A.cols() * t, A.cols()) = A;
    const auto ca = A.cols();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, times, ca] {
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& dy = g.grad(id);
        for (int t = 0; t < times; ++t) da += dy.middleCols(ca * t, ca);
    };
    return id;
}

/// Per-block transpose: (r, B*c) -> (c, B*r), block i of a transposed into
/// block i of the output.
template <typename S>
int transpose_blocks(Graph<S>& g, int a, int blocks) {
    const auto& A = g.val(a);
    const Eigen::Index r = A.rows();
    const Eigen::Index c = A.cols() / blocks;
    Mat<S> y(c, static_cast<Eigen::Index>(blocks) * r);
    for (int i = 0; i < blocks; ++i)
        y.middleCols(static_cast<Eigen::Index>(i) * r, r) =
            A.middleCols(static_cast<Eigen::Index>(i) * c, c).transpose();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, blocks, r, c] {
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& dy = g.grad(id);
        for (int i = 0; i < blocks; ++i)
            da.middleCols(static_cast<Eigen::Index>(i) * c, c) +=
                dy.middleCols(static_cast<Eigen::Index>(i) * r, r).transpose();
    };
    return id;
}

/// (r*P, B) -> (r, B*P): column-block per batch item, out(i, b*P+p) = x(p*r+i, b).
template <typename S>
int split_rows_to_cols(Graph<S>& g, int a, int P) {
    const auto& A = g.val(a);
    const Eigen::Index r = A.rows() / P;
    const Eigen::Index B = A.cols();
    Mat<S> y(r, B * P);
    for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index p = 0; p < P; ++p) y.col(b * P + p) = A.col(b).segment(p * r, r);
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, P, r, B] {
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& dy = g.grad(id);
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index p = 0; p < P; ++p)
                da.col(b).segment(p * r, r) += dy.col(b * P + p);
    };
    return id;
}

/// (C, B*P) -> (C*P, B): inverse of split_rows_to_cols.
template <typename S>
int merge_cols_to_rows(Graph<S>& g, int a, int P) {
    const auto& A = g.val(a);
    const Eigen::Index C = A.rows();
    const Eigen::Index B = A.cols() / P;
    Mat<S> y(C * P, B);
    for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index p = 0; p < P; ++p) y.col(b).segment(p * C, C) = A.col(b * P + p);
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, P, C, B] {
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& dy = g.grad(id);
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index p = 0; p < P; ++p)
                da.col(b * P + p) += dy.col(b).segment(p * C, C);
    };
    return id;
}

/// (c, B*K*P) -> (c*K, B*P): per-slot channels stacked into rows so that
/// out(c*k + i, b*P + p) = x(i, (b*K + k)*P + p).
template <typename S>
int regroup_slots(Graph<S>& g, int a, int B, int K, int P) {
    const auto& A = g.val(a);
    const Eigen::Index c = A.rows();
    Mat<S> y(c * K, static_cast<Eigen::Index>(B) * P);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k)
            for (int p = 0; p < P; ++p)
                y.col(static_cast<Eigen::Index>(b) * P + p).segment(c * k, c) =
                    A.col((static_cast<Eigen::Index>(b) * K + k) * P + p);
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, B, K, P, c] {
        if (!g.rg(a)) return;
        auto& da = g.ensure_grad(a);
        const auto& dy = g.grad(id);
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < K; ++k)
                for (int p = 0; p < P; ++p)
                    da.col((static_cast<Eigen::Index>(b) * K + k) * P + p) +=
                        dy.col(static_cast<Eigen::Index>(b) * P + p).segment(c * k, c);
    };
    return id;
}

/// Convex per-column mixture: out(:,j) = sum_k m(k,j) * x(c*k:c*k+c, j).
template <typename S>
int mask_mix(Graph<S>& g, int x, int m, int c) {
    const auto& X = g.val(x);
    const auto& M = g.val(m);
    const Eigen::Index K = M.rows();
    Mat<S> y = Mat<S>::Zero(c, X.cols());
    for (Eigen::Index k = 0; k < K; ++k)
        y.array() += X.middleRows(k * c, c).array().rowwise() * M.row(k).array();
    int id = g.leaf(std::move(y), detail::any_rg(g, {x, m}));
    g.nodes[id].back = [&g, x, m, id, c, K] {
        const auto& X = g.val(x);
        const auto& M = g.val(m);
        const auto& dy = g.grad(id);
        if (g.rg(x)) {
            auto& dx = g.ensure_grad(x);
            for (Eigen::Index k = 0; k < K; ++k)
                dx.middleRows(k * c, c).array() += dy.array().rowwise() * M.row(k).array();
        }
        if (g.rg(m)) {
            auto& dm = g.ensure_grad(m);
            for (Eigen::Index k = 0; k < K; ++k)
                dm.row(k) += (dy.array() * X.middleRows(k * c, c).array()).colwise().sum().matrix();
        }
    };
    return id;
}

template <typename S>
int stopgrad(Graph<S>& g, int a) {
    return g.constant(g.val(a));
}

// ------------------------------------------------------------------ losses

template <typename S>
int mean_all(Graph<S>& g, int a) {
    Mat<S> y(1, 1);
    y(0, 0) = g.val(a).mean();
    const S n = static_cast<S>(g.val(a).size());
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id, n] {
        if (g.rg(a)) g.ensure_grad(a).array() += g.grad(id)(0, 0) / n;
    };
    return id;
}

template <typename S>
int sum_all(Graph<S>& g, int a) {
    Mat<S> y(1, 1);
    y(0, 0) = g.val(a).sum();
    int id = g.leaf(std::move(y), g.rg(a));
    g.nodes[id].back = [&g, a, id] {
        if (g.rg(a)) g.ensure_grad(a).array() += g.grad(id)(0, 0);
    };
    return id;
}

/// Mean over all elements of (a-b)^2.
template <typename S>
int mse(Graph<S>& g, int a, int b) {
    Mat<S> y(1, 1);
    y(0, 0) = (g.val(a) - g.val(b)).array().square().mean();
    const S n = static_cast<S>(g.val(a).size());
    int id = g.leaf(std::move(y), detail::any_rg(g, {a, b}));
    g.nodes[id].back = [&g, a, b, id, n] {
        const S s = S(2) * g.grad(id)(0, 0) / n;
        Mat<S> d = s * (g.val(a) - g.val(b));
        if (g.rg(a)) g.ensure_grad(a) += d;
        if (g.rg(b)) g.ensure_grad(b) -= d;
    };
    return id;
}

/// Mean over columns of cross-entropy(target_col, softmax(logits_col)).
/// Targets are a constant distribution per column.
template <typename S>
int softmax_ce_cols(Graph<S>& g, int logits, Mat<S> target) {
    const auto& L = g.val(logits);
    Mat<S> p = L;
    S ce = S(0);
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
        auto c = p.col(j).array();
        const S mx = c.maxCoeff();
        c -= mx;
        const S lse = std::log(c.exp().sum());
        ce -= target.col(j).dot((c - lse).matrix());
        c = (c - lse).exp();  // softmax, kept for backward
    }
    Mat<S> y(1, 1);
    y(0, 0) = ce / static_cast<S>(p.cols());
    int id = g.leaf(std::move(y), g.rg(logits));
    g.nodes[id].back = [&g, logits, id, p = std::move(p), target = std::move(target)] {
        if (!g.rg(logits)) return;
        const S s = g.grad(id)(0, 0) / static_cast<S>(p.cols());
        g.ensure_grad(logits) += s * (p - target);
    };
    return id;
}

/// Mean over columns of entropy(softmax(logits_col)).
/// d/dz_i of one column's entropy is -p_i (log p_i + H).
template <typename S>
int softmax_entropy_cols(Graph<S>& g, int logits) {
    const auto& L = g.val(logits);
    Mat<S> p = L;
    Eigen::Matrix<S, 1, Eigen::Dynamic> ent(1, p.cols());
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
        auto c = p.col(j).array();
        const S mx = c.maxCoeff();
        c -= mx;
        const S lse = std::log(c.exp().sum());
        c = (c - lse).exp();
        ent(j) = -c.cwiseProduct((c + S(1e-30)).log()).sum();
    }
    Mat<S> y(1, 1);
    y(0, 0) = ent.sum() / static_cast<S>(p.cols());
    int id = g.leaf(std::move(y), g.rg(logits));
    g.nodes[id].back = [&g, logits, id, p = std::move(p), ent = std::move(ent)] {
        if (!g.rg(logits)) return;
        const S s = g.grad(id)(0, 0) / static_cast<S>(p.cols());
        auto& dz = g.ensure_grad(logits);
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            auto pc = p.col(j).array();
            dz.col(j).array() -= s * pc * ((pc + S(1e-30)).log() + ent(j));
        }
    };
    return id;
}

// ------------------------------------------------------------------- conv

struct ConvSpec {
    int in_ch = 0;
    int out_ch = 0;
    int kernel = 3;
    int stride = 1;
    int pad = 1;
    int out_size(int n) const { return (n + 2 * pad - kernel) / stride + 1; }
};

/// 2-D convolution via im2col. x: (Cin, B*H*W); w: (Cout, Cin*k*k); b: (Cout,1).
template <typename S>
int conv2d(Graph<S>& g, int x, int w, int b, const ConvSpec& cs, int batch, int H, int W) {
    const int Ho = cs.out_size(H);
    const int Wo = cs.out_size(W);
    const int k = cs.kernel;
    const auto& X = g.val(x);
    auto P = std::make_shared<Mat<S>>(cs.in_ch * k * k,
                                      static_cast<Eigen::Index>(batch) * Ho * Wo);
    P->setZero();
    for (int bi = 0; bi < batch; ++bi) {
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                const Eigen::Index col = (static_cast<Eigen::Index>(bi) * Ho + oy) * Wo + ox;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * cs.stride - cs.pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * cs.stride - cs.pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        const Eigen::Index src = (static_cast<Eigen::Index>(bi) * H + iy) * W + ix;
                        for (int ci = 0; ci < cs.in_ch; ++ci)
                            (*P)((ci * k + ky) * k + kx, col) = X(ci, src);
                    }
                }
            }
        }
    }
    Mat<S> y = (g.val(w) * (*P)).colwise() + g.val(b).col(0);
    int id = g.leaf(std::move(y), detail::any_rg(g, {x, w, b}));
    g.nodes[id].back = [&g, x, w, b, id, cs, batch, H, W, Ho, Wo, k, P] {
        const auto& dY = g.grad(id);
        if (g.rg(w)) g.ensure_grad(w).noalias() += dY * P->transpose();
        if (g.rg(b)) g.ensure_grad(b).col(0) += dY.rowwise().sum();
        if (!g.rg(x)) return;
        Mat<S> dP = g.val(w).transpose() * dY;
        auto& dX = g.ensure_grad(x);
        for (int bi = 0; bi < batch; ++bi) {
            for (int oy = 0; oy < Ho; ++oy) {
                for (int ox = 0; ox < Wo; ++ox) {
                    const Eigen::Index col =
                        (static_cast<Eigen::Index>(bi) * Ho + oy) * Wo + ox;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * cs.stride - cs.pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * cs.stride - cs.pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            const Eigen::Index dst =
                                (static_cast<Eigen::Index>(bi) * H + iy) * W + ix;
                            for (int ci = 0; ci < cs.in_ch; ++ci)
                                dX(ci, dst) += dP((ci * k + ky) * k + kx, col);
                        }
                    }
                }
            }
        }
    };
    return id;
}

/// Nearest-neighbour 2x upsampling. x: (C, B*H*W) -> (C, B*2H*2W).
template <typename S>
int upsample2x(Graph<S>& g, int x, int batch, int H, int W) {
    const auto& X = g.val(x);
    const Eigen::Index C = X.rows();
    Mat<S> y(C, static_cast<Eigen::Index>(batch) * 4 * H * W);
    const int H2 = 2 * H, W2 = 2 * W;
    for (int bi = 0; bi < batch; ++bi)
        for (int iy = 0; iy < H; ++iy)
            for (int ix = 0; ix < W; ++ix) {
                const Eigen::Index src = (static_cast<Eigen::Index>(bi) * H + iy) * W + ix;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        y.col((static_cast<Eigen::Index>(bi) * H2 + 2 * iy + dy) * W2 + 2 * ix +
                              dx) = X.col(src);
            }
    int id = g.leaf(std::move(y), g.rg(x));
    g.nodes[id].back = [&g, x, id, batch, H, W, H2, W2] {
        if (!g.rg(x)) return;
        auto& dX = g.ensure_grad(x);
        const auto& dY = g.grad(id);
        for (int bi = 0; bi < batch; ++bi)
            for (int iy = 0; iy < H; ++iy)
                for (int ix = 0; ix < W; ++ix) {
                    const Eigen::Index dst = (static_cast<Eigen::Index>(bi) * H + iy) * W + ix;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            dX.col(dst) +=
                                dY.col((static_cast<Eigen::Index>(bi) * H2 + 2 * iy + dy) * W2 +
                                       2 * ix + dx);
                }
    };
    return id;
}

}  // namespace oclapo::ad
