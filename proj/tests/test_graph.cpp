#include "oclapo/core/graph.hpp"
#include "oclapo/core/rng.hpp"

#include <doctest.h>

#include <functional>
#include <vector>

// Every backward closure in the tape is hand-written, so each op gets checked
// against central finite differences in double precision.

namespace {

namespace ad = oclapo::ad;
using G = ad::Graph<double>;
using M = Eigen::MatrixXd;

M randm(oclapo::Rng& rng, int r, int c, double scale = 1.0) {
    M m(r, c);
    for (int j = 0; j < c; ++j)
        for (int i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
    return m;
}

// Rebuilds the graph per evaluation; `build` maps leaf ids to a scalar loss id.
struct Check {
    std::vector<M> inputs;
    std::function<int(G&, const std::vector<int>&)> build;

    double eval(std::vector<M>* grads = nullptr) const {
        G g;
        std::vector<int> ids;
        ids.reserve(inputs.size());
        for (const auto& m : inputs) ids.push_back(g.leaf(m, true));
        int loss = build(g, ids);
        double v = g.val(loss)(0, 0);
        if (grads) {
            g.backward(loss);
            grads->clear();
            for (int id : ids) grads->push_back(g.ensure_grad(id));
        }
        return v;
    }
};

void gradcheck(Check c, double tol = 1e-6, double h = 1e-5) {
    std::vector<M> an;
    c.eval(&an);
    for (size_t i = 0; i < c.inputs.size(); ++i) {
        for (Eigen::Index r = 0; r < c.inputs[i].rows(); ++r) {
            for (Eigen::Index q = 0; q < c.inputs[i].cols(); ++q) {
                const double save = c.inputs[i](r, q);
                c.inputs[i](r, q) = save + h;
                const double fp = c.eval();
                c.inputs[i](r, q) = save - h;
                const double fm = c.eval();
                c.inputs[i](r, q) = save;
                const double num = (fp - fm) / (2 * h);
                const double got = an[i](r, q);
                const double denom = std::max({1.0, std::abs(num), std::abs(got)});
                INFO("input ", i, " at (", r, ",", q, "): fd=", num, " ad=", got);
                REQUIRE(std::abs(num - got) / denom < tol);
            }
        }
    }
}

// Squashes any output to a scalar with fixed pseudo-random weights so that
// every output element influences the loss.
int squash(G& g, int x, uint64_t seed = 99) {
    oclapo::Rng rng(seed);
    M w = randm(rng, static_cast<int>(g.val(x).rows()), static_cast<int>(g.val(x).cols()));
    return ad::sum_all(g, ad::cmul(g, x, g.constant(w)));
}

}  // namespace

TEST_CASE("grad: arithmetic ops") {
    oclapo::Rng rng(1);
    M a = randm(rng, 3, 4), b = randm(rng, 3, 4);
    gradcheck({{a, b}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::add(g, in[0], in[1]));
               }});
    gradcheck({{a, b}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::sub(g, in[0], in[1]));
               }});
    gradcheck({{a, b}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::add_scaled(g, in[0], in[1], 0.37));
               }});
    gradcheck({{a, b}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::cmul(g, in[0], in[1]));
               }});
    gradcheck({{a}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::scale(g, in[0], -1.7));
               }});
}

TEST_CASE("grad: matmul and bmm") {
    oclapo::Rng rng(2);
    M a = randm(rng, 3, 5), b = randm(rng, 5, 4);
    gradcheck({{a, b}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::matmul(g, in[0], in[1]));
               }});
    // 2 blocks: A (3, 2*5), B (5, 2*4)
    M ab = randm(rng, 3, 10), bb = randm(rng, 5, 8);
    gradcheck({{ab, bb}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::bmm(g, in[0], in[1], 2, false));
               }});
    // transA: A (5, 2*3) -> per block A_i^T (3,5) times B_i (5,4)
    M at = randm(rng, 5, 6);
    gradcheck({{at, bb}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::bmm(g, in[0], in[1], 2, true));
               }});
}

TEST_CASE("grad: bias broadcast") {
    oclapo::Rng rng(3);
    M a = randm(rng, 4, 6), v = randm(rng, 4, 1);
    gradcheck({{a, v}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::colwise_add(g, in[0], in[1]));
               }});
}

TEST_CASE("grad: activations") {
    oclapo::Rng rng(4);
    M a = randm(rng, 4, 5);
    // keep relu inputs away from the kink
    for (int i = 0; i < a.size(); ++i)
        if (std::abs(a.data()[i]) < 0.05) a.data()[i] = 0.1;
    auto one = [&](auto opfn) {
        gradcheck({{a}, [opfn](G& g, const std::vector<int>& in) {
                       return squash(g, opfn(g, in[0]));
                   }});
    };
    one([](G& g, int x) { return ad::relu(g, x); });
    one([](G& g, int x) { return ad::gelu(g, x); });
    one([](G& g, int x) { return ad::sigmoid(g, x); });
    one([](G& g, int x) { return ad::tanh_(g, x); });
    one([](G& g, int x) { return ad::softplus(g, x); });
    one([](G& g, int x) { return ad::square(g, x); });
}

TEST_CASE("grad: softmaxes and normalizers") {
    oclapo::Rng rng(5);
    M a = randm(rng, 6, 4);
    gradcheck({{a}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::softmax_cols(g, in[0]));
               }});
    M b = randm(rng, 3, 8);  // two groups of 4
    gradcheck({{b}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::softmax_group_cols(g, in[0], 4));
               }});
    M c = randm(rng, 5, 3).array().abs() + 0.2;  // positive, as used for attention weights
    gradcheck({{c}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::normalize_cols_sum(g, in[0], 1e-8));
               }});
    M x = randm(rng, 6, 4);
    M gain = randm(rng, 6, 1).array() + 1.5;
    M bias = randm(rng, 6, 1);
    gradcheck({{x, gain, bias}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::layernorm_cols(g, in[0], in[1], in[2]));
               }},
              1e-5);
}

TEST_CASE("grad: shuffling ops") {
    oclapo::Rng rng(6);
    M a = randm(rng, 3, 4), b = randm(rng, 2, 4);
    gradcheck({{a, b}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::concat_rows(g, in[0], in[1]));
               }});
    gradcheck({{a}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::gather_rows(g, in[0], {2, 0, 2}));
               }});
    gradcheck({{a}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::repeat_each_col(g, in[0], 3));
               }});
    gradcheck({{a}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::tile_cols(g, in[0], 3));
               }});
    M big = randm(rng, 6, 2);  // r=3, P=2
    gradcheck({{big}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::split_rows_to_cols(g, in[0], 2));
               }});
    M tb = randm(rng, 3, 8);  // 2 blocks of (3,4)
    gradcheck({{tb}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::transpose_blocks(g, in[0], 2));
               }});
    {
        G g;
        M x(2, 6);  // blocks [(1..3);(4..6)] and [(7..9);(10..12)]
        x << 1, 2, 3, 7, 8, 9, 4, 5, 6, 10, 11, 12;
        int t = ad::transpose_blocks(g, g.leaf(x, false), 2);
        CHECK(g.val(t).rows() == 3);
        CHECK(g.val(t)(0, 0) == 1);
        CHECK(g.val(t)(0, 1) == 4);
        CHECK(g.val(t)(2, 1) == 6);
        CHECK(g.val(t)(0, 2) == 7);
    }
    M wide = randm(rng, 3, 8);  // C=3, B=2, P=4
    gradcheck({{wide}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::merge_cols_to_rows(g, in[0], 4));
               }});
    // B=2, K=3, P=2 -> cols 12
    M slots = randm(rng, 2, 12);
    gradcheck({{slots}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::regroup_slots(g, in[0], 2, 3, 2));
               }});
}

TEST_CASE("split/merge are inverse permutations") {
    oclapo::Rng rng(60);
    M x = randm(rng, 6, 5);  // r=2 * P=3 rows
    G g;
    int a = g.leaf(x, false);
    int s = ad::split_rows_to_cols(g, a, 3);
    int m = ad::merge_cols_to_rows(g, s, 3);
    CHECK((g.val(m) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("regroup_slots places slot channels where mask_mix expects them") {
    // B=1, K=2, P=2, c=1: input cols are (k0,p0),(k0,p1),(k1,p0),(k1,p1)
    G g;
    M x(1, 4);
    x << 10, 11, 20, 21;
    int a = g.leaf(x, false);
    int r = ad::regroup_slots(g, a, 1, 2, 2);
    REQUIRE(g.val(r).rows() == 2);
    REQUIRE(g.val(r).cols() == 2);
    CHECK(g.val(r)(0, 0) == 10);  // slot0 channel at p0
    CHECK(g.val(r)(1, 0) == 20);  // slot1 channel at p0
    CHECK(g.val(r)(0, 1) == 11);
    CHECK(g.val(r)(1, 1) == 21);
}

TEST_CASE("grad: mask mixing") {
    oclapo::Rng rng(7);
    M x = randm(rng, 6, 5);  // c=2, K=3
    M m = randm(rng, 3, 5).array().abs();
    gradcheck({{x, m}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::mask_mix(g, in[0], in[1], 2));
               }});
}

TEST_CASE("mask_mix with K=1 unit mask is identity") {
    oclapo::Rng rng(70);
    M x = randm(rng, 3, 4);
    G g;
    int xs = g.leaf(x, false);
    int m = g.constant(M::Ones(1, 4));
    int y = ad::mask_mix(g, xs, m, 3);
    CHECK((g.val(y) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("grad: reductions and losses") {
    oclapo::Rng rng(8);
    M a = randm(rng, 3, 4), b = randm(rng, 3, 4);
    gradcheck({{a}, [](G& g, const std::vector<int>& in) { return ad::mean_all(g, in[0]); }});
    gradcheck({{a}, [](G& g, const std::vector<int>& in) { return ad::sum_all(g, in[0]); }});
    gradcheck({{a, b}, [](G& g, const std::vector<int>& in) { return ad::mse(g, in[0], in[1]); }});
    // softmax cross-entropy against a fixed distribution
    M t = randm(rng, 5, 3).array().abs();
    for (int j = 0; j < 3; ++j) t.col(j) /= t.col(j).sum();
    M logits = randm(rng, 5, 3);
    gradcheck({{logits}, [t](G& g, const std::vector<int>& in) {
                   return ad::softmax_ce_cols(g, in[0], t);
               }});
    gradcheck({{logits}, [](G& g, const std::vector<int>& in) {
                   return ad::softmax_entropy_cols(g, in[0]);
               }});
}

TEST_CASE("softmax entropy hand values") {
    G g;
    M logits(2, 2);
    logits << 0.0, 3.0, 0.0, -3.0;  // col 0 uniform, col 1 peaked
    int id = ad::softmax_entropy_cols(g, g.leaf(logits, false));
    const double p = 1.0 / (1.0 + std::exp(-6.0));
    const double h1 = -(p * std::log(p) + (1 - p) * std::log(1 - p));
    const double want = 0.5 * (std::log(2.0) + h1);
    CHECK(g.val(id)(0, 0) == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("softmax_ce equals manual cross entropy") {
    G g;
    M logits(2, 1);
    logits << 1.0, -0.5;
    M t(2, 1);
    t << 0.3, 0.7;
    int id = ad::softmax_ce_cols(g, g.leaf(logits, false), t);
    const double z0 = std::exp(1.0), z1 = std::exp(-0.5);
    const double p0 = z0 / (z0 + z1), p1 = z1 / (z0 + z1);
    const double want = -(0.3 * std::log(p0) + 0.7 * std::log(p1));
    CHECK(g.val(id)(0, 0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("grad: conv2d across specs") {
    oclapo::Rng rng(9);
    auto run = [&](ad::ConvSpec cs, int batch, int H, int W) {
        M x = randm(rng, cs.in_ch, batch * H * W);
        M w = randm(rng, cs.out_ch, cs.in_ch * cs.kernel * cs.kernel, 0.5);
        M b = randm(rng, cs.out_ch, 1, 0.1);
        gradcheck({{x, w, b}, [cs, batch, H, W](G& g, const std::vector<int>& in) {
                       return squash(g, ad::conv2d(g, in[0], in[1], in[2], cs, batch, H, W));
                   }});
    };
    run({2, 3, 3, 1, 1}, 2, 4, 4);  // same-size 3x3
    run({2, 4, 3, 2, 1}, 2, 4, 4);  // stride-2 downsample
    run({3, 2, 5, 2, 2}, 1, 6, 6);  // 5x5 stride 2
    run({2, 3, 1, 1, 0}, 2, 3, 3);  // 1x1
}

TEST_CASE("conv2d matches direct convolution on a hand case") {
    // 1 channel, 3x3 input, 3x3 kernel of ones, zero pad: center output = sum
    G g;
    M x(1, 9);
    x << 1, 2, 3, 4, 5, 6, 7, 8, 9;
    M w = M::Ones(1, 9);
    M b = M::Zero(1, 1);
    ad::ConvSpec cs{1, 1, 3, 1, 1};
    int y = ad::conv2d(g, g.leaf(x, false), g.leaf(w, false), g.leaf(b, false), cs, 1, 3, 3);
    CHECK(g.val(y)(0, 4) == doctest::Approx(45.0));          // center sees everything
    CHECK(g.val(y)(0, 0) == doctest::Approx(1 + 2 + 4 + 5));  // corner
}

TEST_CASE("grad: upsample2x") {
    oclapo::Rng rng(10);
    M x = randm(rng, 2, 2 * 2 * 3);  // C=2, B=2, H=2, W=3
    gradcheck({{x}, [](G& g, const std::vector<int>& in) {
                   return squash(g, ad::upsample2x(g, in[0], 2, 2, 3));
               }});
    G g;
    int y = ad::upsample2x(g, g.leaf(x, false), 2, 2, 3);
    CHECK(g.val(y).cols() == 2 * 4 * 6);
    // pixel (0,0) replicated into the 2x2 corner block
    CHECK(g.val(y)(0, 0) == x(0, 0));
    CHECK(g.val(y)(0, 1) == x(0, 0));
    CHECK(g.val(y)(0, 6) == x(0, 0));
    CHECK(g.val(y)(0, 7) == x(0, 0));
}

TEST_CASE("stopgrad blocks the path") {
    oclapo::Rng rng(11);
    M a = randm(rng, 2, 2);
    G g;
    int x = g.leaf(a, true);
    int y = ad::stopgrad(g, x);
    int loss = ad::sum_all(g, ad::cmul(g, y, y));
    CHECK_FALSE(g.rg(loss));
    // mixing a stopgrad branch with a live one: only the live path gets grads
    G g2;
    int x2 = g2.leaf(a, true);
    int dead = ad::stopgrad(g2, x2);
    int live = ad::square(g2, x2);
    int loss2 = ad::sum_all(g2, ad::add(g2, live, dead));
    g2.backward(loss2);
    CHECK((g2.grad(x2) - 2.0 * a).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backward accumulates over shared subexpressions") {
    G g;
    M a(1, 1);
    a << 3.0;
    int x = g.leaf(a, true);
    int y = ad::add(g, x, x);  // y = 2x
    int loss = ad::sum_all(g, y);
    g.backward(loss);
    CHECK(g.grad(x)(0, 0) == 2.0);
}
