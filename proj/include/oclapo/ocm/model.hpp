#pragma once

#include "oclapo/core/nn.hpp"
#include "oclapo/ocm/config.hpp"

#include <stdexcept>
#include <vector>

namespace oclapo::ocm {

namespace ad = oclapo::ad;
namespace nn = oclapo::nn;

/// Per-pixel recon weights for frame t: 1 + boost * mean-channel |delta| to
/// the neighbouring frame, rescaled to mean 1. Emphasises whatever moves.
template <typename S>
ad::Mat<S> motion_weights(const std::vector<ad::Mat<S>>& pooled, int t, double boost) {
    const auto& a = pooled[static_cast<size_t>(t)];
    const auto& b = pooled[static_cast<size_t>(t > 0 ? t - 1 : t + 1)];
    Eigen::Array<S, 1, Eigen::Dynamic> delta = (a - b).cwiseAbs().colwise().mean();
    ad::Mat<S> w(a.rows(), a.cols());
    w.rowwise() = (S(1) + static_cast<S>(boost) * delta).matrix();
    w *= static_cast<S>(w.size()) / w.sum();
    return w;
}

// Slot-attention video model. Frames enter as (3, B*H*W) columns in
// (b*H + y)*W + x order; slots live as (d, B*K); grid features as (F, B*N).
template <typename S>
class Ocm {
public:
    using Mat = ad::Mat<S>;

    OcmConfig cfg;
    nn::ParamStore<S> ps;

    nn::Conv<S> enc1, enc2, enc3, enc4;
    nn::Linear<S> enc_pos;   // projects the fixed coordinate grid to feat_dim
    nn::LayerNorm<S> key_ln;  // appearance-only features, attention keys + sim targets
    nn::LayerNorm<S> val_ln;  // appearance + position, attention values

    nn::Param<S>* mu;         // (d, K)
    nn::Param<S>* sigma_raw;  // (d, K); sigma = softplus(sigma_raw)
    nn::Linear<S> to_k, to_v, to_q;
    nn::LayerNorm<S> slot_ln;
    nn::GruCell<S> gru;
    nn::ResidualBlock<S> slot_mlp;

    nn::Linear<S> dec_pos;  // coordinate grid -> slot_dim, added per patch
    nn::Conv<S> dec_in, dec_mid1, dec_mid2, dec_out, dec_grid;

    Mat coords;  // (4, N) fixed grid: x, y, 1-x, 1-y in [0,1]

    Ocm(const OcmConfig& c, uint64_t param_seed) : cfg(c) {
        if (c.grid * 8 != c.frame_size || c.recon_size != 4 * c.grid)
            throw std::invalid_argument(
                "OcmConfig: need grid == frame_size/8 and recon_size == 4*grid");
        if (c.num_slots < 1 || c.window < 2)
            throw std::invalid_argument("OcmConfig: num_slots >= 1, window >= 2");
        Rng rng(param_seed);
        const int F = c.feat_dim, d = c.slot_dim, N = c.patches();
        coords.resize(4, N);
        for (int y = 0; y < c.grid; ++y)
            for (int x = 0; x < c.grid; ++x) {
                const S fx = (S(x) + S(0.5)) / S(c.grid);
                const S fy = (S(y) + S(0.5)) / S(c.grid);
                coords.col(static_cast<Eigen::Index>(y) * c.grid + x) << fx, fy, S(1) - fx,
                    S(1) - fy;
            }
        enc1 = nn::Conv<S>::create(ps, "enc1", {3, c.enc_c1, 3, 2, 1}, rng);
        enc2 = nn::Conv<S>::create(ps, "enc2", {c.enc_c1, c.enc_c2, 3, 2, 1}, rng);
        enc3 = nn::Conv<S>::create(ps, "enc3", {c.enc_c2, c.enc_c3, 3, 2, 1}, rng);
        enc4 = nn::Conv<S>::create(ps, "enc4", {c.enc_c3, F, 3, 1, 1}, rng);
        enc_pos = nn::Linear<S>::create(ps, "enc_pos", 4, F, rng);
        key_ln = nn::LayerNorm<S>::create(ps, "key_ln", F);
        val_ln = nn::LayerNorm<S>::create(ps, "val_ln", F);

        mu = ps.add("slot_mu", d, c.num_slots);
        nn::init_normal(mu->value, rng, 0.5);
        sigma_raw = ps.add("slot_sigma_raw", d, c.num_slots);
        sigma_raw->value.setConstant(S(-0.4));  // softplus(-0.4) ~ 0.51
        to_k = nn::Linear<S>::create(ps, "to_k", F, d, rng);
        to_v = nn::Linear<S>::create(ps, "to_v", F, d, rng);
        to_q = nn::Linear<S>::create(ps, "to_q", d, d, rng);
        slot_ln = nn::LayerNorm<S>::create(ps, "slot_ln", d);
        gru = nn::GruCell<S>::create(ps, "slot_gru", d, d, rng);
        slot_mlp = nn::ResidualBlock<S>::create(ps, "slot_mlp", d, 2 * d, rng);

        dec_pos = nn::Linear<S>::create(ps, "dec_pos", 4, d, rng);
        dec_in = nn::Conv<S>::create(ps, "dec_in", {d, c.dec_c0, 1, 1, 0}, rng);
        dec_mid1 = nn::Conv<S>::create(ps, "dec_mid1", {c.dec_c0, c.dec_c1, 3, 1, 1}, rng);
        dec_mid2 = nn::Conv<S>::create(ps, "dec_mid2", {c.dec_c1, c.dec_c2, 3, 1, 1}, rng);
        dec_out = nn::Conv<S>::create(ps, "dec_out", {c.dec_c2, 4, 1, 1, 0}, rng);
        dec_grid = nn::Conv<S>::create(ps, "dec_grid", {c.dec_c0, 1 + N, 1, 1, 0}, rng);
    }

    /// Plain-value slot init for one window/trajectory: (d, K).
    /// Training samples mu + softplus(sigma_raw) * eps; inference returns mu
    /// exactly (same storage, no arithmetic applied).
    Mat init_slots(bool train_mode, Rng* noise) const {
        if (!train_mode) return mu->value;
        Mat eps(cfg.slot_dim, cfg.num_slots);
        for (Eigen::Index j = 0; j < eps.cols(); ++j)
            for (Eigen::Index i = 0; i < eps.rows(); ++i)
                eps(i, j) = static_cast<S>(noise->normal());
        Mat sig = sigma_raw->value;
        sig = (sig.array().max(S(0)) + (S(1) + (-sig.array().abs()).exp()).log()).matrix();
        return mu->value + sig.cwiseProduct(eps);
    }

    /// Tape version of the sampled init for B windows: (d, B*K), with
    /// gradients flowing to mu and sigma_raw through the reparameterization.
    int init_slots_node(ad::Graph<S>& g, int B, bool train_mode, Rng* noise) const {
        int m = ad::tile_cols(g, nn::use(g, mu), B);
        if (!train_mode) return m;
        Mat eps(cfg.slot_dim, static_cast<Eigen::Index>(B) * cfg.num_slots);
        for (Eigen::Index j = 0; j < eps.cols(); ++j)
            for (Eigen::Index i = 0; i < eps.rows(); ++i)
                eps(i, j) = static_cast<S>(noise->normal());
        int sig = ad::softplus(g, ad::tile_cols(g, nn::use(g, sigma_raw), B));
        return ad::add(g, m, ad::cmul(g, sig, g.constant(std::move(eps))));
    }

    struct Encoded {
        int keys = -1;  // (F, B*N) appearance only; identical patches stay identical
        int vals = -1;  // (F, B*N) appearance + position
    };

    /// frames (3, B*H*W) -> grid feature pair (F, B*N).
    Encoded encode(ad::Graph<S>& g, int frames, int B) const {
        const int H = cfg.frame_size;
        if (g.val(frames).rows() != 3 ||
            g.val(frames).cols() != static_cast<Eigen::Index>(B) * H * H)
            throw std::invalid_argument("encode: frame batch shape mismatch");
        int x = ad::gelu(g, enc1(g, frames, B, H, H));
        int h2 = H / 2;
        x = ad::gelu(g, enc2(g, x, B, h2, h2));
        int h4 = H / 4;
        x = ad::gelu(g, enc3(g, x, B, h4, h4));
        int h8 = H / 8;
        x = ad::gelu(g, enc4(g, x, B, h8, h8));
        Encoded out;
        out.keys = key_ln(g, x);
        out.vals = val_ln(g, ad::add(g, x, ad::tile_cols(g, enc_pos(g, g.constant(coords)), B)));
        return out;
    }

    struct Attended {
        int slots = -1;
        int attn = -1;  // (K, B*N) last-iteration softmax over slots per patch
    };

    /// One slot-attention refinement pass over precomputed projections.
    Attended attend_once(ad::Graph<S>& g, int slots, int k, int v, int B) const {
        const S inv_sqrt_d =
            static_cast<S>(cfg.attn_temp) / std::sqrt(static_cast<S>(cfg.slot_dim));
        int q = ad::scale(g, to_q(g, slot_ln(g, slots)), inv_sqrt_d);
        int logits = ad::bmm(g, q, k, B, true);              // (K, B*N)
        int attn = ad::softmax_cols(g, logits);              // over slots per patch
        int wt = ad::transpose_blocks(g, attn, B);           // (N, B*K)
        wt = ad::normalize_cols_sum(g, wt, S(1e-8));         // per-slot weights over patches
        int readout = ad::bmm(g, v, wt, B);                  // (d, B*K)
        int updated = gru(g, readout, slots);
        return {slot_mlp(g, updated), attn};
    }

    /// Full per-frame slot update: cfg.iters attention passes.
    Attended attend(ad::Graph<S>& g, int slots, const Encoded& feats, int B) const {
        int k = to_k(g, feats.keys);
        int v = to_v(g, feats.vals);
        Attended a{slots, -1};
        for (int i = 0; i < cfg.iters; ++i) a = attend_once(g, a.slots, k, v, B);
        return a;
    }

    /// Nearest-neighbour upsample of per-patch attention to recon resolution:
    /// (K, B*N) values -> (K, B*R*R).
    Mat upsample_attn(const Mat& attn, int B) const {
        const int G = cfg.grid, R = cfg.recon_size, f = R / G;
        Mat out(attn.rows(), static_cast<Eigen::Index>(B) * R * R);
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < R; ++y)
                for (int x = 0; x < R; ++x)
                    out.col((static_cast<Eigen::Index>(b) * R + y) * R + x) =
                        attn.col((static_cast<Eigen::Index>(b) * G + y / f) * G + x / f);
        return out;
    }

    struct Decoded {
        int rgb = -1;           // (3, B*R*R) mixture reconstruction at recon_size
        int masks = -1;         // (K, B*R*R) per-pixel softmax over slots
        int alpha_logits = -1;  // (K, B*R*R) pre-softmax
        int grid_masks = -1;    // (K, B*N)
        int sim_logits = -1;    // (N, B*N) mixture similarity logits on the grid
    };

    Decoded decode(ad::Graph<S>& g, int slots, int B) const {
        const int K = cfg.num_slots, N = cfg.patches(), G = cfg.grid;
        const int BK = B * K;
        int x = ad::repeat_each_col(g, slots, N);  // (d, B*K*N)
        x = ad::add(g, x, ad::tile_cols(g, dec_pos(g, g.constant(coords)), BK));
        int h0 = ad::gelu(g, dec_in(g, x, BK, G, G));  // (c0, B*K*N)

        // grid head: per-slot grid mask logit + similarity logits
        int gh = dec_grid(g, h0, BK, G, G);  // (1+N, B*K*N)
        std::vector<int> mask_row{0}, sim_rows;
        for (int i = 1; i <= N; ++i) sim_rows.push_back(i);
        int gmask_logit = ad::regroup_slots(g, ad::gather_rows(g, gh, mask_row), B, K, N);
        int grid_masks = ad::softmax_cols(g, gmask_logit);  // (K, B*N)
        int sim_per_slot = ad::regroup_slots(g, ad::gather_rows(g, gh, sim_rows), B, K, N);
        int sim_logits = ad::mask_mix(g, sim_per_slot, grid_masks, N);  // (N, B*N)

        // pixel trunk: grid -> recon_size
        int u = ad::upsample2x(g, h0, BK, G, G);
        u = ad::gelu(g, dec_mid1(g, u, BK, 2 * G, 2 * G));
        u = ad::upsample2x(g, u, BK, 2 * G, 2 * G);
        u = ad::gelu(g, dec_mid2(g, u, BK, 4 * G, 4 * G));
        int px = dec_out(g, u, BK, 4 * G, 4 * G);  // (4, B*K*R*R)

        const int R2 = cfg.recon_size * cfg.recon_size;
        std::vector<int> rgb_rows{0, 1, 2}, alpha_row{3};
        int rgb = ad::regroup_slots(g, ad::gather_rows(g, px, rgb_rows), B, K, R2);
        int alpha = ad::regroup_slots(g, ad::gather_rows(g, px, alpha_row), B, K, R2);
        Decoded out;
        out.alpha_logits = alpha;
        out.masks = ad::softmax_cols(g, alpha);  // (K, B*R*R)
        out.rgb = ad::mask_mix(g, rgb, out.masks, 3);
        out.grid_masks = grid_masks;
        out.sim_logits = sim_logits;
        return out;
    }

    struct WindowLoss {
        int total = -1;
        int recon = -1;
        int sim = -1;
        int entropy = -1;
        int align = -1;
        int balance = -1;
        int slots_last = -1;
    };

    // sum_k (mean patch attention of slot k)^2, averaged over the batch.
    // 1/K when every slot holds equal mass, 1.0 under total collapse.
    int attn_balance(ad::Graph<S>& g, int attn, int B) const {
        const int N = cfg.patches();
        Mat pool = Mat::Zero(static_cast<Eigen::Index>(B) * N, B);
        for (int b = 0; b < B; ++b)
            pool.block(static_cast<Eigen::Index>(b) * N, b, N, 1)
                .setConstant(S(1) / static_cast<S>(N));
        int marginal = ad::matmul(g, attn, g.constant(std::move(pool)));
        return ad::scale(g, ad::sum_all(g, ad::square(g, marginal)),
                         S(1) / static_cast<S>(B));
    }

    /// Training objective over a window of L frame batches, each (3, B*H*W).
    /// Slots carry across frames; the first frame starts from init_slots.
    /// pooled[t] must be the (3, B*R*R) 2x-pooled target for frame t.
    WindowLoss window_loss(ad::Graph<S>& g, const std::vector<Mat>& frames,
                           const std::vector<Mat>& pooled, int B, bool train_mode,
                           Rng* noise) const {
        if (frames.size() < 2) throw std::invalid_argument("window_loss: need >= 2 frames");
        const int L = static_cast<int>(frames.size());
        const int N = cfg.patches();

        int slots = init_slots_node(g, B, train_mode, noise);
        std::vector<int> keys(static_cast<size_t>(L));
        std::vector<int> sim_heads(static_cast<size_t>(L));
        int recon_acc = -1, ent_acc = -1, align_acc = -1, bal_acc = -1;
        for (int t = 0; t < L; ++t) {
            int f = g.constant(frames[static_cast<size_t>(t)]);
            Encoded feats = encode(g, f, B);
            keys[static_cast<size_t>(t)] = feats.keys;
            Attended att = attend(g, slots, feats, B);
            slots = att.slots;
            auto dec = decode(g, slots, B);
            sim_heads[static_cast<size_t>(t)] = dec.sim_logits;
            int err = ad::square(g, ad::sub(g, dec.rgb,
                                            g.constant(pooled[static_cast<size_t>(t)])));
            int w = g.constant(motion_weights(pooled, t, cfg.motion_boost));
            int r = ad::mean_all(g, ad::cmul(g, err, w));
            recon_acc = recon_acc < 0 ? r : ad::add(g, recon_acc, r);
            int e = ad::softmax_entropy_cols(g, dec.alpha_logits);
            ent_acc = ent_acc < 0 ? e : ad::add(g, ent_acc, e);
            // decoder masks track the attention assignment (stop-gradient)
            int al = ad::softmax_ce_cols(g, dec.alpha_logits,
                                         upsample_attn(g.val(att.attn), B));
            align_acc = align_acc < 0 ? al : ad::add(g, align_acc, al);
            int bl = attn_balance(g, att.attn, B);
            bal_acc = bal_acc < 0 ? bl : ad::add(g, bal_acc, bl);
        }
        // similarity terms: the decode at t predicts where each patch lands
        // at t+1; targets come from plain key values (stop-gradient)
        int sim_acc = -1;
        for (int t = 0; t + 1 < L; ++t) {
            Mat target = sim_targets(g.val(keys[static_cast<size_t>(t)]),
                                     g.val(keys[static_cast<size_t>(t + 1)]), B, N);
            int ce = ad::softmax_ce_cols(g, sim_heads[static_cast<size_t>(t)],
                                         std::move(target));
            sim_acc = sim_acc < 0 ? ce : ad::add(g, sim_acc, ce);
        }

        WindowLoss out;
        out.recon = ad::scale(g, recon_acc, S(1) / static_cast<S>(L));
        out.sim = ad::scale(g, sim_acc, S(1) / static_cast<S>(L - 1));
        out.entropy = ad::scale(g, ent_acc, S(1) / static_cast<S>(L));
        out.align = ad::scale(g, align_acc, S(1) / static_cast<S>(L));
        out.balance = ad::scale(g, bal_acc, S(1) / static_cast<S>(L));
        out.total = ad::add_scaled(g, out.recon, out.sim, static_cast<S>(cfg.sim_weight));
        out.total = ad::add_scaled(g, out.total, out.entropy,
                                   static_cast<S>(cfg.mask_entropy_weight));
        out.total = ad::add_scaled(g, out.total, out.align,
                                   static_cast<S>(cfg.mask_align_weight));
        out.total = ad::add_scaled(g, out.total, out.balance,
                                   static_cast<S>(cfg.attn_balance_weight));
        out.slots_last = slots;
        return out;
    }

    /// Recurrent inference over one trajectory. Returns per-frame slot values
    /// (T rows of (d, K)) and per-frame masks at recon resolution (K, R*R).
    /// Deterministic: slots start at mu exactly and carry across frames.
    struct InferOut {
        std::vector<Mat> slots;  // each (d, K)
        std::vector<Mat> masks;  // each (K, R*R)
        std::vector<Mat> attn;   // each (K, N)
    };

    struct StepOut {
        Mat slots;  // (d, K)
        Mat masks;  // (K, R*R)
        Mat attn;   // (K, N)
    };

    /// One recurrent inference step: updates the slot carry from a single
    /// (3, H*W) frame. Feed init_slots(false, nullptr) as the first carry.
    StepOut infer_step(const Mat& frame, const Mat& carry) const {
        ad::Graph<S> g;
        int slots = g.constant(carry);
        Encoded feats = encode(g, g.constant(frame), 1);
        Attended att = attend(g, slots, feats, 1);
        auto dec = decode(g, att.slots, 1);
        return {g.val(att.slots), g.val(dec.masks), g.val(att.attn)};
    }

    InferOut infer_trajectory(const std::vector<Mat>& frames) const {
        InferOut out;
        out.slots.reserve(frames.size());
        out.masks.reserve(frames.size());
        Mat carry = init_slots(false, nullptr);
        for (const Mat& fr : frames) {
            StepOut so = infer_step(fr, carry);
            carry = so.slots;
            out.slots.push_back(std::move(so.slots));
            out.masks.push_back(std::move(so.masks));
            out.attn.push_back(std::move(so.attn));
        }
        return out;
    }

    /// Column-stochastic similarity target: column (b, i) holds the
    /// temperature-softmaxed cosine similarities of patch i at t against all
    /// patches j at t+1. Inputs are plain values (stop-gradient by design).
    Mat sim_targets(const Mat& feat_t, const Mat& feat_tp1, int B, int N) const {
        Mat a = feat_t, b = feat_tp1;
        for (Eigen::Index j = 0; j < a.cols(); ++j) a.col(j).normalize();
        for (Eigen::Index j = 0; j < b.cols(); ++j) b.col(j).normalize();
        Mat out(N, static_cast<Eigen::Index>(B) * N);
        const S inv_temp = S(1) / static_cast<S>(cfg.sim_temp);
        for (int bb = 0; bb < B; ++bb) {
            auto at = a.middleCols(static_cast<Eigen::Index>(bb) * N, N);
            auto bt = b.middleCols(static_cast<Eigen::Index>(bb) * N, N);
            Mat logits = (bt.transpose() * at) * inv_temp;  // (N_next, N_cur)
            for (Eigen::Index i = 0; i < N; ++i) {
                auto c = logits.col(i).array();
                c -= c.maxCoeff();
                c = c.exp();
                c /= c.sum();
            }
            out.middleCols(static_cast<Eigen::Index>(bb) * N, N) = logits;
        }
        return out;
    }

private:
    mutable std::vector<int> decs_;
};

}  // namespace oclapo::ocm
