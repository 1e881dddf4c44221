#pragma once

#include "oclapo/core/nn.hpp"
#include "oclapo/lam/config.hpp"

#include <stdexcept>
#include <vector>

namespace oclapo::lam {

namespace ad = oclapo::ad;
namespace nn = oclapo::nn;

// Inverse + forward dynamics pair trained jointly on next-observation
// prediction: z = idm(x_t, x_{t+delta}); loss = ||fdm(x_t, z) - x_{t+delta}||^2.
// The future observation reaches the fdm only through z; fdm_forward does not
// take it as an argument, so the bottleneck holds by construction.
//
// Vector inputs are (input_dim, B). Image inputs are (3*frame_stack, B*S*S)
// with columns in (b*S + y)*S + x order, matching the conv ops.
template <typename S>
class LamModel {
public:
    using Mat = ad::Mat<S>;

    LamConfig cfg;
    nn::ParamStore<S> ps;

    // vector backbone; paired input linears are equivalent to one linear on
    // the concatenation but avoid materialising it
    nn::Linear<S> idm_xa, idm_xb;
    std::vector<nn::ResidualBlock<S>> idm_blocks;
    nn::LayerNorm<S> idm_ln;
    nn::Linear<S> idm_out;
    nn::Linear<S> fdm_x, fdm_z;
    std::vector<nn::ResidualBlock<S>> fdm_blocks;
    nn::LayerNorm<S> fdm_ln;
    nn::Linear<S> fdm_out;

    // image backbone
    nn::Conv<S> ienc1a, ienc1b, ienc2, ienc3;  // 1a/1b: paired first conv
    nn::ConvResBlock<S> ienc_res;
    nn::Linear<S> ihead1, ihead2;
    nn::Conv<S> fenc1, fenc2, fenc3;
    nn::Linear<S> finj;  // latent injected at the bottleneck
    nn::Conv<S> fdec_in, fdec1, fdec2, fdec3, fdec_out;
    nn::ConvResBlock<S> fdec_res;

    LamModel(const LamConfig& c, uint64_t param_seed) : cfg(c) {
        if (c.latent_dim < 1 || c.delta < 1) throw std::invalid_argument("LamConfig: bad dims");
        Rng rng(param_seed);
        if (!variant_is_image(c.variant)) {
            if (c.input_dim < 1)
                throw std::invalid_argument("LamConfig: slots variant needs input_dim");
            const int D = c.input_dim, H = c.hidden;
            idm_xa = nn::Linear<S>::create(ps, "idm_xa", D, H, rng);
            idm_xb = nn::Linear<S>::create(ps, "idm_xb", D, H, rng);
            for (int i = 0; i < c.blocks; ++i)
                idm_blocks.push_back(nn::ResidualBlock<S>::create(
                    ps, "idm_rb" + std::to_string(i), H, 2 * H, rng));
            idm_ln = nn::LayerNorm<S>::create(ps, "idm_ln", H);
            idm_out = nn::Linear<S>::create(ps, "idm_out", H, c.latent_dim, rng);
            fdm_x = nn::Linear<S>::create(ps, "fdm_x", D, H, rng);
            fdm_z = nn::Linear<S>::create(ps, "fdm_z", c.latent_dim, H, rng);
            for (int i = 0; i < c.blocks; ++i)
                fdm_blocks.push_back(nn::ResidualBlock<S>::create(
                    ps, "fdm_rb" + std::to_string(i), H, 2 * H, rng));
            fdm_ln = nn::LayerNorm<S>::create(ps, "fdm_ln", H);
            fdm_out = nn::Linear<S>::create(ps, "fdm_out", H, D, rng);
            return;
        }
        if (c.image_size % 8 != 0)
            throw std::invalid_argument("LamConfig: image_size must be divisible by 8");
        if (c.frame_stack < 1) throw std::invalid_argument("LamConfig: frame_stack >= 1");
        const int C = c.channels(), s8 = c.image_size / 8;
        ienc1a = nn::Conv<S>::create(ps, "ienc1a", {C, c.enc_c1, 3, 2, 1}, rng);
        ienc1b = nn::Conv<S>::create(ps, "ienc1b", {C, c.enc_c1, 3, 2, 1}, rng);
        ienc2 = nn::Conv<S>::create(ps, "ienc2", {c.enc_c1, c.enc_c2, 3, 2, 1}, rng);
        ienc_res = nn::ConvResBlock<S>::create(ps, "ienc_res", c.enc_c2, rng);
        ienc3 = nn::Conv<S>::create(ps, "ienc3", {c.enc_c2, c.enc_c3, 3, 2, 1}, rng);
        ihead1 = nn::Linear<S>::create(ps, "ihead1", c.enc_c3 * s8 * s8, c.hidden, rng);
        ihead2 = nn::Linear<S>::create(ps, "ihead2", c.hidden, c.latent_dim, rng);
        fenc1 = nn::Conv<S>::create(ps, "fenc1", {C, c.enc_c1, 3, 2, 1}, rng);
        fenc2 = nn::Conv<S>::create(ps, "fenc2", {c.enc_c1, c.enc_c2, 3, 2, 1}, rng);
        fenc3 = nn::Conv<S>::create(ps, "fenc3", {c.enc_c2, c.enc_c3, 3, 2, 1}, rng);
        finj = nn::Linear<S>::create(ps, "finj", c.latent_dim, c.dec_c1, rng);
        fdec_in = nn::Conv<S>::create(ps, "fdec_in", {c.enc_c3, c.dec_c1, 1, 1, 0}, rng);
        fdec1 = nn::Conv<S>::create(ps, "fdec1", {c.dec_c1, c.dec_c2, 3, 1, 1}, rng);
        fdec_res = nn::ConvResBlock<S>::create(ps, "fdec_res", c.dec_c2, rng);
        fdec2 = nn::Conv<S>::create(ps, "fdec2", {c.dec_c2, c.dec_c3, 3, 1, 1}, rng);
        fdec3 = nn::Conv<S>::create(ps, "fdec3", {c.dec_c3, c.dec_c3, 3, 1, 1}, rng);
        fdec_out = nn::Conv<S>::create(ps, "fdec_out", {c.dec_c3, C, 1, 1, 0}, rng);
    }

    /// z = f(x_t, x_{t+delta}); the only path future observations enter by.
    int idm_forward(ad::Graph<S>& g, int xt, int xtd, int B) const {
        if (!variant_is_image(cfg.variant)) {
            int h = ad::add(g, idm_xa(g, xt), idm_xb(g, xtd));
            h = ad::gelu(g, h);
            for (const auto& rb : idm_blocks) h = rb(g, h);
            return idm_out(g, idm_ln(g, h));
        }
        const int s = cfg.image_size;
        int h = ad::add(g, ienc1a(g, xt, B, s, s), ienc1b(g, xtd, B, s, s));
        h = ad::gelu(g, h);
        h = ad::gelu(g, ienc2(g, h, B, s / 2, s / 2));
        h = ienc_res(g, h, B, s / 4, s / 4);
        h = ad::gelu(g, ienc3(g, h, B, s / 4, s / 4));
        h = ad::merge_cols_to_rows(g, h, (s / 8) * (s / 8));
        return ihead2(g, ad::gelu(g, ihead1(g, h)));
    }

    /// x̂_{t+delta} = f(x_t, z). Never sees the future observation.
    int fdm_forward(ad::Graph<S>& g, int xt, int z, int B) const {
        if (!variant_is_image(cfg.variant)) {
            int h = ad::add(g, fdm_x(g, xt), fdm_z(g, z));
            h = ad::gelu(g, h);
            for (const auto& rb : fdm_blocks) h = rb(g, h);
            return fdm_out(g, fdm_ln(g, h));
        }
        const int s = cfg.image_size, n8 = (s / 8) * (s / 8);
        int h = ad::gelu(g, fenc1(g, xt, B, s, s));
        h = ad::gelu(g, fenc2(g, h, B, s / 2, s / 2));
        h = ad::gelu(g, fenc3(g, h, B, s / 4, s / 4));
        h = ad::add(g, fdec_in(g, h, B, s / 8, s / 8),
                    ad::repeat_each_col(g, finj(g, z), n8));
        h = ad::gelu(g, h);
        h = ad::upsample2x(g, h, B, s / 8, s / 8);
        h = ad::gelu(g, fdec1(g, h, B, s / 4, s / 4));
        h = fdec_res(g, h, B, s / 4, s / 4);
        h = ad::upsample2x(g, h, B, s / 4, s / 4);
        h = ad::gelu(g, fdec2(g, h, B, s / 2, s / 2));
        h = ad::upsample2x(g, h, B, s / 2, s / 2);
        h = ad::gelu(g, fdec3(g, h, B, s, s));
        return fdec_out(g, h, B, s, s);
    }

    struct LossOut {
        int loss = -1;
        int z = -1;
        int pred = -1;
    };

    /// Composed next-observation MSE: mean over batch and elements of
    /// ||fdm(x_t, idm(x_t, x_{t+delta})) - x_{t+delta}||^2.
    LossOut lam_loss(ad::Graph<S>& g, int xt, int xtd, int B) const {
        LossOut out;
        out.z = idm_forward(g, xt, xtd, B);
        out.pred = fdm_forward(g, xt, out.z, B);
        out.loss = ad::mse(g, out.pred, xtd);
        return out;
    }

    /// Plain-value latent inference for a batch of transition pairs: (latent_dim, B).
    Mat infer(const Mat& xt, const Mat& xtd, int B) const {
        ad::Graph<S> g;
        return g.val(idm_forward(g, g.constant(xt), g.constant(xtd), B));
    }
};

/// mean ||x_{t+delta} - x_t||^2; the do-nothing predictor every trained fdm
/// must beat.
template <typename S>
double copy_baseline(const ad::Mat<S>& xt, const ad::Mat<S>& xtd) {
    return static_cast<double>((xtd - xt).array().square().mean());
}

}  // namespace oclapo::lam
