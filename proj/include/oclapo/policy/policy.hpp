#pragma once

#include "oclapo/lam/train.hpp"
#include "oclapo/ocm/model.hpp"

#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace oclapo::policy {

namespace ad = oclapo::ad;
namespace nn = oclapo::nn;

struct PolicyConfig {
    lam::LamVariant variant = lam::LamVariant::slots;
    int latent_dim = 32;
    int input_dim = 0;  // slots variant: selected-slot concat length
    int image_size = 32;
    int frame_stack = 3;

    int hidden = 256;
    int blocks = 2;
    int enc_c1 = 24;
    int enc_c2 = 32;
    int enc_c3 = 48;

    int steps = 1500;
    int batch = 64;
    double lr = 1e-3;
    int warmup = 100;
    int lr_half_life = 0;
    double grad_clip = 1.0;

    double budget_cap = 0.025;  // finetune may use at most this fraction of trajectories
    int ft_steps = 600;
    int ft_batch = 64;
    double ft_lr = 1e-3;
    bool ft_unfreeze = false;  // also adapt the backbone during finetuning

    uint64_t seed = 0;

    int channels() const { return 3 * frame_stack; }
    int pixels() const { return image_size * image_size; }
};

std::string policy_config_to_json(const PolicyConfig& c);
PolicyConfig policy_config_from_json(const std::string& text);

/// The observation path the policy consumes, as a lam input config. Clean
/// frames are a latent-learning device only; every policy observes the
/// distracted stream, so pixels_clean maps to pixels here.
lam::LamConfig input_config(const PolicyConfig& c);

/// Backbone mapping the variant representation to a latent prediction, plus
/// a linear action head on top. The head is what few-shot finetuning fits;
/// oracle behavior cloning trains both jointly.
template <typename S>
class PolicyNet {
public:
    using Mat = ad::Mat<S>;

    PolicyConfig cfg;
    nn::ParamStore<S> ps;

    nn::Linear<S> in;  // vector backbone
    std::vector<nn::ResidualBlock<S>> rbs;
    nn::LayerNorm<S> ln;
    nn::Linear<S> out;

    nn::Conv<S> enc1, enc2, enc3;  // image backbone
    nn::ConvResBlock<S> enc_res;
    nn::Linear<S> head1, head2;

    nn::Linear<S> act_head;  // latent -> action, the finetuned part

    explicit PolicyNet(const PolicyConfig& c, uint64_t param_seed) : cfg(c) {
        Rng rng(param_seed);
        if (c.variant == lam::LamVariant::slots) {
            if (c.input_dim < 1)
                throw std::invalid_argument("PolicyConfig: slots variant needs input_dim");
            in = nn::Linear<S>::create(ps, "in", c.input_dim, c.hidden, rng);
            for (int i = 0; i < c.blocks; ++i)
                rbs.push_back(nn::ResidualBlock<S>::create(ps, "rb" + std::to_string(i),
                                                           c.hidden, 2 * c.hidden, rng));
            ln = nn::LayerNorm<S>::create(ps, "ln", c.hidden);
            out = nn::Linear<S>::create(ps, "out", c.hidden, c.latent_dim, rng);
        } else {
            if (c.image_size % 8 != 0)
                throw std::invalid_argument("PolicyConfig: image_size must be divisible by 8");
            const int C = c.channels(), s8 = c.image_size / 8;
            enc1 = nn::Conv<S>::create(ps, "enc1", {C, c.enc_c1, 3, 2, 1}, rng);
            enc2 = nn::Conv<S>::create(ps, "enc2", {c.enc_c1, c.enc_c2, 3, 2, 1}, rng);
            enc_res = nn::ConvResBlock<S>::create(ps, "enc_res", c.enc_c2, rng);
            enc3 = nn::Conv<S>::create(ps, "enc3", {c.enc_c2, c.enc_c3, 3, 2, 1}, rng);
            head1 = nn::Linear<S>::create(ps, "head1", c.enc_c3 * s8 * s8, c.hidden, rng);
            head2 = nn::Linear<S>::create(ps, "head2", c.hidden, c.latent_dim, rng);
        }
        act_head = nn::Linear<S>::create(ps, "act_head", c.latent_dim, 2, rng);
    }

    /// (latent_dim, B) latent prediction from a representation batch.
    int backbone(ad::Graph<S>& g, int x, int B) const {
        if (cfg.variant == lam::LamVariant::slots) {
            int h = ad::gelu(g, in(g, x));
            for (const auto& rb : rbs) h = rb(g, h);
            return out(g, ln(g, h));
        }
        const int s = cfg.image_size;
        int h = ad::gelu(g, enc1(g, x, B, s, s));
        h = ad::gelu(g, enc2(g, h, B, s / 2, s / 2));
        h = enc_res(g, h, B, s / 4, s / 4);
        h = ad::gelu(g, enc3(g, h, B, s / 4, s / 4));
        h = ad::merge_cols_to_rows(g, h, (s / 8) * (s / 8));
        return head2(g, ad::gelu(g, head1(g, h)));
    }

    int action_node(ad::Graph<S>& g, int x, int B) const {
        return act_head(g, backbone(g, x, B));
    }

    Mat predict_latent(const Mat& x, int B) const {
        ad::Graph<S> g;
        return g.val(backbone(g, g.constant(x), B));
    }

    /// Single-sample action, components clamped to [-1, 1].
    Eigen::Vector2f act(const Mat& x) const {
        ad::Graph<S> g;
        Mat a = g.val(action_node(g, g.constant(x), 1));
        return {std::clamp(static_cast<float>(a(0, 0)), -1.0f, 1.0f),
                std::clamp(static_cast<float>(a(1, 0)), -1.0f, 1.0f)};
    }

    /// True when the parameter belongs to the action head.
    static bool is_head_param(const nn::Param<S>& p) {
        return p.name.rfind("act_head", 0) == 0;
    }
};

struct BcResult {
    std::vector<std::array<double, 2>> curve;  // step, loss
    double final_loss = 0.0;
    double heldout_mse = std::numeric_limits<double>::quiet_NaN();
    double latent_variance = std::numeric_limits<double>::quiet_NaN();
    int steps_run = 0;
};

/// Regresses archive latents from the policy's observation input. The last
/// ~10% of trajectories are held out for the reported MSE; the archive must
/// align with the data (same trajectory count and per-trajectory length).
BcResult train_latent_bc(PolicyNet<float>& net, const std::vector<lam::RepSource>& data,
                         const std::vector<int>& selected, const lam::LatentArchive& latents,
                         const std::string& checkpoint_path);

struct FtResult {
    std::vector<std::array<double, 2>> curve;
    double final_loss = 0.0;
    int labeled_used = 0;
    double budget_frac = 0.0;
    bool backbone_unfrozen = false;
};

/// ceil(frac * n_total), clamped to [0, n_total]. Fractions above the cap are
/// rejected unless `allow_over_cap`.
int budget_trajectories(int n_total, double frac, double cap, bool allow_over_cap);

/// Fits the action head (and the backbone too when cfg.ft_unfreeze) by MSE on
/// the true actions of exactly the given labeled trajectories. Optimizer
/// state restarts so a frozen backbone cannot drift.
FtResult finetune(PolicyNet<float>& net, const std::vector<lam::RepSource>& labeled,
                  const std::vector<int>& selected, double budget_frac);

/// End-to-end behavior cloning on ground-truth actions over the full dataset;
/// the normalization anchor.
FtResult train_oracle_bc(PolicyNet<float>& net, const std::vector<lam::RepSource>& data,
                         const std::vector<int>& selected);

// --------------------------------------------------------------- evaluation

struct Agent {
    virtual ~Agent() = default;
    virtual void reset() {}
    /// Scripted baselines skip rendering entirely.
    virtual bool wants_frames() const { return true; }
    /// Policies read the rendered distracted frame (3, H*W in [0,1]); the
    /// state is for oracle baselines (scripted expert) only.
    virtual Eigen::Vector2f act(const worldgen::EnvState& state, const Eigen::MatrixXf& frame) = 0;
};

struct RandomAgent final : Agent {
    Rng rng;
    explicit RandomAgent(uint64_t seed) : rng(seed) {}
    bool wants_frames() const override { return false; }
    Eigen::Vector2f act(const worldgen::EnvState&, const Eigen::MatrixXf&) override {
        const float x = static_cast<float>(rng.uniform(-1.0, 1.0));
        const float y = static_cast<float>(rng.uniform(-1.0, 1.0));
        return {x, y};
    }
};

struct ExpertAgent final : Agent {
    double noise;
    explicit ExpertAgent(double noise_scale = 0.0) : noise(noise_scale) {}
    bool wants_frames() const override { return false; }
    Eigen::Vector2f act(const worldgen::EnvState& s, const Eigen::MatrixXf&) override {
        auto a = worldgen::expert_action(s, noise);
        return a.value.cast<float>();
    }
};

/// Closed-loop policy driver: keeps the frame stack, and for slot/mask
/// variants runs the recurrent slot encoder on every frame.
class LatentAgent final : public Agent {
public:
    LatentAgent(const PolicyNet<float>& net, const ocm::Ocm<float>* encoder,
                std::vector<int> selected);
    void reset() override;
    Eigen::Vector2f act(const worldgen::EnvState& state, const Eigen::MatrixXf& frame) override;

private:
    Eigen::MatrixXf representation(const Eigen::MatrixXf& frame);
    const PolicyNet<float>& net_;
    const ocm::Ocm<float>* ocm_;
    std::vector<int> selected_;
    Eigen::MatrixXf carry_;
    std::deque<Eigen::MatrixXf> hist_;  // pooled (and mask-filtered) frames
};

struct EvalResult {
    double raw_score = 0.0;  // mean episodic return (reach) or success rate (push)
    double normalized_score = std::numeric_limits<double>::quiet_NaN();
    int episodes = 0;
    uint64_t seed = 0;
    worldgen::WorldKind kind = worldgen::WorldKind::reach;
};

/// Runs `episodes` closed-loop episodes with per-episode seeds derived from
/// `seed`, so different policies evaluated at the same seed share episode
/// layouts. Deterministic.
EvalResult evaluate(Agent& agent, worldgen::WorldKind kind, const worldgen::DistractorConfig& cfg,
                    int episodes, int steps, int frame_size, uint64_t seed);

/// (raw - random) / (oracle - random); 1 = oracle behavior cloning, 0 = the
/// measured random floor.
double normalize_score(double raw, double oracle_raw, double random_raw);

/// (method - baseline) / (clean - baseline) * 100.
double relative_gain(double baseline, double clean, double method);

std::string eval_result_to_json(const EvalResult& r, const std::string& variant,
                                double budget_frac);

}  // namespace oclapo::policy
