#include "oclapo/policy/policy.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <stdexcept>

namespace oclapo::policy {

using json = nlohmann::json;

std::string policy_config_to_json(const PolicyConfig& c) {
    json j;
    j["schema_version"] = 1;
    j["variant"] = lam::variant_name(c.variant);
    j["latent_dim"] = c.latent_dim;
    j["input_dim"] = c.input_dim;
    j["image_size"] = c.image_size;
    j["frame_stack"] = c.frame_stack;
    j["hidden"] = c.hidden;
    j["blocks"] = c.blocks;
    j["enc_c1"] = c.enc_c1;
    j["enc_c2"] = c.enc_c2;
    j["enc_c3"] = c.enc_c3;
    j["steps"] = c.steps;
    j["batch"] = c.batch;
    j["lr"] = c.lr;
    j["warmup"] = c.warmup;
    j["lr_half_life"] = c.lr_half_life;
    j["grad_clip"] = c.grad_clip;
    j["budget_cap"] = c.budget_cap;
    j["ft_steps"] = c.ft_steps;
    j["ft_batch"] = c.ft_batch;
    j["ft_lr"] = c.ft_lr;
    j["ft_unfreeze"] = c.ft_unfreeze;
    j["seed"] = c.seed;
    return j.dump(2);
}

PolicyConfig policy_config_from_json(const std::string& text) {
    json j = json::parse(text);
    PolicyConfig c;
    c.variant = lam::variant_from_name(j.at("variant").get<std::string>());
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.image_size = j.value("image_size", c.image_size);
    c.frame_stack = j.value("frame_stack", c.frame_stack);
    c.hidden = j.value("hidden", c.hidden);
    c.blocks = j.value("blocks", c.blocks);
    c.enc_c1 = j.value("enc_c1", c.enc_c1);
    c.enc_c2 = j.value("enc_c2", c.enc_c2);
    c.enc_c3 = j.value("enc_c3", c.enc_c3);
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.warmup = j.value("warmup", c.warmup);
    c.lr_half_life = j.value("lr_half_life", c.lr_half_life);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.budget_cap = j.value("budget_cap", c.budget_cap);
    c.ft_steps = j.value("ft_steps", c.ft_steps);
    c.ft_batch = j.value("ft_batch", c.ft_batch);
    c.ft_lr = j.value("ft_lr", c.ft_lr);
    c.ft_unfreeze = j.value("ft_unfreeze", c.ft_unfreeze);
    c.seed = j.value("seed", c.seed);
    return c;
}

lam::LamConfig input_config(const PolicyConfig& c) {
    lam::LamConfig lc;
    lc.variant = c.variant == lam::LamVariant::pixels_clean ? lam::LamVariant::pixels : c.variant;
    lc.input_dim = c.input_dim;
    lc.image_size = c.image_size;
    lc.frame_stack = c.frame_stack;
    return lc;
}

namespace {

// every (trajectory, t) with an action label; the archive index range for
// latent targets is narrower and handled by the caller
std::vector<std::pair<int, int>> index_pairs(const std::vector<lam::RepSource>& data,
                                             const std::vector<int>& rows) {
    std::vector<std::pair<int, int>> out;
    for (size_t i = 0; i < data.size(); ++i)
        for (int t = 0; t < rows[i]; ++t) out.emplace_back(static_cast<int>(i), t);
    return out;
}

struct SgdLoop {
    nn::LrSchedule sched;
    double grad_clip = 1.0;
    int steps = 0;
    std::vector<std::array<double, 2>> curve;

    template <typename LossFn>
    double run(nn::ParamStore<float>& ps, LossFn&& loss_fn) {
        double last = 0.0;
        for (int step = 0; step < steps; ++step) {
            ps.zero_grads();
            last = loss_fn(step);
            if (!std::isfinite(last)) throw std::runtime_error("training diverged");
            ps.clip_grad_norm(grad_clip);
            ps.adam_step(sched.at(step));
            curve.push_back({static_cast<double>(step), last});
        }
        return last;
    }

    double final_loss() const {
        if (curve.empty()) return std::numeric_limits<double>::quiet_NaN();
        const size_t n = std::min<size_t>(10, curve.size());
        double s = 0.0;
        for (size_t i = curve.size() - n; i < curve.size(); ++i) s += curve[i][1];
        return s / static_cast<double>(n);
    }
};

}  // namespace

BcResult train_latent_bc(PolicyNet<float>& net, const std::vector<lam::RepSource>& data,
                         const std::vector<int>& selected, const lam::LatentArchive& latents,
                         const std::string& checkpoint_path) {
    const PolicyConfig& cfg = net.cfg;
    if (latents.latent_dim != cfg.latent_dim)
        throw std::invalid_argument("train_latent_bc: latent_dim mismatch");
    if (latents.z.size() != data.size())
        throw std::invalid_argument("train_latent_bc: archive does not match the dataset");
    std::vector<int> rows(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        rows[i] = lam::valid_pairs(*data[i].traj, latents.delta);
        if (latents.z[i].rows() != rows[i] || latents.z[i].cols() != cfg.latent_dim)
            throw std::invalid_argument("train_latent_bc: archive shape mismatch at trajectory " +
                                        std::to_string(i));
    }

    const int n = static_cast<int>(data.size());
    const int n_held = n >= 2 ? std::max(1, n / 10) : 0;
    const int n_train = n - n_held;
    if (n_train < 1) throw std::invalid_argument("train_latent_bc: no training trajectories");

    std::vector<std::pair<int, int>> train_pairs;
    for (int i = 0; i < n_train; ++i)
        for (int t = 0; t < rows[static_cast<size_t>(i)]; ++t) train_pairs.emplace_back(i, t);
    if (train_pairs.empty()) throw std::invalid_argument("train_latent_bc: empty training set");

    const lam::LamConfig in_cfg = input_config(cfg);
    Rng sample(derive_seed(cfg.seed, 301));

    SgdLoop loop;
    loop.sched = {cfg.lr, cfg.warmup, cfg.lr_half_life};
    loop.grad_clip = cfg.grad_clip;
    loop.steps = cfg.steps;
    BcResult out;
    loop.run(net.ps, [&](int) {
        std::vector<std::pair<int, int>> batch(static_cast<size_t>(cfg.batch));
        Eigen::MatrixXf target(cfg.latent_dim, cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& p = train_pairs[sample.uniform_int(train_pairs.size())];
            batch[static_cast<size_t>(b)] = p;
            target.col(b) = latents.z[static_cast<size_t>(p.first)].row(p.second).transpose();
        }
        ad::Graph<float> g;
        int pred = net.backbone(g, g.constant(lam::make_batch(in_cfg, data, selected, batch)),
                                cfg.batch);
        int loss = ad::mse(g, pred, g.constant(target));
        g.backward(loss);
        nn::collect_grads(g);
        return static_cast<double>(g.val(loss)(0, 0));
    });
    out.curve = loop.curve;
    out.final_loss = loop.final_loss();
    out.steps_run = static_cast<int>(loop.curve.size());
    if (!checkpoint_path.empty()) net.ps.save(checkpoint_path);

    // held-out report: MSE against the archive vs. the variance left by
    // predicting the training-set mean latent
    if (n_held > 0) {
        Eigen::VectorXd train_mean = Eigen::VectorXd::Zero(cfg.latent_dim);
        long cnt = 0;
        for (int i = 0; i < n_train; ++i) {
            const auto& z = latents.z[static_cast<size_t>(i)];
            train_mean += z.cast<double>().colwise().sum().transpose();
            cnt += z.rows();
        }
        if (cnt > 0) train_mean /= static_cast<double>(cnt);
        double se = 0.0, var = 0.0;
        long m = 0;
        for (int i = n_train; i < n; ++i) {
            const auto& z = latents.z[static_cast<size_t>(i)];
            for (int t = 0; t < rows[static_cast<size_t>(i)]; ++t) {
                auto x = lam::make_input(in_cfg, data[static_cast<size_t>(i)], selected, t);
                Eigen::VectorXd pred =
                    net.predict_latent(x, 1).col(0).cast<double>();
                Eigen::VectorXd zt = z.row(t).transpose().cast<double>();
                se += (pred - zt).squaredNorm();
                var += (zt - train_mean).squaredNorm();
                m += cfg.latent_dim;
            }
        }
        if (m > 0) {
            out.heldout_mse = se / static_cast<double>(m);
            out.latent_variance = var / static_cast<double>(m);
        }
    }
    return out;
}

int budget_trajectories(int n_total, double frac, double cap, bool allow_over_cap) {
    if (n_total < 0 || !std::isfinite(frac) || frac < 0.0)
        throw std::invalid_argument("budget_trajectories: bad arguments");
    if (!allow_over_cap && frac > cap + 1e-12)
        throw std::invalid_argument("budget_trajectories: fraction exceeds the labeled-data cap");
    const int k = static_cast<int>(std::ceil(frac * n_total - 1e-9));
    return std::min(std::max(k, 0), n_total);
}

namespace {

FtResult fit_actions(PolicyNet<float>& net, const std::vector<lam::RepSource>& data,
                     const std::vector<int>& selected, double budget_frac, bool unfreeze,
                     int steps, int batch, double lr, uint64_t seed_salt) {
    const PolicyConfig& cfg = net.cfg;
    std::vector<int> rows(data.size());
    for (size_t i = 0; i < data.size(); ++i) rows[i] = data[i].traj->steps();
    auto pairs = index_pairs(data, rows);
    if (pairs.empty()) throw std::invalid_argument("action fit: no labeled transitions");

    const lam::LamConfig in_cfg = input_config(cfg);
    Rng sample(derive_seed(cfg.seed, seed_salt));
    net.ps.reset_optimizer();

    SgdLoop loop;
    loop.sched = {lr, cfg.warmup, cfg.lr_half_life};
    loop.grad_clip = cfg.grad_clip;
    loop.steps = steps;
    loop.run(net.ps, [&](int) {
        std::vector<std::pair<int, int>> bp(static_cast<size_t>(batch));
        Eigen::MatrixXf target(2, batch);
        for (int b = 0; b < batch; ++b) {
            const auto& p = pairs[sample.uniform_int(pairs.size())];
            bp[static_cast<size_t>(b)] = p;
            target.col(b) = data[static_cast<size_t>(p.first)]
                                .traj->actions[static_cast<size_t>(p.second)];
        }
        ad::Graph<float> g;
        int pred = net.action_node(g, g.constant(lam::make_batch(in_cfg, data, selected, bp)),
                                   batch);
        int loss = ad::mse(g, pred, g.constant(target));
        g.backward(loss);
        nn::collect_grads(g);
        if (!unfreeze)
            for (auto& p : net.ps.all())
                if (!PolicyNet<float>::is_head_param(*p)) p->grad.setZero();
        return static_cast<double>(g.val(loss)(0, 0));
    });

    FtResult out;
    out.curve = loop.curve;
    out.final_loss = loop.final_loss();
    out.labeled_used = static_cast<int>(data.size());
    out.budget_frac = budget_frac;
    out.backbone_unfrozen = unfreeze;
    return out;
}

}  // namespace

FtResult finetune(PolicyNet<float>& net, const std::vector<lam::RepSource>& labeled,
                  const std::vector<int>& selected, double budget_frac) {
    const PolicyConfig& c = net.cfg;
    return fit_actions(net, labeled, selected, budget_frac, c.ft_unfreeze, c.ft_steps,
                       c.ft_batch, c.ft_lr, 311);
}

FtResult train_oracle_bc(PolicyNet<float>& net, const std::vector<lam::RepSource>& data,
                         const std::vector<int>& selected) {
    const PolicyConfig& c = net.cfg;
    return fit_actions(net, data, selected, 1.0, true, c.steps, c.batch, c.lr, 313);
}

// --------------------------------------------------------------- evaluation

LatentAgent::LatentAgent(const PolicyNet<float>& net, const ocm::Ocm<float>* encoder,
                         std::vector<int> selected)
    : net_(net), ocm_(encoder), selected_(std::move(selected)) {
    const auto v = net.cfg.variant;
    if ((v == lam::LamVariant::slots || v == lam::LamVariant::masks)) {
        if (!ocm_ || selected_.empty())
            throw std::invalid_argument("LatentAgent: slot variants need an encoder and a selection");
        for (int k : selected_)
            if (k < 0 || k >= ocm_->cfg.num_slots)
                throw std::invalid_argument("LatentAgent: bad slot index");
        if (v == lam::LamVariant::slots &&
            net.cfg.input_dim != ocm_->cfg.slot_dim * static_cast<int>(selected_.size()))
            throw std::invalid_argument("LatentAgent: input_dim does not match the selection");
        if (v == lam::LamVariant::masks && net.cfg.image_size != ocm_->cfg.recon_size)
            throw std::invalid_argument("LatentAgent: mask resolution != policy image_size");
    }
    reset();
}

void LatentAgent::reset() {
    carry_ = ocm_ ? ocm_->init_slots(false, nullptr) : Eigen::MatrixXf();
    hist_.clear();
}

Eigen::MatrixXf LatentAgent::representation(const Eigen::MatrixXf& frame) {
    const PolicyConfig& c = net_.cfg;
    if (c.variant == lam::LamVariant::slots) {
        ocm::Ocm<float>::StepOut so = ocm_->infer_step(frame, carry_);
        carry_ = so.slots;
        Eigen::MatrixXf x(c.input_dim, 1);
        for (size_t i = 0; i < selected_.size(); ++i)
            x.block(static_cast<Eigen::Index>(i) * ocm_->cfg.slot_dim, 0, ocm_->cfg.slot_dim, 1) =
                so.slots.col(selected_[i]);
        return x;
    }

    // image variants stack pooled frames, oldest first, padded by repetition
    const int F = static_cast<int>(std::lround(std::sqrt(static_cast<double>(frame.cols()))));
    if (F != 2 * c.image_size)
        throw std::invalid_argument("LatentAgent: frame resolution must be 2x image_size");
    Eigen::MatrixXf fr = ocm::avg_pool2(frame, F, F);
    if (c.variant == lam::LamVariant::masks) {
        ocm::Ocm<float>::StepOut so = ocm_->infer_step(frame, carry_);
        carry_ = so.slots;
        Eigen::RowVectorXf msum = Eigen::RowVectorXf::Zero(c.pixels());
        for (int k : selected_) msum += so.masks.row(k);
        msum = msum.cwiseMin(1.0f).cwiseMax(0.0f);
        fr.array().rowwise() *= msum.array();
    }
    hist_.push_back(std::move(fr));
    while (static_cast<int>(hist_.size()) > c.frame_stack) hist_.pop_front();
    Eigen::MatrixXf x(c.channels(), c.pixels());
    for (int s = 0; s < c.frame_stack; ++s) {
        const int idx = std::max(0, static_cast<int>(hist_.size()) - c.frame_stack + s);
        x.middleRows(3 * s, 3) = hist_[static_cast<size_t>(idx)];
    }
    return x;
}

Eigen::Vector2f LatentAgent::act(const worldgen::EnvState&, const Eigen::MatrixXf& frame) {
    return net_.act(representation(frame));
}

EvalResult evaluate(Agent& agent, worldgen::WorldKind kind, const worldgen::DistractorConfig& cfg,
                    int episodes, int steps, int frame_size, uint64_t seed) {
    if (episodes < 1 || steps < 1) throw std::invalid_argument("evaluate: bad arguments");
    double total = 0.0;
    for (int ep = 0; ep < episodes; ++ep) {
        worldgen::EnvState s =
            worldgen::init_episode(kind, derive_seed(seed, 9000 + static_cast<uint64_t>(ep)));
        agent.reset();
        double ret = 0.0;
        for (int t = 0; t < steps; ++t) {
            Eigen::MatrixXf frame;
            if (agent.wants_frames()) {
                auto ro = worldgen::render(s, worldgen::FrameVariant::distracted, cfg,
                                           frame_size, frame_size);
                frame = ocm::frame_to_mat(ro.rgb.data(), frame_size, frame_size);
            }
            Eigen::Vector2f a = agent.act(s, frame);
            worldgen::Action act;
            act.value = {std::clamp(static_cast<double>(a[0]), -1.0, 1.0),
                         std::clamp(static_cast<double>(a[1]), -1.0, 1.0)};
            auto [ns, r] = worldgen::step(s, act, cfg);
            s = ns;
            ret += r;
            if (kind == worldgen::WorldKind::push && ret >= 1.0) break;  // success is terminal
        }
        total += kind == worldgen::WorldKind::push ? (ret >= 1.0 ? 1.0 : 0.0) : ret;
    }
    EvalResult out;
    out.raw_score = total / episodes;
    out.episodes = episodes;
    out.seed = seed;
    out.kind = kind;
    return out;
}

double normalize_score(double raw, double oracle_raw, double random_raw) {
    const double denom = oracle_raw - random_raw;
    if (!(denom > 1e-12))
        throw std::invalid_argument("normalize_score: oracle does not beat the random floor");
    return (raw - random_raw) / denom;
}

double relative_gain(double baseline, double clean, double method) {
    const double gap = clean - baseline;
    if (!(gap > 0.0))
        throw std::invalid_argument("relative_gain: clean anchor does not beat the baseline");
    return (method - baseline) / gap * 100.0;
}

std::string eval_result_to_json(const EvalResult& r, const std::string& variant,
                                double budget_frac) {
    json j;
    j["raw"] = r.raw_score;
    j["normalized"] = r.normalized_score;  // NaN serializes as null
    j["episodes"] = r.episodes;
    j["seed"] = r.seed;
    j["task"] = r.kind == worldgen::WorldKind::push ? "push" : "reach";
    j["variant"] = variant;
    j["budget"] = budget_frac;
    return j.dump(2);
}

}  // namespace oclapo::policy
