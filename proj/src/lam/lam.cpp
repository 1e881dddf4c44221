#include "oclapo/lam/train.hpp"

#include "oclapo/core/tensor_file.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace oclapo::lam {

using nlohmann::json;

std::string lam_config_to_json(const LamConfig& c) {
    json j;
    j["schema_version"] = 1;
    j["variant"] = variant_name(c.variant);
    j["latent_dim"] = c.latent_dim;
    j["delta"] = c.delta;
    j["frame_stack"] = c.frame_stack;
    j["image_size"] = c.image_size;
    j["input_dim"] = c.input_dim;
    j["hidden"] = c.hidden;
    j["blocks"] = c.blocks;
    j["enc_c1"] = c.enc_c1;
    j["enc_c2"] = c.enc_c2;
    j["enc_c3"] = c.enc_c3;
    j["dec_c1"] = c.dec_c1;
    j["dec_c2"] = c.dec_c2;
    j["dec_c3"] = c.dec_c3;
    j["steps"] = c.steps;
    j["batch"] = c.batch;
    j["lr"] = c.lr;
    j["warmup"] = c.warmup;
    j["lr_half_life"] = c.lr_half_life;
    j["grad_clip"] = c.grad_clip;
    j["seed"] = c.seed;
    return j.dump(2);
}

LamConfig lam_config_from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("schema_version", 0) != 1)
        throw std::invalid_argument("lam config: unsupported schema_version");
    LamConfig c;
    c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.latent_dim = j.at("latent_dim").get<int>();
    c.delta = j.at("delta").get<int>();
    c.frame_stack = j.value("frame_stack", c.frame_stack);
    c.image_size = j.value("image_size", c.image_size);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.blocks = j.value("blocks", c.blocks);
    c.enc_c1 = j.value("enc_c1", c.enc_c1);
    c.enc_c2 = j.value("enc_c2", c.enc_c2);
    c.enc_c3 = j.value("enc_c3", c.enc_c3);
    c.dec_c1 = j.value("dec_c1", c.dec_c1);
    c.dec_c2 = j.value("dec_c2", c.dec_c2);
    c.dec_c3 = j.value("dec_c3", c.dec_c3);
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.warmup = j.value("warmup", c.warmup);
    c.lr_half_life = j.value("lr_half_life", c.lr_half_life);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    return c;
}

int valid_pairs(const worldgen::Trajectory& traj, int delta) {
    return std::max(0, traj.steps() - delta + 1);
}

namespace {

Eigen::MatrixXf pooled_frame(const LamConfig& cfg, const worldgen::Trajectory& traj,
                             worldgen::FrameVariant v, int t) {
    if (traj.H != 2 * cfg.image_size || traj.W != 2 * cfg.image_size)
        throw std::invalid_argument("make_input: frames must be 2x the model image_size");
    return ocm::avg_pool2(ocm::frame_to_mat(traj.frame(v, t), traj.H, traj.W), traj.H, traj.W);
}

}  // namespace

Eigen::MatrixXf make_input(const LamConfig& cfg, const RepSource& src,
                           const std::vector<int>& selected, int t) {
    if (!src.traj) throw std::invalid_argument("make_input: missing trajectory");
    if (cfg.variant == LamVariant::slots) {
        if (!src.arch || selected.empty())
            throw std::invalid_argument("make_input: slots variant needs an archive and a selection");
        const auto& a = *src.arch;
        const int D = a.d * static_cast<int>(selected.size());
        if (cfg.input_dim != D)
            throw std::invalid_argument("make_input: input_dim does not match the selection");
        Eigen::MatrixXf x(D, 1);
        for (size_t i = 0; i < selected.size(); ++i) {
            const int k = selected[i];
            if (k < 0 || k >= a.K) throw std::invalid_argument("make_input: bad slot index");
            x.block(static_cast<Eigen::Index>(i) * a.d, 0, a.d, 1) =
                a.slots[static_cast<size_t>(t)].col(k);
        }
        return x;
    }

    const int S = cfg.image_size, N = S * S;
    Eigen::MatrixXf x(3 * cfg.frame_stack, N);
    for (int s = 0; s < cfg.frame_stack; ++s) {
        const int tf = std::max(0, t - (cfg.frame_stack - 1) + s);  // oldest first
        Eigen::MatrixXf fr;
        switch (cfg.variant) {
            case LamVariant::pixels_clean:
                fr = pooled_frame(cfg, *src.traj, worldgen::FrameVariant::clean, tf);
                break;
            case LamVariant::pixels:
                fr = pooled_frame(cfg, *src.traj, worldgen::FrameVariant::distracted, tf);
                break;
            case LamVariant::masks: {
                if (!src.arch || selected.empty())
                    throw std::invalid_argument(
                        "make_input: masks variant needs an archive and a selection");
                const auto& a = *src.arch;
                if (a.R != S)
                    throw std::invalid_argument("make_input: mask resolution != image_size");
                fr = pooled_frame(cfg, *src.traj, worldgen::FrameVariant::distracted, tf);
                Eigen::RowVectorXf msum = Eigen::RowVectorXf::Zero(N);
                for (int k : selected) {
                    if (k < 0 || k >= a.K) throw std::invalid_argument("make_input: bad slot index");
                    msum += a.masks[static_cast<size_t>(tf)].row(k);
                }
                msum = msum.cwiseMin(1.0f).cwiseMax(0.0f);
                fr.array().rowwise() *= msum.array();
                break;
            }
            case LamVariant::slots: break;  // unreachable
        }
        x.middleRows(3 * s, 3) = fr;
    }
    return x;
}

Eigen::MatrixXf make_batch(const LamConfig& cfg, const std::vector<RepSource>& data,
                           const std::vector<int>& selected,
                           const std::vector<std::pair<int, int>>& pairs) {
    const int N = variant_is_image(cfg.variant) ? cfg.pixels() : 1;
    const int C = variant_is_image(cfg.variant) ? cfg.channels() : cfg.input_dim;
    Eigen::MatrixXf x(C, static_cast<Eigen::Index>(pairs.size()) * N);
    for (size_t i = 0; i < pairs.size(); ++i)
        x.middleCols(static_cast<Eigen::Index>(i) * N, N) =
            make_input(cfg, data[static_cast<size_t>(pairs[i].first)], selected, pairs[i].second);
    return x;
}

namespace {

// Deterministic copy-baseline estimate: strided subsample capped at 1024 pairs
// so image variants stay cheap.
double estimate_copy_loss(const LamConfig& cfg, const std::vector<RepSource>& data,
                          const std::vector<int>& selected) {
    std::vector<std::pair<int, int>> all;
    for (size_t i = 0; i < data.size(); ++i)
        for (int t = 0; t < valid_pairs(*data[i].traj, cfg.delta); ++t)
            all.emplace_back(static_cast<int>(i), t);
    if (all.empty()) throw std::invalid_argument("train_lam: no valid transition pairs");
    const size_t stride = std::max<size_t>(1, all.size() / 1024);
    double acc = 0;
    long n = 0;
    for (size_t i = 0; i < all.size(); i += stride) {
        auto xt = make_input(cfg, data[static_cast<size_t>(all[i].first)], selected, all[i].second);
        auto xtd = make_input(cfg, data[static_cast<size_t>(all[i].first)], selected,
                              all[i].second + cfg.delta);
        acc += copy_baseline(xt, xtd);
        ++n;
    }
    return acc / static_cast<double>(n);
}

}  // namespace

LamTrainResult train_lam(LamModel<float>& model, const std::vector<RepSource>& data,
                         const std::vector<int>& selected, const std::string& checkpoint_path) {
    const LamConfig& c = model.cfg;
    if (data.empty()) throw std::invalid_argument("train_lam: empty dataset");
    for (const auto& d : data)
        if (valid_pairs(*d.traj, c.delta) < 1)
            throw std::invalid_argument("train_lam: trajectory shorter than delta");

    LamTrainResult res;
    res.copy_loss = estimate_copy_loss(c, data, selected);
    Rng sample(derive_seed(c.seed, 201));
    nn::LrSchedule sched{c.lr, c.warmup, c.lr_half_life};
    model.ps.save(checkpoint_path);

    std::vector<std::pair<int, int>> pairs(static_cast<size_t>(c.batch));
    for (int step = 0; step < c.steps; ++step) {
        for (auto& p : pairs) {
            p.first = static_cast<int>(sample.uniform_int(static_cast<uint64_t>(data.size())));
            p.second = static_cast<int>(sample.uniform_int(
                static_cast<uint64_t>(valid_pairs(*data[static_cast<size_t>(p.first)].traj, c.delta))));
        }
        auto xt = make_batch(c, data, selected, pairs);
        std::vector<std::pair<int, int>> shifted = pairs;
        for (auto& p : shifted) p.second += c.delta;
        auto xtd = make_batch(c, data, selected, shifted);

        ad::Graph<float> g;
        auto out = model.lam_loss(g, g.constant(xt), g.constant(xtd), c.batch);
        const double loss = g.val(out.loss)(0, 0);
        if (!std::isfinite(loss)) {
            res.diverged = true;
            model.ps.load(checkpoint_path);
            break;
        }
        res.curve.push_back({static_cast<double>(step), loss});
        model.ps.zero_grads();
        g.backward(out.loss);
        nn::collect_grads(g);
        model.ps.clip_grad_norm(c.grad_clip);
        model.ps.adam_step(sched.at(step));
        ++res.steps_run;
        if ((step + 1) % 100 == 0) model.ps.save(checkpoint_path);
    }
    model.ps.save(checkpoint_path);
    if (!res.curve.empty()) {
        const size_t tail = std::min<size_t>(10, res.curve.size());
        double s = 0;
        for (size_t i = res.curve.size() - tail; i < res.curve.size(); ++i) s += res.curve[i][1];
        res.final_loss = s / static_cast<double>(tail);
    }
    return res;
}

void write_loss_curve(const std::string& path, const LamTrainResult& r) {
    std::ofstream os(path);
    os << "step,loss\n";
    for (const auto& row : r.curve) os << static_cast<long>(row[0]) << "," << row[1] << "\n";
}

LatentArchive infer_latents(const LamModel<float>& model, const std::vector<RepSource>& data,
                            const std::vector<int>& selected, const std::string& model_hash) {
    const LamConfig& c = model.cfg;
    LatentArchive out;
    out.variant = c.variant;
    out.latent_dim = c.latent_dim;
    out.delta = c.delta;
    out.model_hash = model_hash;
    const int chunk = variant_is_image(c.variant) ? 64 : 256;
    for (size_t i = 0; i < data.size(); ++i) {
        const int T = valid_pairs(*data[i].traj, c.delta);
        Eigen::MatrixXf z(T, c.latent_dim);
        for (int t0 = 0; t0 < T; t0 += chunk) {
            const int B = std::min(chunk, T - t0);
            std::vector<std::pair<int, int>> pairs, shifted;
            for (int t = t0; t < t0 + B; ++t) {
                pairs.emplace_back(static_cast<int>(i), t);
                shifted.emplace_back(static_cast<int>(i), t + c.delta);
            }
            auto zb = model.infer(make_batch(c, data, selected, pairs),
                                  make_batch(c, data, selected, shifted), B);
            z.middleRows(t0, B) = zb.transpose();
        }
        if (!z.allFinite()) throw std::runtime_error("infer_latents: non-finite latent");
        out.z.push_back(std::move(z));
    }
    return out;
}

void save_latent_archive(const std::string& path, const LatentArchive& a) {
    std::vector<std::pair<std::string, TensorRec>> recs;
    recs.reserve(a.z.size());
    for (size_t i = 0; i < a.z.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "z_%04zu", i);
        recs.emplace_back(name, to_record(a.z[i]));
    }
    write_named_records(path, recs);
    json j;
    j["schema_version"] = 1;
    j["variant"] = variant_name(a.variant);
    j["latent_dim"] = a.latent_dim;
    j["delta"] = a.delta;
    j["model_hash"] = a.model_hash;
    j["trajectories"] = a.z.size();
    std::ofstream os(path + ".meta.json");
    os << j.dump(2) << "\n";
}

LatentArchive load_latent_archive(const std::string& path) {
    std::ifstream is(path + ".meta.json");
    if (!is) throw std::runtime_error("latent archive: missing meta sidecar for " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    json j = json::parse(ss.str());
    LatentArchive a;
    a.variant = variant_from_name(j.at("variant").get<std::string>());
    a.latent_dim = j.at("latent_dim").get<int>();
    a.delta = j.at("delta").get<int>();
    a.model_hash = j.at("model_hash").get<std::string>();
    auto recs = read_named_records(path);
    a.z.resize(recs.size());
    for (const auto& [name, rec] : recs) {
        if (name.size() != 6 || name.rfind("z_", 0) != 0)
            throw std::runtime_error("latent archive: unexpected record " + name);
        const size_t idx = std::stoul(name.substr(2));
        if (idx >= a.z.size()) throw std::runtime_error("latent archive: record index out of range");
        a.z[idx] = to_matrix(rec);
        if (a.z[idx].cols() != a.latent_dim)
            throw std::runtime_error("latent archive: latent_dim mismatch");
    }
    return a;
}

LamModel<float> load_lam(const std::string& config_path, const std::string& checkpoint_path) {
    std::ifstream is(config_path);
    if (!is) throw std::runtime_error("load_lam: cannot open " + config_path);
    std::stringstream ss;
    ss << is.rdbuf();
    LamModel<float> m(lam_config_from_json(ss.str()), 0);
    m.ps.load(checkpoint_path);
    return m;
}

double latent_action_r2(const Eigen::MatrixXd& latents, const Eigen::MatrixXd& actions) {
    if (latents.rows() != actions.rows() || latents.rows() < 2)
        throw std::invalid_argument("latent_action_r2: shape mismatch");
    Eigen::MatrixXd X(latents.rows(), latents.cols() + 1);
    X.leftCols(latents.cols()) = latents;
    X.rightCols(1).setOnes();
    Eigen::MatrixXd beta = X.colPivHouseholderQr().solve(actions);
    Eigen::MatrixXd resid = actions - X * beta;
    double acc = 0;
    int used = 0;
    for (Eigen::Index j = 0; j < actions.cols(); ++j) {
        const double mean = actions.col(j).mean();
        const double sst = (actions.col(j).array() - mean).square().sum();
        if (sst < 1e-12) continue;  // constant target carries no signal either way
        acc += 1.0 - resid.col(j).squaredNorm() / sst;
        ++used;
    }
    return used ? acc / used : 0.0;
}

}  // namespace oclapo::lam
