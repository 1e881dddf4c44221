#include "oclapo/ocm/train.hpp"

#include "oclapo/core/tensor_file.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace oclapo::ocm {

using json = nlohmann::json;

std::string ocm_config_to_json(const OcmConfig& c) {
    json j;
    j["num_slots"] = c.num_slots;
    j["slot_dim"] = c.slot_dim;
    j["iters"] = c.iters;
    j["window"] = c.window;
    j["frame_size"] = c.frame_size;
    j["enc_c1"] = c.enc_c1;
    j["enc_c2"] = c.enc_c2;
    j["enc_c3"] = c.enc_c3;
    j["feat_dim"] = c.feat_dim;
    j["grid"] = c.grid;
    j["dec_c0"] = c.dec_c0;
    j["dec_c1"] = c.dec_c1;
    j["dec_c2"] = c.dec_c2;
    j["recon_size"] = c.recon_size;
    j["steps"] = c.steps;
    j["batch_windows"] = c.batch_windows;
    j["lr"] = c.lr;
    j["warmup"] = c.warmup;
    j["lr_half_life"] = c.lr_half_life;
    j["grad_clip"] = c.grad_clip;
    j["sim_weight"] = c.sim_weight;
    j["sim_temp"] = c.sim_temp;
    j["motion_boost"] = c.motion_boost;
    j["attn_temp"] = c.attn_temp;
    j["mask_entropy_weight"] = c.mask_entropy_weight;
    j["mask_align_weight"] = c.mask_align_weight;
    j["attn_balance_weight"] = c.attn_balance_weight;
    j["seed"] = c.seed;
    return j.dump(2);
}

OcmConfig ocm_config_from_json(const std::string& text) {
    json j = json::parse(text);
    OcmConfig c;
    c.num_slots = j.at("num_slots").get<int>();
    c.slot_dim = j.at("slot_dim").get<int>();
    c.iters = j.at("iters").get<int>();
    c.window = j.at("window").get<int>();
    c.frame_size = j.at("frame_size").get<int>();
    c.enc_c1 = j.at("enc_c1").get<int>();
    c.enc_c2 = j.at("enc_c2").get<int>();
    c.enc_c3 = j.at("enc_c3").get<int>();
    c.feat_dim = j.at("feat_dim").get<int>();
    c.grid = j.at("grid").get<int>();
    c.dec_c0 = j.at("dec_c0").get<int>();
    c.dec_c1 = j.at("dec_c1").get<int>();
    c.dec_c2 = j.at("dec_c2").get<int>();
    c.recon_size = j.at("recon_size").get<int>();
    c.steps = j.at("steps").get<int>();
    c.batch_windows = j.at("batch_windows").get<int>();
    c.lr = j.at("lr").get<double>();
    c.warmup = j.at("warmup").get<int>();
    c.lr_half_life = j.at("lr_half_life").get<int>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.sim_weight = j.at("sim_weight").get<double>();
    c.sim_temp = j.at("sim_temp").get<double>();
    c.motion_boost = j.at("motion_boost").get<double>();
    c.attn_temp = j.at("attn_temp").get<double>();
    c.mask_entropy_weight = j.at("mask_entropy_weight").get<double>();
    c.mask_align_weight = j.at("mask_align_weight").get<double>();
    c.attn_balance_weight = j.at("attn_balance_weight").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

ad::Mat<float> frame_to_mat(const uint8_t* rgb, int H, int W) {
    ad::Mat<float> m(3, static_cast<Eigen::Index>(H) * W);
    for (Eigen::Index p = 0; p < m.cols(); ++p)
        for (int c = 0; c < 3; ++c) m(c, p) = static_cast<float>(rgb[p * 3 + c]) / 255.0f;
    return m;
}

namespace {

// one training batch: window frames as (3, B*H*W) plus pooled recon targets
struct Batch {
    std::vector<ad::Mat<float>> frames;
    std::vector<ad::Mat<float>> pooled;
};

Batch sample_batch(const std::vector<worldgen::Trajectory>& data, const OcmConfig& cfg,
                   Rng& rng) {
    const int B = cfg.batch_windows, L = cfg.window, H = cfg.frame_size;
    const Eigen::Index px = static_cast<Eigen::Index>(H) * H;
    Batch out;
    out.frames.assign(static_cast<size_t>(L), ad::Mat<float>(3, B * px));
    out.pooled.assign(static_cast<size_t>(L), ad::Mat<float>(3, B * px / 4));
    for (int b = 0; b < B; ++b) {
        const auto& tr = data[rng.uniform_int(static_cast<uint64_t>(data.size()))];
        if (tr.H != H || tr.W != H)
            throw std::invalid_argument("train_ocm: frame size differs from config");
        const int t0 =
            static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tr.steps() + 2 - L)));
        for (int t = 0; t < L; ++t) {
            ad::Mat<float> f =
                frame_to_mat(tr.frame(worldgen::FrameVariant::distracted, t0 + t), H, H);
            out.frames[static_cast<size_t>(t)].middleCols(b * px, px) = f;
            out.pooled[static_cast<size_t>(t)].middleCols(b * px / 4, px / 4) =
                avg_pool2(f, H, H);
        }
    }
    return out;
}

}  // namespace

TrainResult train_ocm(Ocm<float>& model, const std::vector<worldgen::Trajectory>& data,
                      const std::string& checkpoint_path) {
    if (data.empty()) throw std::invalid_argument("train_ocm: empty dataset");
    const OcmConfig& cfg = model.cfg;
    Rng sample_rng(derive_seed(cfg.seed, 101));
    Rng noise_rng(derive_seed(cfg.seed, 102));
    nn::LrSchedule sched{cfg.lr, cfg.warmup, cfg.lr_half_life};

    TrainResult res;
    model.ps.save(checkpoint_path);  // last finite state, from step 0 on
    for (int step = 0; step < cfg.steps; ++step) {
        Batch batch = sample_batch(data, cfg, sample_rng);
        ad::Graph<float> g;
        auto loss =
            model.window_loss(g, batch.frames, batch.pooled, cfg.batch_windows, true,
                              &noise_rng);
        const double total = static_cast<double>(g.val(loss.total)(0, 0));
        const double recon = static_cast<double>(g.val(loss.recon)(0, 0));
        const double sim = static_cast<double>(g.val(loss.sim)(0, 0));
        if (!std::isfinite(total)) {
            model.ps.load(checkpoint_path);
            res.diverged = true;
            break;
        }
        res.curve.push_back({static_cast<double>(step), total, recon, sim});
        model.ps.zero_grads();
        g.backward(loss.total);
        nn::collect_grads(g);
        model.ps.clip_grad_norm(cfg.grad_clip);
        model.ps.adam_step(sched.at(step));
        ++res.steps_run;
        if ((step + 1) % 100 == 0) model.ps.save(checkpoint_path);
    }
    if (!res.diverged) model.ps.save(checkpoint_path);

    const size_t tail = std::min<size_t>(res.curve.size(), 10);
    double acc = 0;
    for (size_t i = res.curve.size() - tail; i < res.curve.size(); ++i) acc += res.curve[i][1];
    res.final_loss = tail ? acc / static_cast<double>(tail) : 0.0;
    return res;
}

void write_loss_curve(const std::string& path, const TrainResult& r) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "step,total,recon,sim\n";
    for (const auto& row : r.curve)
        os << static_cast<int>(row[0]) << "," << row[1] << "," << row[2] << "," << row[3]
           << "\n";
}

SlotArchive encode_trajectory(const Ocm<float>& model, const worldgen::Trajectory& traj) {
    const int H = model.cfg.frame_size;
    if (traj.H != H || traj.W != H)
        throw std::invalid_argument("encode_trajectory: frame size differs from config");
    std::vector<ad::Mat<float>> frames;
    frames.reserve(traj.states.size());
    for (int t = 0; t < static_cast<int>(traj.states.size()); ++t)
        frames.push_back(frame_to_mat(traj.frame(worldgen::FrameVariant::distracted, t), H, H));
    auto inf = model.infer_trajectory(frames);
    SlotArchive a;
    a.slots = std::move(inf.slots);
    a.masks = std::move(inf.masks);
    a.K = model.cfg.num_slots;
    a.d = model.cfg.slot_dim;
    a.R = model.cfg.recon_size;
    return a;
}

void save_slot_archive(const std::string& path, const SlotArchive& a) {
    const int64_t T1 = static_cast<int64_t>(a.slots.size());
    TensorRec slots = TensorRec::zeros(Dtype::f32, {T1, a.K, a.d});
    TensorRec masks = TensorRec::zeros(Dtype::f32, {T1, a.K, a.R, a.R});
    float* sp = slots.f32();
    float* mp = masks.f32();
    for (int64_t t = 0; t < T1; ++t) {
        const auto& s = a.slots[static_cast<size_t>(t)];  // (d, K)
        const auto& m = a.masks[static_cast<size_t>(t)];  // (K, R*R)
        for (int k = 0; k < a.K; ++k)
            for (int j = 0; j < a.d; ++j) *sp++ = s(j, k);
        for (int k = 0; k < a.K; ++k)
            for (int p = 0; p < a.R * a.R; ++p) *mp++ = m(k, p);
    }
    write_records(path, {slots, masks});
}

SlotArchive load_slot_archive(const std::string& path) {
    auto recs = read_records(path);
    if (recs.size() != 2 || recs[0].dims.size() != 3 || recs[1].dims.size() != 4)
        throw std::runtime_error("bad slot archive: " + path);
    SlotArchive a;
    const int64_t T1 = recs[0].dims[0];
    a.K = static_cast<int>(recs[0].dims[1]);
    a.d = static_cast<int>(recs[0].dims[2]);
    a.R = static_cast<int>(recs[1].dims[2]);
    if (recs[1].dims[0] != T1 || recs[1].dims[1] != a.K || recs[1].dims[3] != a.R)
        throw std::runtime_error("slot archive records disagree: " + path);
    const float* sp = recs[0].f32();
    const float* mp = recs[1].f32();
    for (int64_t t = 0; t < T1; ++t) {
        ad::Mat<float> s(a.d, a.K);
        for (int k = 0; k < a.K; ++k)
            for (int j = 0; j < a.d; ++j) s(j, k) = *sp++;
        ad::Mat<float> m(a.K, a.R * a.R);
        for (int k = 0; k < a.K; ++k)
            for (int p = 0; p < a.R * a.R; ++p) m(k, p) = *mp++;
        a.slots.push_back(std::move(s));
        a.masks.push_back(std::move(m));
    }
    return a;
}

Ocm<float> load_ocm(const std::string& config_path, const std::string& checkpoint_path) {
    std::ifstream is(config_path);
    if (!is) throw std::runtime_error("cannot read " + config_path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Ocm<float> model(ocm_config_from_json(text), 0);
    model.ps.load(checkpoint_path);
    return model;
}

}  // namespace oclapo::ocm
