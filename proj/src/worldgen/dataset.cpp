#include "oclapo/worldgen/dataset.hpp"

#include "oclapo/core/rng.hpp"
#include "oclapo/core/tensor_file.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace oclapo::worldgen {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_json(const DatasetManifest& m) {
    json j;
    j["format_version"] = m.format_version;
    j["num_trajectories"] = m.num_trajectories;
    j["steps_per_trajectory"] = m.steps_per_trajectory;
    j["frame_size"] = m.frame_size;
    j["world_kind"] = m.world_kind == WorldKind::reach ? "reach" : "push";
    j["seed"] = m.seed;
    j["distractors"] = {{"background_enabled", m.distractors.background_enabled},
                        {"background_speed", m.distractors.background_speed},
                        {"background_action_coupling", m.distractors.background_action_coupling},
                        {"color_jitter_scale", m.distractors.color_jitter_scale},
                        {"camera_jitter_scale", m.distractors.camera_jitter_scale}};
    return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
    json j = json::parse(text);
    DatasetManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1)
        throw std::runtime_error("unsupported dataset format_version");
    m.num_trajectories = j.at("num_trajectories").get<int>();
    m.steps_per_trajectory = j.at("steps_per_trajectory").get<int>();
    m.frame_size = j.at("frame_size").get<int>();
    const auto kind = j.at("world_kind").get<std::string>();
    if (kind == "reach")
        m.world_kind = WorldKind::reach;
    else if (kind == "push")
        m.world_kind = WorldKind::push;
    else
        throw std::runtime_error("unknown world_kind: " + kind);
    m.seed = j.at("seed").get<uint64_t>();
    const auto& d = j.at("distractors");
    m.distractors.background_enabled = d.at("background_enabled").get<bool>();
    m.distractors.background_speed = d.at("background_speed").get<double>();
    m.distractors.background_action_coupling = d.at("background_action_coupling").get<double>();
    m.distractors.color_jitter_scale = d.at("color_jitter_scale").get<double>();
    m.distractors.camera_jitter_scale = d.at("camera_jitter_scale").get<double>();
    return m;
}

Trajectory run_episode(WorldKind kind, uint64_t episode_seed, int steps, int frame_size,
                       const DistractorConfig& cfg, double expert_noise) {
    Trajectory out;
    out.H = out.W = frame_size;
    out.states.reserve(static_cast<size_t>(steps) + 1);
    out.states.push_back(init_episode(kind, episode_seed));

    for (int t = 0; t < steps; ++t) {
        const Action a = expert_action(out.states.back(), expert_noise);
        auto [next, reward] = step(out.states.back(), a, cfg);
        out.actions.push_back(a.value.cast<float>());
        out.rewards.push_back(static_cast<float>(reward));
        out.states.push_back(next);
    }

    if (kind == WorldKind::push) {
        out.success = false;
        for (float r : out.rewards)
            if (r > 0.5f) out.success = true;
    } else {
        out.success = (out.states.back().agent_pos - out.states.back().goal_pos).norm() < 0.05;
    }

    const size_t npx = static_cast<size_t>(frame_size) * frame_size;
    out.frames_clean.reserve((steps + 1) * npx * 3);
    out.frames_distracted.reserve((steps + 1) * npx * 3);
    out.labels.reserve((steps + 1) * npx);
    for (const auto& s : out.states) {
        auto clean = render(s, FrameVariant::clean, cfg, frame_size, frame_size);
        auto dist = render(s, FrameVariant::distracted, cfg, frame_size, frame_size);
        out.frames_clean.insert(out.frames_clean.end(), clean.rgb.begin(), clean.rgb.end());
        out.frames_distracted.insert(out.frames_distracted.end(), dist.rgb.begin(),
                                     dist.rgb.end());
        // labels track the distracted view so masks align with what models see
        out.labels.insert(out.labels.end(), dist.labels.begin(), dist.labels.end());
    }
    return out;
}

namespace {

TensorRec states_record(const Trajectory& t) {
    const int n = static_cast<int>(t.states.size());
    auto rec = TensorRec::zeros(Dtype::f32, {n, 10});
    float* p = rec.f32();
    for (int i = 0; i < n; ++i) {
        const EnvState& s = t.states[static_cast<size_t>(i)];
        p[i * 10 + 0] = static_cast<float>(s.agent_pos.x());
        p[i * 10 + 1] = static_cast<float>(s.agent_pos.y());
        p[i * 10 + 2] = static_cast<float>(s.agent_vel.x());
        p[i * 10 + 3] = static_cast<float>(s.agent_vel.y());
        p[i * 10 + 4] = s.has_object ? static_cast<float>(s.object_pos.x()) : 0.f;
        p[i * 10 + 5] = s.has_object ? static_cast<float>(s.object_pos.y()) : 0.f;
        p[i * 10 + 6] = static_cast<float>(s.goal_pos.x());
        p[i * 10 + 7] = static_cast<float>(s.goal_pos.y());
        p[i * 10 + 8] = static_cast<float>(s.distractor_phase);
        p[i * 10 + 9] = static_cast<float>(s.time);
    }
    return rec;
}

}  // namespace

void save_trajectory(const Trajectory& t, const std::string& path) {
    const int T = t.steps();
    auto actions = TensorRec::zeros(Dtype::f32, {T, 2});
    for (int i = 0; i < T; ++i) {
        actions.f32()[i * 2] = t.actions[static_cast<size_t>(i)].x();
        actions.f32()[i * 2 + 1] = t.actions[static_cast<size_t>(i)].y();
    }
    auto rewards = TensorRec::zeros(Dtype::f32, {T});
    std::copy(t.rewards.begin(), t.rewards.end(), rewards.f32());
    auto flags = TensorRec::zeros(Dtype::i32, {2});
    flags.i32()[0] = t.success ? 1 : 0;
    flags.i32()[1] = 0;

    auto clean = TensorRec::zeros(Dtype::u8, {T + 1, t.H, t.W, 3});
    std::copy(t.frames_clean.begin(), t.frames_clean.end(), clean.u8());
    auto dist = TensorRec::zeros(Dtype::u8, {T + 1, t.H, t.W, 3});
    std::copy(t.frames_distracted.begin(), t.frames_distracted.end(), dist.u8());
    auto labels = TensorRec::zeros(Dtype::u8, {T + 1, t.H, t.W});
    std::copy(t.labels.begin(), t.labels.end(), labels.u8());

    write_records(path, {states_record(t), actions, rewards, flags, clean, dist, labels});
}

Trajectory load_trajectory(const std::string& path) {
    auto recs = read_records(path);
    if (recs.size() != 7) throw std::runtime_error("trajectory file: expected 7 records");
    Trajectory t;
    const auto& st = recs[0];
    const int n = static_cast<int>(st.dim(0));
    t.states.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* p = st.f32() + i * 10;
        EnvState& s = t.states[static_cast<size_t>(i)];
        s.agent_pos = {p[0], p[1]};
        s.agent_vel = {p[2], p[3]};
        s.object_pos = {p[4], p[5]};
        s.goal_pos = {p[6], p[7]};
        s.distractor_phase = p[8];
        s.time = static_cast<int>(p[9]);
        s.has_object = (p[4] != 0.f || p[5] != 0.f);
    }
    const int T = static_cast<int>(recs[1].dim(0));
    t.actions.resize(static_cast<size_t>(T));
    for (int i = 0; i < T; ++i)
        t.actions[static_cast<size_t>(i)] = {recs[1].f32()[i * 2], recs[1].f32()[i * 2 + 1]};
    t.rewards.assign(recs[2].f32(), recs[2].f32() + T);
    t.success = recs[3].i32()[0] != 0;
    t.H = static_cast<int>(recs[4].dim(1));
    t.W = static_cast<int>(recs[4].dim(2));
    t.frames_clean.assign(recs[4].u8(), recs[4].u8() + recs[4].count());
    t.frames_distracted.assign(recs[5].u8(), recs[5].u8() + recs[5].count());
    t.labels.assign(recs[6].u8(), recs[6].u8() + recs[6].count());
    return t;
}

namespace {
std::string traj_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "traj_%04d.bin", i);
    return buf;
}
}  // namespace

void generate_dataset(const DatasetManifest& manifest, const std::string& out_dir,
                      int retry_cap) {
    fs::create_directories(out_dir);
    for (int i = 0; i < manifest.num_trajectories; ++i) {
        Trajectory t;
        bool ok = false;
        for (int attempt = 0; attempt < retry_cap; ++attempt) {
            const uint64_t seed = derive_seed(manifest.seed, static_cast<uint64_t>(i),
                                              static_cast<uint64_t>(attempt));
            t = run_episode(manifest.world_kind, seed, manifest.steps_per_trajectory,
                            manifest.frame_size, manifest.distractors);
            if (manifest.world_kind != WorldKind::push || t.success) {
                ok = true;
                break;
            }
        }
        if (!ok)
            throw std::runtime_error("generate_dataset: expert failed " +
                                     std::to_string(retry_cap) + " retries on trajectory " +
                                     std::to_string(i) + " (" + to_json(manifest) + ")");
        save_trajectory(t, (fs::path(out_dir) / traj_name(i)).string());
    }
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << to_json(manifest) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    Dataset d;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("load_dataset: no manifest.json in " + dir);
    std::string text((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
    d.manifest = manifest_from_json(text);
    d.trajectories.reserve(static_cast<size_t>(d.manifest.num_trajectories));
    for (int i = 0; i < d.manifest.num_trajectories; ++i)
        d.trajectories.push_back(load_trajectory((fs::path(dir) / traj_name(i)).string()));
    return d;
}

}  // namespace oclapo::worldgen
