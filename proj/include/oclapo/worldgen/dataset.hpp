#pragma once

#include "oclapo/worldgen/world.hpp"

#include <string>
#include <vector>

namespace oclapo::worldgen {

struct DatasetManifest {
    int num_trajectories = 10;
    int steps_per_trajectory = 50;
    int frame_size = 64;
    WorldKind world_kind = WorldKind::reach;
    DistractorConfig distractors;
    uint64_t seed = 0;
    int format_version = 1;
};

std::string to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

struct Trajectory {
    std::vector<EnvState> states;             // T+1
    std::vector<Eigen::Vector2f> actions;     // T
    std::vector<float> rewards;               // T
    bool success = false;
    int H = 0, W = 0;
    std::vector<uint8_t> frames_clean;       // (T+1) * H*W*3
    std::vector<uint8_t> frames_distracted;  // (T+1) * H*W*3
    std::vector<uint8_t> labels;             // (T+1) * H*W; 0 bg, 1 agent, 2 object

    int steps() const { return static_cast<int>(actions.size()); }
    const uint8_t* frame(FrameVariant v, int t) const {
        const auto& f = v == FrameVariant::clean ? frames_clean : frames_distracted;
        return f.data() + static_cast<size_t>(t) * H * W * 3;
    }
    const uint8_t* label_map(int t) const {
        return labels.data() + static_cast<size_t>(t) * H * W;
    }
    /// episodic return (undiscounted)
    double episode_return() const {
        double s = 0;
        for (float r : rewards) s += r;
        return s;
    }
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Trajectory> trajectories;
};

/// Runs the scripted expert once from the given seed.
Trajectory run_episode(WorldKind kind, uint64_t episode_seed, int steps, int frame_size,
                       const DistractorConfig& cfg, double expert_noise = 0.15);

/// Writes manifest.json plus traj_NNNN.bin files under out_dir. For push
/// worlds only successful episodes are kept; each trajectory retries with a
/// re-derived seed up to `retry_cap` times before giving up.
void generate_dataset(const DatasetManifest& manifest, const std::string& out_dir,
                      int retry_cap = 20);

void save_trajectory(const Trajectory& t, const std::string& path);
Trajectory load_trajectory(const std::string& path);
Dataset load_dataset(const std::string& dir);

}  // namespace oclapo::worldgen
