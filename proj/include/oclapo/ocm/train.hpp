#pragma once

#include "oclapo/ocm/model.hpp"
#include "oclapo/worldgen/dataset.hpp"

#include <array>
#include <string>
#include <vector>

namespace oclapo::ocm {

/// Interleaved u8 RGB scanlines -> (3, H*W) float columns in [0,1].
ad::Mat<float> frame_to_mat(const uint8_t* rgb, int H, int W);

/// 2x2 average pooling on channel-by-scanline data, (C, H*W) -> (C, (H/2)*(W/2)).
template <typename S>
ad::Mat<S> avg_pool2(const ad::Mat<S>& img, int H, int W) {
    const int Ho = H / 2, Wo = W / 2;
    ad::Mat<S> out(img.rows(), static_cast<Eigen::Index>(Ho) * Wo);
    for (int y = 0; y < Ho; ++y)
        for (int x = 0; x < Wo; ++x) {
            const Eigen::Index a = static_cast<Eigen::Index>(2 * y) * W + 2 * x;
            const Eigen::Index b = a + W;
            out.col(static_cast<Eigen::Index>(y) * Wo + x) =
                S(0.25) * (img.col(a) + img.col(a + 1) + img.col(b) + img.col(b + 1));
        }
    return out;
}

struct TrainResult {
    // one row per logged step: step, total, recon, sim
    std::vector<std::array<double, 4>> curve;
    double final_loss = 0.0;
    bool diverged = false;
    int steps_run = 0;
};

/// Trains in place on random frame windows from the distracted stream.
/// Checkpoints to checkpoint_path every 100 steps and at the end; on a
/// non-finite loss the last finite checkpoint is restored and training stops.
TrainResult train_ocm(Ocm<float>& model, const std::vector<worldgen::Trajectory>& data,
                      const std::string& checkpoint_path);

void write_loss_curve(const std::string& path, const TrainResult& r);

struct SlotArchive {
    std::vector<ad::Mat<float>> slots;  // per frame (d, K)
    std::vector<ad::Mat<float>> masks;  // per frame (K, R*R)
    int K = 0, d = 0, R = 0;
};

SlotArchive encode_trajectory(const Ocm<float>& model, const worldgen::Trajectory& traj);

void save_slot_archive(const std::string& path, const SlotArchive& a);
SlotArchive load_slot_archive(const std::string& path);

/// Constructs the model described by the json config file and loads weights.
Ocm<float> load_ocm(const std::string& config_path, const std::string& checkpoint_path);

}  // namespace oclapo::ocm
