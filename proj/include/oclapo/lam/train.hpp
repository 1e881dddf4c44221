#pragma once

#include "oclapo/lam/model.hpp"
#include "oclapo/ocm/train.hpp"
#include "oclapo/worldgen/dataset.hpp"

#include <array>
#include <string>
#include <vector>

namespace oclapo::lam {

/// One trajectory's representation inputs. The slot archive is required for
/// the slots and masks variants and ignored otherwise.
struct RepSource {
    const worldgen::Trajectory* traj = nullptr;
    const ocm::SlotArchive* arch = nullptr;
};

/// Transitions with t + delta inside the trajectory: steps - delta + 1.
int valid_pairs(const worldgen::Trajectory& traj, int delta);

/// Representation of one frame index as a column block.
///   slots        (input_dim, 1): probe-selected slot vectors, concatenated
///   masks        (3*stack, S*S): pooled distracted frames, each multiplied by
///                the clipped sum of the selected slots' masks for that frame
///   pixels[_clean] (3*stack, S*S): pooled raw frame stack
/// Frame stacks repeat frame 0 before the trajectory start.
Eigen::MatrixXf make_input(const LamConfig& cfg, const RepSource& src,
                           const std::vector<int>& selected, int t);

/// Packs make_input column blocks for (source index, t) pairs side by side.
Eigen::MatrixXf make_batch(const LamConfig& cfg, const std::vector<RepSource>& data,
                           const std::vector<int>& selected,
                           const std::vector<std::pair<int, int>>& pairs);

struct LamTrainResult {
    std::vector<std::array<double, 2>> curve;  // step, loss
    double final_loss = 0.0;
    double copy_loss = 0.0;  // do-nothing baseline on the same sampling stream
    bool diverged = false;
    int steps_run = 0;
};

/// Joint IDM/FDM training. Checkpoints to `checkpoint_path`; on divergence
/// restores the last checkpoint and stops.
LamTrainResult train_lam(LamModel<float>& model, const std::vector<RepSource>& data,
                         const std::vector<int>& selected, const std::string& checkpoint_path);

void write_loss_curve(const std::string& path, const LamTrainResult& r);

/// z_t = idm(x_t, x_{t+delta}) for every valid t of every trajectory.
struct LatentArchive {
    std::vector<Eigen::MatrixXf> z;  // per trajectory (valid_pairs, latent_dim)
    LamVariant variant = LamVariant::slots;
    int latent_dim = 0;
    int delta = 0;
    std::string model_hash;
};

LatentArchive infer_latents(const LamModel<float>& model, const std::vector<RepSource>& data,
                            const std::vector<int>& selected, const std::string& model_hash);

/// Binary records next to a small json sidecar (`path` + `path.meta.json`).
void save_latent_archive(const std::string& path, const LatentArchive& a);
LatentArchive load_latent_archive(const std::string& path);

/// Constructs the model described by the json config file and loads weights.
LamModel<float> load_lam(const std::string& config_path, const std::string& checkpoint_path);

/// Mean over action dimensions of the ordinary-least-squares R^2 predicting
/// columns of `actions` (n, da) from rows of `latents` (n, dz) plus intercept.
double latent_action_r2(const Eigen::MatrixXd& latents, const Eigen::MatrixXd& actions);

}  // namespace oclapo::lam
