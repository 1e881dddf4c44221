#pragma once

#include <cstdint>
#include <string>

namespace oclapo::ocm {

struct OcmConfig {
    int num_slots = 4;
    int slot_dim = 128;
    int iters = 2;
    int window = 3;  // frames per training window

    int frame_size = 64;
    int enc_c1 = 24;     // encoder channels after each stride-2 conv
    int enc_c2 = 32;
    int enc_c3 = 48;
    int feat_dim = 64;   // encoder output channels on the grid
    int grid = 8;        // frame_size / 8 after three stride-2 convs
    int dec_c0 = 48;     // decoder channels at grid, half, and recon resolution
    int dec_c1 = 32;
    int dec_c2 = 24;
    int recon_size = 32;  // decoder output resolution; loss compares pooled frames

    int steps = 800;
    int batch_windows = 8;
    double lr = 1e-3;
    int warmup = 100;
    int lr_half_life = 2000;
    double grad_clip = 0.05;
    double sim_weight = 0.1;
    double sim_temp = 0.075;
    double motion_boost = 15.0;  // recon pixels weighted 1 + boost * |frame delta|
    double attn_temp = 3.0;      // multiplies the 1/sqrt(d) attention scale
    double mask_entropy_weight = 0.0;
    double mask_align_weight = 0.1;  // CE(decoder masks, attention assignment)
    // penalty on sum_k (mean attention mass of slot k)^2; uniform marginals
    // minimize it, so a single slot cannot swallow every patch
    double attn_balance_weight = 0.5;
    uint64_t seed = 0;

    int patches() const { return grid * grid; }
};

std::string ocm_config_to_json(const OcmConfig& c);
OcmConfig ocm_config_from_json(const std::string& text);

}  // namespace oclapo::ocm
