#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace oclapo::lam {

/// Which representation the dynamics models consume.
///   slots        concatenated probe-selected slot vectors
///   masks        distracted frame multiplied by the selected slots' alpha masks
///   pixels       raw distracted frames
///   pixels_clean distraction-free frames (upper-bound reference)
enum class LamVariant { slots, masks, pixels, pixels_clean };

inline const char* variant_name(LamVariant v) {
    switch (v) {
        case LamVariant::slots: return "slots";
        case LamVariant::masks: return "masks";
        case LamVariant::pixels: return "pixels";
        case LamVariant::pixels_clean: return "pixels_clean";
    }
    throw std::logic_error("bad variant");
}

inline LamVariant variant_from_name(const std::string& s) {
    if (s == "slots") return LamVariant::slots;
    if (s == "masks") return LamVariant::masks;
    if (s == "pixels") return LamVariant::pixels;
    if (s == "pixels_clean" || s == "pixels-clean") return LamVariant::pixels_clean;
    throw std::invalid_argument("unknown variant: " + s);
}

inline bool variant_is_image(LamVariant v) { return v != LamVariant::slots; }

struct LamConfig {
    LamVariant variant = LamVariant::slots;
    int latent_dim = 32;
    int delta = 10;       // z_t explains the transition t -> t+delta
    int frame_stack = 3;  // image variants only; the slots variant is stateful already
    int image_size = 32;  // image variants consume 2x-pooled frames
    int input_dim = 0;    // slots variant: selected-slot concat length, set from the archive

    // vector backbone
    int hidden = 256;
    int blocks = 3;

    // image backbone (encoder pyramid image_size -> /2 -> /4 -> /8)
    int enc_c1 = 24;
    int enc_c2 = 32;
    int enc_c3 = 48;
    int dec_c1 = 48;
    int dec_c2 = 32;
    int dec_c3 = 24;

    int steps = 1500;
    int batch = 64;  // transition pairs per step
    double lr = 1e-3;
    int warmup = 100;
    int lr_half_life = 0;
    double grad_clip = 1.0;
    uint64_t seed = 0;

    int channels() const { return variant_is_image(variant) ? 3 * frame_stack : 0; }
    int pixels() const { return image_size * image_size; }
};

std::string lam_config_to_json(const LamConfig& c);
LamConfig lam_config_from_json(const std::string& text);

}  // namespace oclapo::lam
