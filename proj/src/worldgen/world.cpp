#include "oclapo/worldgen/world.hpp"

#include "oclapo/core/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace oclapo::worldgen {

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }
double clamp1(double v) { return std::min(1.0, std::max(-1.0, v)); }

// noise/jitter streams derived from the episode seed
constexpr uint64_t kNoiseX = 771, kNoiseY = 772;
constexpr uint64_t kCamX = 811, kCamY = 812;
constexpr uint64_t kHue = 821, kBright = 822;

}  // namespace

std::pair<EnvState, double> step(const EnvState& state, const Action& action,
                                 const DistractorConfig& cfg) {
    if (!action.value.allFinite()) throw std::invalid_argument("step: non-finite action");
    Eigen::Vector2d a(clamp1(action.value.x()), clamp1(action.value.y()));

    EnvState next = state;
    const Eigen::Vector2d target = state.agent_pos + kActionGain * a;
    next.agent_pos = Eigen::Vector2d(clamp01(target.x()), clamp01(target.y()));
    next.agent_vel = next.agent_pos - state.agent_pos;

    double reward = 0.0;
    if (state.has_object) {
        const double pre = (state.object_pos - state.goal_pos).norm();
        Eigen::Vector2d d = state.object_pos - next.agent_pos;
        const double contact = kAgentRadius + kObjectRadius;
        if (d.norm() < contact) {
            Eigen::Vector2d n = d.norm() > 1e-9 ? d.normalized() : Eigen::Vector2d(1, 0);
            next.object_pos = next.agent_pos + contact * n;
            next.object_pos.x() = clamp01(next.object_pos.x());
            next.object_pos.y() = clamp01(next.object_pos.y());
        }
        const double post = (next.object_pos - next.goal_pos).norm();
        if (pre >= kSuccessRadius && post < kSuccessRadius) reward = 1.0;
    } else {
        reward = -(next.agent_pos - next.goal_pos).norm();
    }

    next.distractor_phase =
        state.distractor_phase + cfg.background_speed + cfg.background_action_coupling * a.norm();
    next.time = state.time + 1;
    return {next, reward};
}

Action expert_action(const EnvState& state, double noise_scale) {
    constexpr double kP = 7.0;
    Eigen::Vector2d drive;
    if (!state.has_object) {
        drive = kP * (state.goal_pos - state.agent_pos);
    } else {
        // get behind the object relative to the goal, then press through it
        Eigen::Vector2d to_goal = state.goal_pos - state.object_pos;
        Eigen::Vector2d dir = to_goal.norm() > 1e-9 ? to_goal.normalized() : Eigen::Vector2d(1, 0);
        const double contact = kAgentRadius + kObjectRadius;
        Eigen::Vector2d rel = state.agent_pos - state.object_pos;
        const double cosang = rel.norm() > 1e-9 ? (-rel.normalized()).dot(dir) : 1.0;
        if (cosang > 0.8) {
            // aligned behind the object: drive hard through its center
            drive = kP * (state.object_pos + 0.05 * dir - state.agent_pos);
        } else {
            // navigate to the approach point; at contact, slide around the
            // surface instead of plowing through or backing away
            Eigen::Vector2d to_app = state.object_pos - (contact + 0.01) * dir - state.agent_pos;
            const double clearance = rel.norm() - contact;
            if (clearance < 0.02 && rel.norm() > 1e-9) {
                Eigen::Vector2d n = rel.normalized();
                const double radial = to_app.dot(n);
                if (radial < 0) to_app -= radial * n;
            }
            drive = kP * to_app;
        }
    }
    Eigen::Vector2d a(clamp1(drive.x()), clamp1(drive.y()));
    if (noise_scale > 0.0) {
        const double t = 0.13 * state.time;
        a.x() = clamp1(a.x() + noise_scale *
                                   smooth_noise(derive_seed(state.episode_rng_seed, kNoiseX), t));
        a.y() = clamp1(a.y() + noise_scale *
                                   smooth_noise(derive_seed(state.episode_rng_seed, kNoiseY), t));
    }
    return Action{a};
}

namespace {

struct Rgb {
    double r, g, b;
};

// disc coverage with a ~1px anti-aliased edge
double disc_alpha(const Eigen::Vector2d& p, const Eigen::Vector2d& c, double radius, double px) {
    const double d = (p - c).norm();
    return std::min(1.0, std::max(0.0, (radius - d) / px + 0.5));
}

double box_alpha(const Eigen::Vector2d& p, const Eigen::Vector2d& c, double half, double px) {
    const double dx = half - std::abs(p.x() - c.x());
    const double dy = half - std::abs(p.y() - c.y());
    const double d = std::min(dx, dy);
    return std::min(1.0, std::max(0.0, d / px + 0.5));
}

Rgb background_color(const Eigen::Vector2d& p, double phase) {
    // drifting diagonal stripes plus two orbiting blobs, all driven by phase
    const double s = std::sin(2.0 * M_PI * (2.0 * p.x() + 1.3 * p.y()) - 2.2 * phase);
    Rgb c{0.16 + 0.10 * s, 0.15 + 0.06 * s, 0.20 - 0.05 * s};
    for (int j = 0; j < 2; ++j) {
        const double ang = 0.9 * phase + 2.9 * j;
        const Eigen::Vector2d bc(0.5 + 0.33 * std::cos(ang), 0.5 + 0.33 * std::sin(ang));
        const double w = std::exp(-(p - bc).squaredNorm() / 0.015);
        c.r += 0.22 * w * (j == 0 ? 1.0 : 0.2);
        c.g += 0.10 * w;
        c.b += 0.22 * w * (j == 0 ? 0.2 : 1.0);
    }
    return c;
}

// rotation about the gray axis, a cheap hue shift
Rgb hue_rotate(const Rgb& c, double angle, double gain) {
    const double cs = std::cos(angle), sn = std::sin(angle);
    const double third = 1.0 / 3.0;
    const double rt = std::sqrt(third);
    double m[3][3];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double same = (i == j) ? 1.0 : 0.0;
            m[i][j] = cs * same + (1.0 - cs) * third + sn * rt * ((i - j + 3) % 3 == 1 ? 1.0 : ((j - i + 3) % 3 == 1 ? -1.0 : 0.0));
        }
    Rgb out{m[0][0] * c.r + m[0][1] * c.g + m[0][2] * c.b,
            m[1][0] * c.r + m[1][1] * c.g + m[1][2] * c.b,
            m[2][0] * c.r + m[2][1] * c.g + m[2][2] * c.b};
    out.r *= gain;
    out.g *= gain;
    out.b *= gain;
    return out;
}

uint8_t to_u8(double v) {
    return static_cast<uint8_t>(std::lround(255.0 * std::min(1.0, std::max(0.0, v))));
}

}  // namespace

RenderOut render(const EnvState& state, FrameVariant variant, const DistractorConfig& cfg,
                 int H, int W) {
    RenderOut out;
    out.rgb.resize(static_cast<size_t>(H) * W * 3);
    out.labels.assign(static_cast<size_t>(H) * W, 0);

    const bool dis = variant == FrameVariant::distracted;
    const double px = 1.0 / W;

    Eigen::Vector2d cam(0, 0);
    double hue = 0.0, gain = 1.0;
    if (dis) {
        const double t = 0.31 * state.time;
        cam.x() = cfg.camera_jitter_scale *
                  smooth_noise(derive_seed(state.episode_rng_seed, kCamX), t);
        cam.y() = cfg.camera_jitter_scale *
                  smooth_noise(derive_seed(state.episode_rng_seed, kCamY), t);
        Rng hue_rng(derive_seed(state.episode_rng_seed, kHue));
        Rng br_rng(derive_seed(state.episode_rng_seed, kBright));
        hue = cfg.color_jitter_scale * hue_rng.uniform(-1.0, 1.0);
        gain = 1.0 + 0.4 * cfg.color_jitter_scale * br_rng.uniform(-1.0, 1.0);
    }

    const Rgb agent_col{0.25, 0.55, 0.95};
    const Rgb object_col{0.95, 0.55, 0.15};
    const Rgb goal_col{0.20, 0.75, 0.30};
    const Rgb flat_bg{0.15, 0.15, 0.17};

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            // world-space sample point for this pixel, shifted by the camera
            Eigen::Vector2d p((x + 0.5) / W + cam.x(), (y + 0.5) / H + cam.y());

            Rgb c = (dis && cfg.background_enabled) ? background_color(p, state.distractor_phase)
                                                    : flat_bg;
            const double ga = box_alpha(p, state.goal_pos, kGoalHalf, px);
            c = {c.r + ga * (goal_col.r - c.r), c.g + ga * (goal_col.g - c.g),
                 c.b + ga * (goal_col.b - c.b)};

            uint8_t label = 0;
            if (state.has_object) {
                const double oa = disc_alpha(p, state.object_pos, kObjectRadius, px);
                c = {c.r + oa * (object_col.r - c.r), c.g + oa * (object_col.g - c.g),
                     c.b + oa * (object_col.b - c.b)};
                if (oa > 0.5) label = 2;
            }
            const double aa = disc_alpha(p, state.agent_pos, kAgentRadius, px);
            c = {c.r + aa * (agent_col.r - c.r), c.g + aa * (agent_col.g - c.g),
                 c.b + aa * (agent_col.b - c.b)};
            if (aa > 0.5) label = 1;

            if (dis && (hue != 0.0 || gain != 1.0)) c = hue_rotate(c, hue, gain);

            const size_t at = (static_cast<size_t>(y) * W + x) * 3;
            out.rgb[at] = to_u8(c.r);
            out.rgb[at + 1] = to_u8(c.g);
            out.rgb[at + 2] = to_u8(c.b);
            out.labels[static_cast<size_t>(y) * W + x] = label;
        }
    }
    return out;
}

EnvState init_episode(WorldKind kind, uint64_t episode_seed) {
    Rng rng(derive_seed(episode_seed, 1));
    EnvState s;
    s.episode_rng_seed = episode_seed;
    s.agent_pos = {rng.uniform(0.12, 0.88), rng.uniform(0.12, 0.88)};
    s.goal_pos = {0.78, 0.78};
    if (kind == WorldKind::push) {
        s.has_object = true;
        // object between agent start region and goal, away from both walls;
        // re-draw the agent too if its spot leaves no room for the object
        int tries = 0;
        s.object_pos = {rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6)};
        while ((s.object_pos - s.agent_pos).norm() < kAgentRadius + kObjectRadius + 0.05) {
            if (++tries % 20 == 0)
                s.agent_pos = {rng.uniform(0.12, 0.88), rng.uniform(0.12, 0.88)};
            s.object_pos = {rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6)};
        }
    }
    return s;
}

}  // namespace oclapo::worldgen
