#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace oclapo::worldgen {

enum class WorldKind { reach, push };

struct DistractorConfig {
    bool background_enabled = true;
    double background_speed = 0.08;
    double background_action_coupling = 0.5;  // fraction of phase motion driven by |action|
    double color_jitter_scale = 0.0;
    double camera_jitter_scale = 0.0;
};

struct EnvState {
    Eigen::Vector2d agent_pos{0.5, 0.5};
    Eigen::Vector2d agent_vel{0.0, 0.0};
    bool has_object = false;
    Eigen::Vector2d object_pos{0.0, 0.0};
    Eigen::Vector2d goal_pos{0.75, 0.75};
    int time = 0;
    double distractor_phase = 0.0;
    uint64_t episode_rng_seed = 0;
};

struct Action {
    Eigen::Vector2d value{0.0, 0.0};
};

// geometry, in arena units ([0,1] square); entities are deliberately chunky
// so they stay salient at small render resolutions
inline constexpr double kActionGain = 0.05;  // pos += gain * action per step
inline constexpr double kAgentRadius = 0.090;
inline constexpr double kObjectRadius = 0.100;
inline constexpr double kGoalHalf = 0.080;      // goal marker half-size
inline constexpr double kSuccessRadius = 0.08;  // push: object-to-goal distance

/// One Euler step. Clamps positions to the arena, resolves agent/object
/// overlap by pushing the object out along the contact normal, and advances
/// the distractor phase by background_speed + coupling * |action|.
/// Returns (next state, reward). Reward: reach = -dist(agent, goal) after the
/// step; push = 1 exactly on the step the object first enters the success
/// radius, else 0.
std::pair<EnvState, double> step(const EnvState& state, const Action& action,
                                 const DistractorConfig& cfg);

/// Proportional controller toward the goal (reach) or an approach point
/// behind the object, then through it (push). Adds smooth bounded noise from
/// the episode seed scaled by noise_scale; components clamped to [-1,1].
Action expert_action(const EnvState& state, double noise_scale = 0.15);

enum class FrameVariant { clean, distracted };

/// Renders H x W RGB (row-major, u8) plus a per-pixel entity label map
/// (0 background, 1 agent, 2 object). The label map follows the same camera
/// offset as the requested variant so masks align with the pixels.
struct RenderOut {
    std::vector<uint8_t> rgb;     // H*W*3
    std::vector<uint8_t> labels;  // H*W
};

RenderOut render(const EnvState& state, FrameVariant variant, const DistractorConfig& cfg,
                 int H, int W);

/// Fresh episode start. reach: random agent, fixed goal, no object.
/// push: random agent and object, fixed goal.
EnvState init_episode(WorldKind kind, uint64_t episode_seed);

}  // namespace oclapo::worldgen
