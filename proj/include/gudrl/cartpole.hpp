#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "gudrl/rng.hpp"

namespace gudrl::env {

enum class Setting { standard, gcrl, meta };

enum class Action : std::uint8_t { left = 0, right = 1 };

std::string_view setting_name(Setting s);

struct EnvParams {
    double gravity = 9.8;
    double cart_mass = 1.0;
    double pole_mass = 0.1;
    double pole_half_length = 0.5;
    double force_magnitude = 10.0;
    double timestep = 0.02;
    double x_threshold = 2.4;
    double theta_threshold = 12.0 * 2.0 * 3.141592653589793 / 360.0;
    int time_limit = 500;

    bool operator==(const EnvParams&) const = default;
};

// Intervals for the parameters randomised in the meta setting.
struct MetaRanges {
    std::array<double, 2> pole_half_length{0.25, 0.75};
    std::array<double, 2> pole_mass{0.05, 0.5};
    std::array<double, 2> force_magnitude{5.0, 15.0};
};

// Throws std::invalid_argument if a physical constant is non-positive.
void validate(const EnvParams& p);

using Observation = std::array<double, 4>;  // x, x_dot, theta, theta_dot

struct EnvState {
    double x = 0;
    double x_dot = 0;
    double theta = 0;
    double theta_dot = 0;
    int steps_elapsed = 0;
    std::optional<double> goal;

    Observation observation() const { return {x, x_dot, theta, theta_dot}; }
};

struct StepResult {
    Observation observation{};
    double reward = 0;
    std::optional<double> goal;
    bool terminal = false;
};

struct ResetResult {
    EnvState state;
    Observation observation{};
    std::optional<double> goal;
    EnvParams params;
};

bool is_terminal(const EnvState& s, const EnvParams& p);

double gcrl_reward(double x, double goal);

EnvParams sample_meta_params(Rng& rng, const MetaRanges& ranges = {});

ResetResult reset(Setting setting, Rng& rng, const MetaRanges& ranges = {});

// One explicit Euler step under an arbitrary horizontal force; does not
// touch steps_elapsed.
EnvState integrate(const EnvState& s, const EnvParams& p, double force);

// Advances one control step. Rejects terminal states.
std::pair<EnvState, StepResult> step(const EnvState& s, const EnvParams& p, Action a);

// Evaluation grids: goals {-1, -0.5, 0, 0.5, 1} and the 3x3x3 product of
// (min, mid, max) for each randomised meta parameter.
std::vector<double> goal_grid();
std::vector<EnvParams> meta_grid(const MetaRanges& ranges = {});

// Stateful wrapper that also counts transitions, so callers can prove that a
// training phase never touched the environment.
class CartPole {
public:
    CartPole(Setting setting, MetaRanges ranges = {}) : setting_(setting), ranges_(ranges) {}

    ResetResult reset(Rng& rng);
    // Reset with pinned conditions, used for evaluation grids.
    ResetResult reset_with(Rng& rng, const EnvParams& params, std::optional<double> goal);
    StepResult step(Action a);

    Setting setting() const { return setting_; }
    const EnvState& state() const { return state_; }
    const EnvParams& params() const { return params_; }
    std::uint64_t transitions() const { return transitions_; }

private:
    Setting setting_;
    MetaRanges ranges_;
    EnvState state_;
    EnvParams params_;
    bool live_ = false;
    std::uint64_t transitions_ = 0;
};

}  // namespace gudrl::env
