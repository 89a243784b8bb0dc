#include "gudrl/cartpole.hpp"

#include <cmath>
#include <stdexcept>

namespace gudrl::env {

std::string_view setting_name(Setting s) {
    switch (s) {
    case Setting::standard: return "standard";
    case Setting::gcrl: return "gcrl";
    case Setting::meta: return "meta";
    }
    return "unknown";
}

void validate(const EnvParams& p) {
    if (!(p.cart_mass > 0 && p.pole_mass > 0 && p.pole_half_length > 0 && p.force_magnitude > 0 &&
          p.timestep > 0 && p.gravity > 0 && p.x_threshold > 0 && p.theta_threshold > 0 && p.time_limit > 0))
        throw std::invalid_argument("cartpole: physical constants must be strictly positive");
}

bool is_terminal(const EnvState& s, const EnvParams& p) {
    return std::abs(s.x) > p.x_threshold || std::abs(s.theta) > p.theta_threshold ||
           s.steps_elapsed >= p.time_limit;
}

double gcrl_reward(double x, double goal) { return std::exp(-std::abs(x - goal)); }

EnvParams sample_meta_params(Rng& rng, const MetaRanges& r) {
    EnvParams p;
    p.pole_half_length = rng.uniform(r.pole_half_length[0], r.pole_half_length[1]);
    p.pole_mass = rng.uniform(r.pole_mass[0], r.pole_mass[1]);
    p.force_magnitude = rng.uniform(r.force_magnitude[0], r.force_magnitude[1]);
    return p;
}

ResetResult reset(Setting setting, Rng& rng, const MetaRanges& ranges) {
    ResetResult out;
    if (setting == Setting::meta) out.params = sample_meta_params(rng, ranges);
    out.state.x = rng.uniform(-0.05, 0.05);
    out.state.x_dot = rng.uniform(-0.05, 0.05);
    out.state.theta = rng.uniform(-0.05, 0.05);
    out.state.theta_dot = rng.uniform(-0.05, 0.05);
    if (setting == Setting::gcrl) out.state.goal = rng.uniform(-1.0, 1.0);
    out.goal = out.state.goal;
    out.observation = out.state.observation();
    return out;
}

EnvState integrate(const EnvState& s, const EnvParams& p, double force) {
    const double total_mass = p.cart_mass + p.pole_mass;
    const double polemass_length = p.pole_mass * p.pole_half_length;
    const double cos_t = std::cos(s.theta);
    const double sin_t = std::sin(s.theta);
    const double temp = (force + polemass_length * s.theta_dot * s.theta_dot * sin_t) / total_mass;
    const double theta_acc = (p.gravity * sin_t - cos_t * temp) /
                             (p.pole_half_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total_mass));
    const double x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

    EnvState n = s;
    n.x = s.x + p.timestep * s.x_dot;
    n.x_dot = s.x_dot + p.timestep * x_acc;
    n.theta = s.theta + p.timestep * s.theta_dot;
    n.theta_dot = s.theta_dot + p.timestep * theta_acc;
    return n;
}

std::pair<EnvState, StepResult> step(const EnvState& s, const EnvParams& p, Action a) {
    if (is_terminal(s, p)) throw std::logic_error("cartpole: step called on a terminal state");
    const double force = a == Action::right ? p.force_magnitude : -p.force_magnitude;
    EnvState n = integrate(s, p, force);
    n.steps_elapsed = s.steps_elapsed + 1;

    StepResult r;
    r.observation = n.observation();
    r.goal = n.goal;
    r.reward = n.goal ? gcrl_reward(n.x, *n.goal) : 1.0;
    r.terminal = is_terminal(n, p);
    return {n, r};
}

std::vector<double> goal_grid() { return {-1.0, -0.5, 0.0, 0.5, 1.0}; }

std::vector<EnvParams> meta_grid(const MetaRanges& r) {
    auto spread = [](const std::array<double, 2>& iv) {
        return std::array<double, 3>{iv[0], 0.5 * (iv[0] + iv[1]), iv[1]};
    };
    std::vector<EnvParams> grid;
    for (double len : spread(r.pole_half_length))
        for (double mass : spread(r.pole_mass))
            for (double force : spread(r.force_magnitude)) {
                EnvParams p;
                p.pole_half_length = len;
                p.pole_mass = mass;
                p.force_magnitude = force;
                grid.push_back(p);
            }
    return grid;
}

ResetResult CartPole::reset(Rng& rng) {
    auto r = env::reset(setting_, rng, ranges_);
    state_ = r.state;
    params_ = r.params;
    live_ = true;
    return r;
}

ResetResult CartPole::reset_with(Rng& rng, const EnvParams& params, std::optional<double> goal) {
    validate(params);
    auto r = env::reset(Setting::standard, rng, ranges_);
    r.params = params;
    r.state.goal = goal;
    r.goal = goal;
    state_ = r.state;
    params_ = params;
    live_ = true;
    return r;
}

StepResult CartPole::step(Action a) {
    if (!live_) throw std::logic_error("cartpole: step before reset");
    auto [next, result] = env::step(state_, params_, a);
    state_ = next;
    ++transitions_;
    if (result.terminal) live_ = false;
    return result;
}

}  // namespace gudrl::env
