#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gudrl/adam.hpp"
#include "gudrl/cartpole.hpp"
#include "gudrl/policy.hpp"
#include "gudrl/replay.hpp"
#include "gudrl/rng.hpp"

namespace gudrl::agent {

enum class Setting { online, il, offline, gcrl, meta };

std::string_view setting_name(Setting s);
std::optional<Setting> parse_setting(std::string_view name);
env::Setting env_setting(Setting s);

struct SettingConfig {
    Setting setting = Setting::online;
    replay::CommandMask commands;  // command components the policy reads
    policy::TokenMask tokens{};    // full token set, commands plus previous-step tokens
    bool interacts_with_env = true;

    // Budgets. Environment settings count training-time env steps; il and
    // offline count gradient steps. eval_every uses the same unit.
    std::size_t env_steps = 200000;
    std::size_t train_steps = 20000;
    std::size_t eval_every = 5000;
    std::size_t eval_episodes = 10;

    std::size_t warmup_episodes = 50;
    std::size_t capacity = 700;
    std::size_t top_k = 5;

    std::size_t batch_size = 16;
    std::size_t max_length = 16;  // suffix window per sample, 0 for the full suffix
    std::size_t train_every = 4;  // env steps between training rounds
    std::size_t steps_per_round = 1;
    double learning_rate = 3e-4;
    double final_lr_fraction = 0.1;  // linear decay over the budget; 1 keeps the rate constant
    double clip_norm = 10.0;

    policy::ActMode eval_mode = policy::ActMode::greedy;  // training-time acting always samples
    policy::PolicyConfig policy;

    static SettingConfig defaults(Setting s);
};

// One evaluation cell: a goal for gcrl, a parameter tuple for meta.
struct Condition {
    std::string label;
    env::EnvParams params;
    std::optional<double> goal;
};

std::vector<Condition> conditions(Setting s);
// Episodes per condition, rounded up so that every condition gets at least 2
// when there is more than one condition.
std::size_t episodes_per_condition(Setting s, std::size_t eval_episodes);

struct ConditionResult {
    std::string label;
    std::vector<double> returns;
    double mean = 0;
    double std = 0;  // population std across this condition's episodes
};

struct EvalReport {
    std::size_t progress = 0;  // env steps or gradient steps
    std::vector<ConditionResult> conditions;
    double mean = 0;
    double std = 0;
};

struct EpisodeStart {
    env::Observation observation{};
    std::optional<double> goal;
    replay::Command command;
};

// Resets the environment and the hidden state, then picks the acting command
// from the memory (optimistic d^H = d^R = 500 when it is empty).
EpisodeStart reset_routine(env::CartPole& env, policy::HiddenState& hidden, const replay::ReplayMemory& memory,
                           const SettingConfig& config, Rng& rng);

// Command used for evaluation episodes.
replay::Command evaluation_command(const SettingConfig& config, const replay::ReplayMemory* memory,
                                   std::optional<double> goal, Rng& rng);

// Runs the evaluation protocol without touching `params` or `memory`.
EvalReport evaluate(policy::PolicyParams& params, const SettingConfig& config, const replay::ReplayMemory* memory,
                    Rng& rng, std::size_t progress = 0);

// Rolls out `count` episodes with the policy, `parallel` at a time, each
// starting from the command returned by `command_for`.
std::vector<replay::Episode> collect_episodes(policy::PolicyParams& params, const SettingConfig& config,
                                              std::size_t count, const std::function<replay::Command(Rng&)>& command_for,
                                              Rng& rng, std::size_t parallel = 100);

enum class Baseline { uniform_random, always_right };

// Same protocol as evaluate() with a fixed stub in place of the policy.
EvalReport evaluate_baseline(Baseline stub, Setting setting, std::size_t episodes_per_condition, Rng& rng);

// One gradient step on a fresh batch; returns the pre-update loss.
double train_step(policy::PolicyParams& params, AdamState& adam, const replay::ReplayMemory& memory,
                  const SettingConfig& config, Rng& rng);

struct StepTrace {
    std::size_t env_step = 0;
    replay::Command before;
    replay::Command after;
    double reward = 0;
    bool terminal = false;
    std::size_t memory_size = 0;
};

struct TrainingHooks {
    std::function<void(const StepTrace&)> on_step;
    std::function<void(const EvalReport&)> on_eval;
};

struct TrainingResult {
    std::vector<EvalReport> reports;
    std::uint64_t training_transitions = 0;  // env steps taken outside evaluation
    std::uint64_t memory_appends = 0;
    std::size_t gradient_steps = 0;
    std::size_t episodes = 0;
    double last_loss = 0;
};

// Interaction/training loop. il and offline train on `memory` as given and
// never step the environment outside evaluation.
TrainingResult run_training(const SettingConfig& config, replay::ReplayMemory& memory, policy::PolicyParams& params,
                            std::uint64_t seed, const TrainingHooks& hooks = {});

}  // namespace gudrl::agent
