#include "gudrl/agent.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "gudrl/adam.hpp"
#include "gudrl/autodiff.hpp"

namespace gudrl::agent {

namespace {

constexpr double kOptimisticCommand = 500.0;

policy::TokenMask token_mask(const replay::CommandMask& c, bool reward_inputs) {
    using policy::Token;
    policy::TokenMask m{};
    m[static_cast<std::size_t>(Token::horizon)] = c.horizon;
    m[static_cast<std::size_t>(Token::desired_return)] = c.desired_return;
    m[static_cast<std::size_t>(Token::goal)] = c.goal;
    m[static_cast<std::size_t>(Token::prev_action)] = true;
    m[static_cast<std::size_t>(Token::prev_reward)] = reward_inputs;
    m[static_cast<std::size_t>(Token::prev_terminal)] = true;
    return m;
}

std::string format_value(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0, 0};
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

EvalReport summarise(std::vector<ConditionResult> cells, std::size_t progress) {
    EvalReport r;
    r.progress = progress;
    std::vector<double> all;
    for (auto& c : cells) {
        std::tie(c.mean, c.std) = mean_std(c.returns);
        all.insert(all.end(), c.returns.begin(), c.returns.end());
    }
    std::tie(r.mean, r.std) = mean_std(all);
    r.conditions = std::move(cells);
    return r;
}

// One evaluation episode in flight.
struct Slot {
    std::size_t cell = 0;
    env::CartPole env;
    Rng rng;
    env::Observation obs{};
    replay::Command command;
    policy::HiddenState hidden;
    double ret = 0;
    bool done = false;
    replay::Episode* record = nullptr;
    std::optional<double> goal;
};

}  // namespace

std::string_view setting_name(Setting s) {
    switch (s) {
    case Setting::online: return "online";
    case Setting::il: return "il";
    case Setting::offline: return "offline";
    case Setting::gcrl: return "gcrl";
    case Setting::meta: return "meta";
    }
    return "?";
}

std::optional<Setting> parse_setting(std::string_view name) {
    for (auto s : {Setting::online, Setting::il, Setting::offline, Setting::gcrl, Setting::meta})
        if (setting_name(s) == name) return s;
    return std::nullopt;
}

env::Setting env_setting(Setting s) {
    switch (s) {
    case Setting::gcrl: return env::Setting::gcrl;
    case Setting::meta: return env::Setting::meta;
    default: return env::Setting::standard;
    }
}

SettingConfig SettingConfig::defaults(Setting s) {
    SettingConfig c;
    c.setting = s;
    switch (s) {
    case Setting::online:
    case Setting::meta:
        c.commands = {true, true, false};
        break;
    case Setting::gcrl:
        c.commands = {true, true, true};
        break;
    case Setting::il:
        c.commands = {true, false, false};
        c.interacts_with_env = false;
        c.train_steps = 2000;  // five demonstrations are fitted within a few hundred steps
        c.eval_every = 100;
        break;
    case Setting::offline:
        c.commands = {true, true, false};
        c.interacts_with_env = false;
        c.eval_every = 100;
        break;
    }
    c.tokens = token_mask(c.commands, s != Setting::il);
    return c;
}

std::vector<Condition> conditions(Setting s) {
    std::vector<Condition> out;
    if (s == Setting::gcrl) {
        for (double g : env::goal_grid()) out.push_back({"goal=" + format_value(g), env::EnvParams{}, g});
    } else if (s == Setting::meta) {
        for (const auto& p : env::meta_grid())
            out.push_back({"len=" + format_value(p.pole_half_length) + "/mass=" + format_value(p.pole_mass) +
                               "/force=" + format_value(p.force_magnitude),
                           p, std::nullopt});
    } else {
        out.push_back({"all", env::EnvParams{}, std::nullopt});
    }
    return out;
}

std::size_t episodes_per_condition(Setting s, std::size_t eval_episodes) {
    const std::size_t cells = conditions(s).size();
    const std::size_t n = (eval_episodes + cells - 1) / cells;
    return cells > 1 ? std::max<std::size_t>(n, 2) : std::max<std::size_t>(n, 1);
}

EpisodeStart reset_routine(env::CartPole& env, policy::HiddenState& hidden, const replay::ReplayMemory& memory,
                           const SettingConfig& config, Rng& rng) {
    auto r = env.reset(rng);
    hidden = policy::HiddenState::zeros(config.policy);
    EpisodeStart start;
    start.observation = r.observation;
    start.goal = r.goal;
    if (memory.empty()) {
        start.command.horizon = kOptimisticCommand;
        start.command.desired_return = kOptimisticCommand;
        start.command.enabled = config.commands;
    } else {
        start.command = replay::sample_exploratory_command(memory, config.top_k, rng, config.commands);
    }
    if (config.commands.goal) start.command.goal = r.goal;
    return start;
}

replay::Command evaluation_command(const SettingConfig& config, const replay::ReplayMemory* memory,
                                   std::optional<double> goal, Rng& rng) {
    replay::Command c;
    c.enabled = config.commands;
    c.horizon = kOptimisticCommand;
    c.desired_return = kOptimisticCommand;
    const bool exploratory = config.setting == Setting::offline || config.setting == Setting::gcrl;
    if (exploratory && memory && !memory->empty()) {
        auto e = replay::sample_exploratory_command(*memory, config.top_k, rng, config.commands);
        c.desired_return = e.desired_return;
        if (config.setting == Setting::offline) c.horizon = e.horizon;
    }
    if (config.commands.goal) c.goal = goal;
    return c;
}

namespace {

// Steps every unfinished slot once, batching the policy over all of them.
void advance(std::vector<Slot>& slots, policy::PolicyParams& params, const SettingConfig& config) {
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < slots.size(); ++i)
        if (!slots[i].done) live.push_back(i);
    const std::size_t n = live.size(), H = params.config.lstm_hidden;
    std::vector<env::Observation> obs(n);
    std::vector<policy::CommandTokenSet> tokens(n);
    std::vector<double> h(n * H), c(n * H);
    for (std::size_t k = 0; k < n; ++k) {
        const Slot& s = slots[live[k]];
        obs[k] = s.obs;
        tokens[k] = policy::make_tokens(s.command, s.hidden.prev, config.tokens);
        std::copy(s.hidden.lstm_h.begin(), s.hidden.lstm_h.end(), h.begin() + static_cast<long>(k * H));
        std::copy(s.hidden.lstm_c.begin(), s.hidden.lstm_c.end(), c.begin() + static_cast<long>(k * H));
    }
    ad::Tape tape;
    policy::RecurrentVars state{tape.constant({n, H}, std::move(h)), tape.constant({n, H}, std::move(c))};
    auto out = policy::policy_step(tape, params, obs, tokens, state);
    const auto& logits = out.logits.values();
    const auto& nh = out.next.h.values();
    const auto& nc = out.next.c.values();
    for (std::size_t k = 0; k < n; ++k) {
        Slot& s = slots[live[k]];
        auto dist = policy::ActionDistribution::from_logits(logits[2 * k], logits[2 * k + 1]);
        const auto a = policy::act(dist, s.rng, config.eval_mode);
        const auto r = s.env.step(a);
        if (s.record) s.record->transitions.push_back({s.obs, a, r.reward, s.goal, r.terminal});
        s.ret += r.reward;
        s.command = replay::update_command(s.command, r.reward);
        s.hidden.lstm_h.assign(nh.begin() + static_cast<long>(k * H), nh.begin() + static_cast<long>((k + 1) * H));
        s.hidden.lstm_c.assign(nc.begin() + static_cast<long>(k * H), nc.begin() + static_cast<long>((k + 1) * H));
        s.hidden.prev = {static_cast<double>(a), r.reward, 0.0};
        s.obs = r.observation;
        s.done = r.terminal;
    }
}

}  // namespace

EvalReport evaluate(policy::PolicyParams& params, const SettingConfig& config, const replay::ReplayMemory* memory,
                    Rng& rng, std::size_t progress) {
    const auto cells = conditions(config.setting);
    const std::size_t per = episodes_per_condition(config.setting, config.eval_episodes);
    std::vector<Slot> slots;
    slots.reserve(cells.size() * per);
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        for (std::size_t e = 0; e < per; ++e) {
            Slot s{ci, env::CartPole(env_setting(config.setting)), rng.fork(), {}, {},
                   policy::HiddenState::zeros(params.config), 0, false, nullptr, std::nullopt};
            auto r = s.env.reset_with(s.rng, cells[ci].params, cells[ci].goal);
            s.obs = r.observation;
            s.command = evaluation_command(config, memory, r.goal, s.rng);
            slots.push_back(std::move(s));
        }
    }
    while (std::any_of(slots.begin(), slots.end(), [](const Slot& s) { return !s.done; }))
        advance(slots, params, config);

    std::vector<ConditionResult> results(cells.size());
    for (std::size_t ci = 0; ci < cells.size(); ++ci) results[ci].label = cells[ci].label;
    for (const auto& s : slots) results[s.cell].returns.push_back(s.ret);
    return summarise(std::move(results), progress);
}

std::vector<replay::Episode> collect_episodes(policy::PolicyParams& params, const SettingConfig& config,
                                              std::size_t count, const std::function<replay::Command(Rng&)>& command_for,
                                              Rng& rng, std::size_t parallel) {
    std::vector<replay::Episode> episodes(count);
    parallel = std::max<std::size_t>(parallel, 1);
    for (std::size_t first = 0; first < count; first += parallel) {
        std::vector<Slot> slots;
        for (std::size_t i = first; i < std::min(count, first + parallel); ++i) {
            Slot s{0, env::CartPole(env_setting(config.setting)), rng.fork(), {}, {},
                   policy::HiddenState::zeros(params.config), 0, false, &episodes[i], std::nullopt};
            auto r = s.env.reset(s.rng);
            s.obs = r.observation;
            s.goal = r.goal;
            s.command = command_for(s.rng);
            s.command.goal = r.goal;
            slots.push_back(std::move(s));
        }
        while (std::any_of(slots.begin(), slots.end(), [](const Slot& s) { return !s.done; }))
            advance(slots, params, config);
        for (std::size_t k = 0; k < slots.size(); ++k) {
            episodes[first + k].total_return = slots[k].ret;
            episodes[first + k].order = first + k;
        }
    }
    return episodes;
}

EvalReport evaluate_baseline(Baseline stub, Setting setting, std::size_t per, Rng& rng) {
    const auto cells = conditions(setting);
    std::vector<ConditionResult> results(cells.size());
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        results[ci].label = cells[ci].label;
        for (std::size_t e = 0; e < per; ++e) {
            env::CartPole env(env_setting(setting));
            Rng erng = rng.fork();
            env.reset_with(erng, cells[ci].params, cells[ci].goal);
            double ret = 0;
            for (bool done = false; !done;) {
                const auto a = stub == Baseline::always_right || erng.uniform() >= 0.5 ? env::Action::right
                                                                                       : env::Action::left;
                const auto r = env.step(a);
                ret += r.reward;
                done = r.terminal;
            }
            results[ci].returns.push_back(ret);
        }
    }
    return summarise(std::move(results), 0);
}

double train_step(policy::PolicyParams& params, AdamState& adam, const replay::ReplayMemory& memory,
                  const SettingConfig& config, Rng& rng) {
    auto batch = replay::sample_training_batch(memory, config.batch_size, rng, config.commands, config.max_length);
    auto tensors = params.tensors();
    // Tokens absent from this setting never reach the tape; they still need a
    // (zero) gradient for the optimiser.
    for (auto* t : tensors) t->grad.assign(t->values.size(), 0.0);
    ad::Tape tape;
    auto loss = policy::loss_batch(tape, params, batch, config.tokens);
    tape.backward(loss);
    adam_step(tensors, adam);
    return loss.item();
}

TrainingResult run_training(const SettingConfig& config, replay::ReplayMemory& memory, policy::PolicyParams& params,
                            std::uint64_t seed, const TrainingHooks& hooks) {
    Rng root(seed);
    Rng act_rng = root.fork();
    Rng batch_rng = root.fork();
    Rng eval_root = root.fork();
    AdamState adam;
    adam.lr = config.learning_rate;
    adam.clip_norm = config.clip_norm;
    TrainingResult result;

    // Each evaluation draws from its own stream so evaluations never shift
    // the training trajectory.
    auto run_eval = [&](std::size_t progress) {
        Rng eval_rng(eval_root.next() ^ progress);
        auto report = evaluate(params, config, &memory, eval_rng, progress);
        if (hooks.on_eval) hooks.on_eval(report);
        result.reports.push_back(std::move(report));
    };
    const std::size_t eval_every = std::max<std::size_t>(config.eval_every, 1);
    const double budget = static_cast<double>(config.interacts_with_env ? config.env_steps : config.train_steps);
    auto set_lr = [&](std::size_t step) {
        const double done = budget > 0 ? static_cast<double>(step) / budget : 0.0;
        adam.lr = config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * std::min(done, 1.0));
    };

    if (!config.interacts_with_env) {
        if (memory.empty())
            throw std::invalid_argument(std::string(setting_name(config.setting)) +
                                        ": training needs a non-empty dataset");
        run_eval(0);
        for (std::size_t step = 1; step <= config.train_steps; ++step) {
            set_lr(step);
            result.last_loss = train_step(params, adam, memory, config, batch_rng);
            ++result.gradient_steps;
            if (step % eval_every == 0 || step == config.train_steps) run_eval(step);
        }
        return result;
    }

    env::CartPole env(env_setting(config.setting));
    policy::HiddenState hidden;
    auto start = reset_routine(env, hidden, memory, config, act_rng);
    auto obs = start.observation;
    auto goal = start.goal;
    auto command = start.command;
    if (!memory.episode_open()) memory.begin_episode();

    run_eval(0);
    for (std::size_t step = 1; step <= config.env_steps; ++step) {
        const auto tokens = policy::make_tokens(command, hidden.prev, config.tokens);
        auto [dist, next] = policy::policy_forward(obs, tokens, hidden, params);
        const auto a = policy::act(dist, act_rng, policy::ActMode::sample);
        const auto r = env.step(a);
        memory.append({obs, a, r.reward, goal, r.terminal});
        ++result.memory_appends;

        StepTrace trace{step, command, {}, r.reward, r.terminal, 0};
        command = replay::update_command(command, r.reward);
        hidden = std::move(next);
        hidden.prev = {static_cast<double>(a), r.reward, 0.0};
        obs = r.observation;
        trace.after = command;
        trace.memory_size = memory.size();
        if (hooks.on_step) hooks.on_step(trace);

        if (r.terminal) {
            ++result.episodes;
            memory.begin_episode();
            start = reset_routine(env, hidden, memory, config, act_rng);
            obs = start.observation;
            goal = start.goal;
            command = start.command;
        }
        if (result.episodes >= config.warmup_episodes && !memory.empty() &&
            step % std::max<std::size_t>(config.train_every, 1) == 0) {
            set_lr(step);
            for (std::size_t k = 0; k < config.steps_per_round; ++k) {
                result.last_loss = train_step(params, adam, memory, config, batch_rng);
                ++result.gradient_steps;
            }
        }
        if (step % eval_every == 0 || step == config.env_steps) run_eval(step);
    }
    result.training_transitions = env.transitions();
    return result;
}

}  // namespace gudrl::agent
