#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gudrl/cartpole.hpp"
#include "gudrl/rng.hpp"

namespace gudrl::replay {

struct Transition {
    env::Observation observation{};
    env::Action action = env::Action::left;
    double reward = 0;
    std::optional<double> goal;
    bool terminal = false;

    bool operator==(const Transition&) const = default;
};

struct Episode {
    std::vector<Transition> transitions;
    double total_return = 0;
    std::uint64_t order = 0;  // collection index, used for deterministic tie-breaks

    std::size_t length() const { return transitions.size(); }
};

// Which command components the policy may read.
struct CommandMask {
    bool horizon = true;
    bool desired_return = true;
    bool goal = false;

    bool operator==(const CommandMask&) const = default;
};

struct Command {
    double horizon = 1;         // d^H, steps
    double desired_return = 0;  // d^R
    std::optional<double> goal;
    CommandMask enabled;

    bool operator==(const Command&) const = default;
};

// Previous-step tokens carried alongside the recurrent state. The
// start-of-episode marker is (0, 0, 1).
struct PrevStep {
    double action = 0;
    double reward = 0;
    double terminal = 1;

    bool operator==(const PrevStep&) const = default;
};

inline constexpr std::size_t unbounded = std::numeric_limits<std::size_t>::max();

// Episodic memory. Completed episodes are kept up to `capacity`; when full,
// the lowest-return episode (oldest first among ties) is evicted.
class ReplayMemory {
public:
    explicit ReplayMemory(std::size_t capacity = unbounded);

    // Requires an open episode: a fresh memory is open, and after a terminal
    // transition begin_episode() must be called first.
    void append(const Transition& t);
    void begin_episode();
    // Inserts a finished episode (e.g. from a dataset file).
    void add_episode(Episode e);

    bool episode_open() const { return open_; }
    std::size_t size() const { return episodes_.size(); }
    bool empty() const { return episodes_.empty(); }
    std::size_t capacity() const { return capacity_; }
    const std::vector<Episode>& episodes() const { return episodes_; }
    const std::vector<Transition>& pending() const { return pending_; }
    std::uint64_t appended() const { return appended_; }

private:
    std::size_t capacity_;
    std::vector<Episode> episodes_;
    std::vector<Transition> pending_;
    bool open_ = true;
    std::uint64_t next_order_ = 0;
    std::uint64_t appended_ = 0;

    void finalise();
    void evict();
};

// One hindsight-relabelled suffix of a stored episode.
struct SequenceSample {
    std::vector<env::Observation> observations;
    std::vector<env::Action> actions;
    std::vector<double> rewards;
    std::vector<Command> commands;
    std::vector<PrevStep> prev;
    std::size_t episode_index = 0;
    std::size_t start = 0;

    std::size_t length() const { return actions.size(); }
};

using TrainingBatch = std::vector<SequenceSample>;

// Relabels the suffix start..T of episode `ep` with hindsight commands
// d^H = T - i and d^R = sum of rewards from i to the end. `max_length` (0 for
// none) truncates the returned window without changing the commands.
SequenceSample hindsight_suffix(const Episode& ep, std::size_t start, const CommandMask& mask,
                                std::size_t max_length = 0);

TrainingBatch sample_training_batch(const ReplayMemory& memory, std::size_t batch_size, Rng& rng,
                                    const CommandMask& mask, std::size_t max_length = 0);

// Indices of the k highest-return episodes, earlier collection first on ties.
std::vector<std::size_t> top_episodes(const ReplayMemory& memory, std::size_t k);

Command sample_exploratory_command(const ReplayMemory& memory, std::size_t k, Rng& rng,
                                   const CommandMask& mask = {});

Command update_command(const Command& c, double observed_reward);

ReplayMemory build_il_dataset(const ReplayMemory& source, std::size_t count = 5, double target_return = 500);
ReplayMemory build_offline_dataset(const ReplayMemory& source, std::size_t n);

struct ReturnStats {
    double mean = 0;
    double std = 0;  // sample standard deviation; 0 for fewer than two episodes
    std::size_t count = 0;
};
ReturnStats return_stats(const ReplayMemory& memory);

class DatasetError : public std::runtime_error {
public:
    enum class Kind { io, bad_header, version_mismatch, truncated, malformed_record };
    DatasetError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct Dataset {
    std::string setting;
    ReplayMemory memory;
};

void save_dataset(const ReplayMemory& memory, const std::string& setting, const std::filesystem::path& path);
void write_dataset(const ReplayMemory& memory, const std::string& setting, std::ostream& out);
Dataset load_dataset(const std::filesystem::path& path);
Dataset read_dataset(std::istream& in);

}  // namespace gudrl::replay
