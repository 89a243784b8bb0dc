#include "gudrl/replay.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gudrl::replay {

ReplayMemory::ReplayMemory(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay: capacity must be positive");
}

void ReplayMemory::begin_episode() {
    if (!pending_.empty()) throw std::logic_error("replay: begin_episode with an unfinished episode");
    open_ = true;
}

void ReplayMemory::append(const Transition& t) {
    if (!open_) throw std::logic_error("replay: append after a terminal transition without begin_episode");
    pending_.push_back(t);
    ++appended_;
    if (t.terminal) finalise();
}

void ReplayMemory::finalise() {
    Episode e;
    e.transitions = std::move(pending_);
    pending_.clear();
    open_ = false;
    add_episode(std::move(e));
}

void ReplayMemory::add_episode(Episode e) {
    if (e.transitions.empty()) throw std::invalid_argument("replay: empty episode");
    for (std::size_t i = 0; i + 1 < e.transitions.size(); ++i)
        if (e.transitions[i].terminal)
            throw std::invalid_argument("replay: terminal flag before the end of an episode");
    if (!e.transitions.back().terminal) throw std::invalid_argument("replay: episode does not end in a terminal");
    double total = 0;
    for (const auto& t : e.transitions) total += t.reward;
    e.total_return = total;
    e.order = next_order_++;
    episodes_.push_back(std::move(e));
    evict();
}

void ReplayMemory::evict() {
    while (episodes_.size() > capacity_) {
        auto worst = std::min_element(episodes_.begin(), episodes_.end(), [](const Episode& a, const Episode& b) {
            return a.total_return < b.total_return;
        });
        episodes_.erase(worst);
    }
}

SequenceSample hindsight_suffix(const Episode& ep, std::size_t start, const CommandMask& mask,
                                std::size_t max_length) {
    const std::size_t T = ep.length();
    if (start >= T) throw std::out_of_range("hindsight_suffix: start index past the end of the episode");
    std::size_t end = T;
    if (max_length > 0) end = std::min(T, start + max_length);

    // Return-to-go from each index to the terminal step.
    std::vector<double> to_go(T - start + 1, 0.0);
    for (std::size_t i = T; i-- > start;) to_go[i - start] = ep.transitions[i].reward + to_go[i - start + 1];

    SequenceSample s;
    s.start = start;
    const std::size_t n = end - start;
    s.observations.reserve(n);
    s.actions.reserve(n);
    s.rewards.reserve(n);
    s.commands.reserve(n);
    s.prev.reserve(n);
    for (std::size_t i = start; i < end; ++i) {
        const auto& tr = ep.transitions[i];
        s.observations.push_back(tr.observation);
        s.actions.push_back(tr.action);
        s.rewards.push_back(tr.reward);
        Command c;
        c.horizon = static_cast<double>(T - i);
        c.desired_return = to_go[i - start];
        c.goal = tr.goal;
        c.enabled = mask;
        s.commands.push_back(c);
        if (i == start) {
            s.prev.push_back(PrevStep{});
        } else {
            const auto& p = ep.transitions[i - 1];
            s.prev.push_back(PrevStep{static_cast<double>(p.action), p.reward, 0.0});
        }
    }
    return s;
}

TrainingBatch sample_training_batch(const ReplayMemory& memory, std::size_t batch_size, Rng& rng,
                                    const CommandMask& mask, std::size_t max_length) {
    if (memory.empty()) throw std::invalid_argument("sample_training_batch: replay memory is empty");
    if (batch_size == 0) throw std::invalid_argument("sample_training_batch: batch size must be positive");
    TrainingBatch batch;
    batch.reserve(batch_size);
    const auto& eps = memory.episodes();
    for (std::size_t b = 0; b < batch_size; ++b) {
        const std::size_t e = rng.below(eps.size());
        const std::size_t t = rng.below(eps[e].length());
        batch.push_back(hindsight_suffix(eps[e], t, mask, max_length));
        batch.back().episode_index = e;
    }
    return batch;
}

std::vector<std::size_t> top_episodes(const ReplayMemory& memory, std::size_t k) {
    const auto& eps = memory.episodes();
    std::vector<std::size_t> idx(eps.size());
    std::iota(idx.begin(), idx.end(), 0);
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), [&](std::size_t a, std::size_t b) {
        if (eps[a].total_return != eps[b].total_return) return eps[a].total_return > eps[b].total_return;
        return eps[a].order < eps[b].order;
    });
    idx.resize(k);
    return idx;
}

Command sample_exploratory_command(const ReplayMemory& memory, std::size_t k, Rng& rng, const CommandMask& mask) {
    if (memory.empty()) throw std::invalid_argument("sample_exploratory_command: replay memory is empty");
    if (k == 0) throw std::invalid_argument("sample_exploratory_command: K must be positive");
    const auto top = top_episodes(memory, k);
    const auto& eps = memory.episodes();
    const double n = static_cast<double>(top.size());
    double mean_len = 0, mean_ret = 0;
    for (auto i : top) {
        mean_len += static_cast<double>(eps[i].length());
        mean_ret += eps[i].total_return;
    }
    mean_len /= n;
    mean_ret /= n;
    double var = 0;
    if (top.size() > 1) {
        for (auto i : top) var += (eps[i].total_return - mean_ret) * (eps[i].total_return - mean_ret);
        var /= n - 1;
    }
    Command c;
    c.horizon = std::max(1.0, std::round(mean_len));
    c.desired_return = rng.uniform(mean_ret, mean_ret + std::sqrt(var));
    c.enabled = mask;
    return c;
}

Command update_command(const Command& c, double observed_reward) {
    Command n = c;
    n.horizon = std::max(c.horizon - 1.0, 1.0);
    n.desired_return = c.desired_return - observed_reward;
    return n;
}

ReplayMemory build_il_dataset(const ReplayMemory& source, std::size_t count, double target_return) {
    std::vector<const Episode*> found;
    for (const auto& e : source.episodes())
        if (e.total_return >= target_return) found.push_back(&e);
    if (found.size() < count)
        throw std::runtime_error("build_il_dataset: found " + std::to_string(found.size()) +
                                 " episodes with return " + std::to_string(static_cast<long>(target_return)) +
                                 ", need " + std::to_string(count) + " (" + std::to_string(found.size()) + " < " +
                                 std::to_string(count) + ")");
    ReplayMemory out;
    for (std::size_t i = 0; i < count; ++i) out.add_episode(*found[i]);
    return out;
}

ReplayMemory build_offline_dataset(const ReplayMemory& source, std::size_t n) {
    const auto& eps = source.episodes();
    if (eps.size() < n)
        throw std::runtime_error("build_offline_dataset: source holds " + std::to_string(eps.size()) +
                                 " episodes, need " + std::to_string(n));
    std::vector<std::size_t> idx(eps.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (eps[a].total_return != eps[b].total_return) return eps[a].total_return < eps[b].total_return;
        return eps[a].order < eps[b].order;
    });
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    ReplayMemory out;
    for (auto i : idx) out.add_episode(eps[i]);
    return out;
}

ReturnStats return_stats(const ReplayMemory& memory) {
    ReturnStats s;
    s.count = memory.size();
    if (s.count == 0) return s;
    for (const auto& e : memory.episodes()) s.mean += e.total_return;
    s.mean /= static_cast<double>(s.count);
    if (s.count > 1) {
        double var = 0;
        for (const auto& e : memory.episodes()) var += (e.total_return - s.mean) * (e.total_return - s.mean);
        s.std = std::sqrt(var / static_cast<double>(s.count - 1));
    }
    return s;
}

namespace {

constexpr const char* kMagic = "GUDRL-DATASET";
constexpr const char* kVersion = "v1";

std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_real(const std::string& tok, std::size_t line) {
    try {
        std::size_t used = 0;
        double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw DatasetError(DatasetError::Kind::malformed_record,
                           "dataset line " + std::to_string(line) + ": bad real '" + tok + "'");
    }
}

long parse_int(const std::string& tok, std::size_t line) {
    try {
        std::size_t used = 0;
        long v = std::stol(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw DatasetError(DatasetError::Kind::malformed_record,
                           "dataset line " + std::to_string(line) + ": bad integer '" + tok + "'");
    }
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace

void write_dataset(const ReplayMemory& memory, const std::string& setting, std::ostream& out) {
    out << kMagic << ' ' << kVersion << ' ' << setting << ' ' << memory.size() << '\n';
    for (const auto& e : memory.episodes()) {
        out << "E " << e.length() << ' ' << real(e.total_return) << '\n';
        for (const auto& t : e.transitions) {
            for (double v : t.observation) out << real(v) << ' ';
            out << static_cast<int>(t.action) << ' ' << real(t.reward) << ' ' << (t.goal ? real(*t.goal) : "NA")
                << ' ' << (t.terminal ? 1 : 0) << '\n';
        }
    }
}

void save_dataset(const ReplayMemory& memory, const std::string& setting, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DatasetError(DatasetError::Kind::io, "cannot open '" + path.string() + "' for writing");
    write_dataset(memory, setting, f);
    if (!f) throw DatasetError(DatasetError::Kind::io, "write to '" + path.string() + "' failed");
}

Dataset read_dataset(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw DatasetError(DatasetError::Kind::bad_header, "dataset: missing header line");
    auto head = split(line);
    if (head.size() != 4 || head[0] != kMagic)
        throw DatasetError(DatasetError::Kind::bad_header, "dataset: malformed header '" + line + "'");
    if (head[1] != kVersion)
        throw DatasetError(DatasetError::Kind::version_mismatch,
                           "dataset: unsupported version '" + head[1] + "', expected " + kVersion);
    const long count = parse_int(head[3], lineno);
    if (count < 0) throw DatasetError(DatasetError::Kind::bad_header, "dataset: negative episode count");

    Dataset ds{head[2], ReplayMemory()};
    for (long e = 0; e < count; ++e) {
        ++lineno;
        if (!std::getline(in, line))
            throw DatasetError(DatasetError::Kind::truncated, "dataset: truncated after " + std::to_string(e) +
                                                                  " of " + std::to_string(count) + " episodes");
        auto eh = split(line);
        if (eh.size() != 3 || eh[0] != "E")
            throw DatasetError(DatasetError::Kind::malformed_record,
                               "dataset line " + std::to_string(lineno) + ": expected episode header");
        const long len = parse_int(eh[1], lineno);
        if (len <= 0)
            throw DatasetError(DatasetError::Kind::malformed_record,
                               "dataset line " + std::to_string(lineno) + ": episode length must be positive");
        const double recorded = parse_real(eh[2], lineno);
        Episode ep;
        ep.transitions.reserve(static_cast<std::size_t>(len));
        for (long i = 0; i < len; ++i) {
            ++lineno;
            if (!std::getline(in, line))
                throw DatasetError(DatasetError::Kind::truncated,
                                   "dataset: truncated inside episode " + std::to_string(e) + " at line " +
                                       std::to_string(lineno));
            auto f = split(line);
            if (f.size() != 8)
                throw DatasetError(DatasetError::Kind::malformed_record,
                                   "dataset line " + std::to_string(lineno) + ": expected 8 fields, got " +
                                       std::to_string(f.size()));
            Transition t;
            for (int k = 0; k < 4; ++k) t.observation[static_cast<std::size_t>(k)] = parse_real(f[static_cast<std::size_t>(k)], lineno);
            const long a = parse_int(f[4], lineno);
            const long term = parse_int(f[7], lineno);
            if ((a != 0 && a != 1) || (term != 0 && term != 1))
                throw DatasetError(DatasetError::Kind::malformed_record,
                                   "dataset line " + std::to_string(lineno) + ": action and terminal must be 0 or 1");
            t.action = static_cast<env::Action>(a);
            t.reward = parse_real(f[5], lineno);
            if (f[6] != "NA") t.goal = parse_real(f[6], lineno);
            t.terminal = term == 1;
            ep.transitions.push_back(t);
        }
        try {
            ds.memory.add_episode(std::move(ep));
        } catch (const std::invalid_argument& err) {
            throw DatasetError(DatasetError::Kind::malformed_record,
                               "dataset episode " + std::to_string(e) + ": " + err.what());
        }
        const double stored = ds.memory.episodes().back().total_return;
        if (std::abs(stored - recorded) > 1e-9 * std::max(1.0, std::abs(recorded)))
            throw DatasetError(DatasetError::Kind::malformed_record,
                               "dataset episode " + std::to_string(e) + ": recorded return " + real(recorded) +
                                   " does not match reward sum " + real(stored));
    }
    return ds;
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DatasetError(DatasetError::Kind::io, "cannot open dataset '" + path.string() + "'");
    return read_dataset(f);
}

}  // namespace gudrl::replay
