#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "gudrl/replay.hpp"

using namespace gudrl;
using namespace gudrl::replay;

namespace {

Episode random_episode(Rng& rng, std::size_t length, bool unit_rewards, bool with_goal = false) {
    Episode e;
    const double goal = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < length; ++i) {
        Transition t;
        for (auto& v : t.observation) v = rng.uniform(-0.5, 0.5);
        t.action = rng.uniform() < 0.5 ? env::Action::left : env::Action::right;
        t.reward = unit_rewards ? 1.0 : rng.uniform(0.01, 1.0);
        if (with_goal) t.goal = goal;
        t.terminal = i + 1 == length;
        e.transitions.push_back(t);
    }
    return e;
}

Episode unit_episode(std::size_t length) {
    Rng rng(length);
    return random_episode(rng, length, true);
}

ReplayMemory memory_of(const std::vector<std::size_t>& lengths) {
    ReplayMemory m;
    for (auto len : lengths) m.add_episode(unit_episode(len));
    return m;
}

}  // namespace

TEST_SUITE("oracle") {

TEST_CASE("hindsight relabelling equals brute-force suffix sums") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t T = 1 + rng.below(120);
        const Episode ep = random_episode(rng, T, trial % 2 == 0, trial % 3 == 0);
        for (std::size_t start = 0; start < T; ++start) {
            auto s = hindsight_suffix(ep, start, CommandMask{});
            REQUIRE(s.length() == T - start);
            for (std::size_t i = start; i < T; ++i) {
                double brute = 0;
                for (std::size_t j = T; j-- > i;) brute += ep.transitions[j].reward;
                const auto& c = s.commands[i - start];
                CHECK(c.desired_return == brute);
                CHECK(c.horizon == static_cast<double>(T - i));
            }
        }
    }
}

TEST_CASE("exploratory command statistics by hand") {
    // Returns 10, 20, 30 with lengths equal to returns: mean 20, sample std 10.
    auto m = memory_of({10, 20, 30});
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        auto c = sample_exploratory_command(m, 20, rng);
        CHECK(c.horizon == 20.0);
        CHECK(c.desired_return >= 20.0);
        CHECK(c.desired_return <= 30.0);
    }
    // K = 2 keeps only the 20 and 30 episodes: mean 25, std sqrt(50).
    auto c = sample_exploratory_command(m, 2, rng);
    CHECK(c.horizon == 25.0);
    CHECK(c.desired_return <= 25.0 + std::sqrt(50.0));
}

}  // TEST_SUITE("oracle")

TEST_SUITE("unit") {

TEST_CASE("prev-step tokens start with the episode marker") {
    Rng rng(2);
    auto ep = random_episode(rng, 6, true);
    auto s = hindsight_suffix(ep, 2, CommandMask{});
    CHECK(s.prev[0] == PrevStep{0, 0, 1});
    for (std::size_t k = 1; k < s.length(); ++k) {
        const auto& p = ep.transitions[2 + k - 1];
        CHECK(s.prev[k] == PrevStep{static_cast<double>(p.action), p.reward, 0});
    }
}

TEST_CASE("worked hindsight example") {
    auto ep = unit_episode(5);
    auto s = hindsight_suffix(ep, 1, CommandMask{});
    CHECK(s.commands[0].horizon == 4);
    CHECK(s.commands[0].desired_return == 4);
    CHECK(s.commands[3].horizon == 1);
    CHECK(s.commands[3].desired_return == 1);
    auto w = hindsight_suffix(ep, 1, CommandMask{}, 2);
    CHECK(w.length() == 2);
    CHECK(w.commands[0].desired_return == 4);
    CHECK_THROWS_AS(hindsight_suffix(ep, 5, CommandMask{}), std::out_of_range);
}

TEST_CASE("update_command decrements with a floor on the horizon") {
    Command c;
    c.horizon = 2;
    c.desired_return = 1.5;
    c = update_command(c, 1.0);
    CHECK(c.horizon == 1);
    CHECK(c.desired_return == 0.5);
    c = update_command(c, 1.0);
    CHECK(c.horizon == 1);
    CHECK(c.desired_return == -0.5);
}

TEST_CASE("single-episode exploratory command has zero spread") {
    auto m = memory_of({500});
    Rng rng(3);
    auto c = sample_exploratory_command(m, 20, rng);
    CHECK(c.horizon == 500);
    CHECK(c.desired_return == 500);
    ReplayMemory empty;
    CHECK_THROWS(sample_exploratory_command(empty, 20, rng));
}

TEST_CASE("eviction removes the lowest return, oldest first") {
    ReplayMemory m(3);
    for (std::size_t len : {5, 3, 7, 3, 9}) m.add_episode(unit_episode(len));
    REQUIRE(m.size() == 3);
    std::vector<double> returns;
    for (const auto& e : m.episodes()) returns.push_back(e.total_return);
    std::sort(returns.begin(), returns.end());
    CHECK(returns == std::vector<double>{5, 7, 9});
}

TEST_CASE("append requires an open episode") {
    ReplayMemory m;
    Transition t;
    t.reward = 1;
    m.append(t);
    t.terminal = true;
    m.append(t);
    CHECK(m.size() == 1);
    CHECK(m.episodes()[0].total_return == 2);
    CHECK_THROWS_AS(m.append(t), std::logic_error);
    m.begin_episode();
    m.append(t);
    CHECK(m.size() == 2);
}

TEST_CASE("dataset builders") {
    std::vector<std::size_t> lengths;
    for (std::size_t i = 0; i < 30; ++i) lengths.push_back(i % 3 == 0 ? 500 : 10 + i);
    auto m = memory_of(lengths);
    auto il = build_il_dataset(m, 5, 500);
    CHECK(il.size() == 5);
    for (const auto& e : il.episodes()) CHECK(e.total_return == 500);
    CHECK_THROWS_WITH(build_il_dataset(m, 11, 500), doctest::Contains("10 < 11"));

    auto off = build_offline_dataset(m, 20);
    CHECK(off.size() == 20);
    double worst_kept = 0;
    for (const auto& e : off.episodes()) worst_kept = std::max(worst_kept, e.total_return);
    CHECK(worst_kept < 500);
    CHECK_THROWS(build_offline_dataset(m, 31));
}

TEST_CASE("return statistics use the sample standard deviation") {
    auto m = memory_of({10, 20, 30});
    auto s = return_stats(m);
    CHECK(s.mean == 20);
    CHECK(s.std == doctest::Approx(10.0));
    CHECK(return_stats(memory_of({7})).std == 0);
}

TEST_CASE("dataset reader diagnostics") {
    auto read = [](const std::string& text) {
        std::istringstream in(text);
        return read_dataset(in);
    };
    auto kind_of = [&](const std::string& text) {
        try {
            read(text);
        } catch (const DatasetError& e) {
            return e.kind();
        }
        FAIL("accepted a bad dataset");
        return DatasetError::Kind::io;
    };
    CHECK(kind_of("") == DatasetError::Kind::bad_header);
    CHECK(kind_of("NOPE v1 online 0\n") == DatasetError::Kind::bad_header);
    CHECK(kind_of("GUDRL-DATASET v2 online 0\n") == DatasetError::Kind::version_mismatch);
    CHECK(kind_of("GUDRL-DATASET v1 online 1\n") == DatasetError::Kind::truncated);
    CHECK(kind_of("GUDRL-DATASET v1 online 1\nE 1 1\n0 0 0 0 1 1 NA\n") == DatasetError::Kind::malformed_record);
    CHECK(kind_of("GUDRL-DATASET v1 online 1\nE 1 1\n0 0 0 0 2 1 NA 1\n") == DatasetError::Kind::malformed_record);
    CHECK(kind_of("GUDRL-DATASET v1 online 1\nE 1 1\n0 0 0 0 1 1 NA 0\n") == DatasetError::Kind::malformed_record);
    CHECK(read("GUDRL-DATASET v1 online 1\nE 1 1\n0 0 0 0 1 1 NA 1\n").memory.size() == 1);
    CHECK_THROWS_AS(load_dataset("/nonexistent/dir/x.ds"), DatasetError);
}

}  // TEST_SUITE("unit")

TEST_SUITE("property") {

TEST_CASE("dataset files round-trip losslessly") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        ReplayMemory m;
        const std::size_t n = 1 + rng.below(5);
        for (std::size_t i = 0; i < n; ++i)
            m.add_episode(random_episode(rng, 1 + rng.below(40), trial % 2 == 0, trial % 2 == 1));
        std::ostringstream first;
        write_dataset(m, trial % 2 ? "gcrl" : "online", first);
        std::istringstream in(first.str());
        auto ds = read_dataset(in);
        REQUIRE(ds.memory.size() == m.size());
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(ds.memory.episodes()[i].transitions == m.episodes()[i].transitions);
            CHECK(ds.memory.episodes()[i].total_return == m.episodes()[i].total_return);
        }
        std::ostringstream second;
        write_dataset(ds.memory, ds.setting, second);
        CHECK(second.str() == first.str());
    }
}

TEST_CASE("memory stays within capacity and keeps the best returns") {
    Rng rng(29);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t cap = 1 + rng.below(10);
        ReplayMemory m(cap);
        std::vector<double> all;
        std::size_t last = 0;
        for (int i = 0; i < 30; ++i) {
            auto e = random_episode(rng, 1 + rng.below(20), true);
            all.push_back(static_cast<double>(e.length()));
            m.add_episode(std::move(e));
            CHECK(m.size() <= cap);
            CHECK(m.size() >= last);
            last = m.size();
        }
        std::sort(all.rbegin(), all.rend());
        std::vector<double> kept;
        for (const auto& e : m.episodes()) kept.push_back(e.total_return);
        std::sort(kept.rbegin(), kept.rend());
        all.resize(cap);
        CHECK(kept == all);
    }
}

TEST_CASE("exploratory commands stay within the top-K statistics") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        ReplayMemory m;
        const std::size_t n = 1 + rng.below(30);
        for (std::size_t i = 0; i < n; ++i) m.add_episode(random_episode(rng, 1 + rng.below(50), true));
        const std::size_t k = 1 + rng.below(25);
        auto top = top_episodes(m, k);
        double mean = 0, var = 0, len = 0;
        for (auto i : top) {
            mean += m.episodes()[i].total_return;
            len += static_cast<double>(m.episodes()[i].length());
        }
        mean /= static_cast<double>(top.size());
        len /= static_cast<double>(top.size());
        for (auto i : top) var += std::pow(m.episodes()[i].total_return - mean, 2);
        const double sd = top.size() > 1 ? std::sqrt(var / static_cast<double>(top.size() - 1)) : 0.0;
        auto c = sample_exploratory_command(m, k, rng);
        CHECK(c.horizon == std::max(1.0, std::round(len)));
        CHECK(c.desired_return >= mean - 1e-9);
        CHECK(c.desired_return <= mean + sd + 1e-9);
    }
}

TEST_CASE("training batches are valid hindsight suffixes") {
    Rng rng(37);
    for (int trial = 0; trial < 100; ++trial) {
        ReplayMemory m;
        for (int i = 0; i < 5; ++i) m.add_episode(random_episode(rng, 1 + rng.below(30), trial % 2 == 0));
        const std::size_t window = rng.below(8);
        auto batch = sample_training_batch(m, 8, rng, CommandMask{}, window);
        for (const auto& s : batch) {
            const auto& ep = m.episodes()[s.episode_index];
            auto full = hindsight_suffix(ep, s.start, CommandMask{});
            REQUIRE(s.length() >= 1);
            if (window) CHECK(s.length() <= window);
            for (std::size_t k = 0; k < s.length(); ++k) {
                CHECK(s.commands[k] == full.commands[k]);
                CHECK(s.actions[k] == full.actions[k]);
            }
        }
    }
}

}  // TEST_SUITE("property")
