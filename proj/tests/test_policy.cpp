#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "gradcheck.hpp"
#include "gudrl/adam.hpp"
#include "gudrl/policy.hpp"

using namespace gudrl;
using namespace gudrl::policy;

namespace {

PolicyConfig small_config() {
    PolicyConfig c;
    c.embed_dim = 3;
    c.encoding_dim = 3;
    c.heads = 2;
    c.ff_dim = 5;
    c.obs_features = 4;
    c.lstm_hidden = 3;
    return c;
}

TokenMask all_tokens() { return {true, true, true, true, true, true}; }

CommandTokenSet random_tokens(Rng& rng, const TokenMask& mask) {
    CommandTokenSet t;
    for (std::size_t k = 0; k < kTokenKinds; ++k) {
        t.present[k] = mask[k];
        t.values[k] = mask[k] ? rng.uniform(-2, 2) * (k < 2 ? 200.0 : 1.0) : 0.0;
    }
    return t;
}

env::Observation random_obs(Rng& rng) {
    return {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-0.2, 0.2), rng.uniform(-2, 2)};
}

std::vector<double> context_of(PolicyParams& p, const CommandTokenSet& t, std::span<const std::size_t> order = {}) {
    ad::Tape tape;
    return encode_tokens(tape, p, std::span(&t, 1), order).values();
}

replay::Episode random_episode(Rng& rng, std::size_t length, bool goal) {
    replay::Episode e;
    const double g = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < length; ++i) {
        replay::Transition t;
        t.observation = random_obs(rng);
        t.action = rng.uniform() < 0.5 ? env::Action::left : env::Action::right;
        t.reward = goal ? rng.uniform(0.1, 1.0) : 1.0;
        if (goal) t.goal = g;
        t.terminal = i + 1 == length;
        e.transitions.push_back(t);
    }
    e.total_return = 0;
    for (const auto& t : e.transitions) e.total_return += t.reward;
    return e;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_SUITE("oracle") {

TEST_CASE("full policy loss matches central differences") {
    struct Setup {
        replay::CommandMask commands;
        TokenMask tokens;
        bool goal;
        std::uint64_t seed;
    };
    const Setup setups[] = {
        {{true, true, false}, {true, true, false, true, true, true}, false, 41},
        {{true, false, false}, {true, false, false, true, false, true}, false, 42},
        {{true, true, true}, {true, true, true, true, true, true}, true, 43},
    };
    for (const auto& s : setups) {
        Rng rng(s.seed);
        PolicyParams params(small_config(), rng);
        replay::TrainingBatch batch;
        for (int i = 0; i < 3; ++i) {
            auto ep = random_episode(rng, 2 + rng.below(3), s.goal);
            batch.push_back(replay::hindsight_suffix(ep, rng.below(ep.length()), s.commands));
        }
        auto named = params.named();
        double worst = 0;
        {
            // Analytic gradient on the real parameters.
            for (auto& [name, t] : named) t->grad.clear();
            ad::Tape tape;
            tape.backward(loss_batch(tape, params, batch, s.tokens));
            const double h = 1e-5;
            double diff = 0, na = 0, nn = 0;
            for (auto& [name, t] : named) {
                for (std::size_t i = 0; i < t->values.size(); ++i) {
                    const double keep = t->values[i];
                    t->values[i] = keep + h;
                    ad::Tape up_tape;
                    const double up = loss_batch(up_tape, params, batch, s.tokens).item();
                    t->values[i] = keep - h;
                    ad::Tape down_tape;
                    const double down = loss_batch(down_tape, params, batch, s.tokens).item();
                    t->values[i] = keep;
                    const double numeric = (up - down) / (2 * h);
                    const double analytic = t->grad.empty() ? 0.0 : t->grad[i];
                    diff += (numeric - analytic) * (numeric - analytic);
                    na += analytic * analytic;
                    nn += numeric * numeric;
                }
            }
            worst = std::sqrt(diff) / std::max(std::sqrt(std::max(na, nn)), 1e-12);
        }
        CAPTURE(s.seed);
        CHECK(worst < 1e-4);
    }
}

}  // TEST_SUITE("oracle")

TEST_SUITE("unit") {

TEST_CASE("empty token set gives the zero context") {
    Rng rng(1);
    PolicyParams p(PolicyConfig{}, rng);
    CommandTokenSet empty;
    auto ctx = context_of(p, empty);
    CHECK(ctx.size() == p.config.token_dim());
    CHECK(std::all_of(ctx.begin(), ctx.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("a duplicated token encodes like a single one") {
    Rng rng(2);
    PolicyParams p(PolicyConfig{}, rng);
    for (std::size_t k = 0; k < kTokenKinds; ++k) {
        TokenMask m{};
        m[k] = true;
        auto t = random_tokens(rng, m);
        const std::size_t once[] = {k};
        const std::size_t twice[] = {k, k};
        CHECK(max_abs_diff(context_of(p, t, once), context_of(p, t, twice)) <= 1e-12);
    }
}

TEST_CASE("probabilities and action selection") {
    auto d = ActionDistribution::from_logits(0.3, -1.2);
    CHECK(std::abs(d.probs[0] + d.probs[1] - 1.0) <= 1e-12);
    Rng rng(3);
    auto certain = ActionDistribution::from_logits(0.0, -1000.0);
    for (int i = 0; i < 1000; ++i) CHECK(act(certain, rng, ActMode::sample) == env::Action::left);
    auto even = ActionDistribution::from_logits(0.0, 0.0);
    int left = 0;
    for (int i = 0; i < 10000; ++i) left += act(even, rng, ActMode::sample) == env::Action::left;
    CHECK(left >= 4700);
    CHECK(left <= 5300);
    CHECK(act(ActionDistribution::from_logits(std::log(0.4), std::log(0.6)), rng, ActMode::greedy) ==
          env::Action::right);
    CHECK(act(even, rng, ActMode::greedy) == env::Action::left);
}

TEST_CASE("golden logits from a fixed initialisation") {
    Rng rng(2024);
    PolicyParams p(PolicyConfig{}, rng);
    CHECK(p.parameter_count() == 48578);
    replay::Command c;
    c.horizon = 500;
    c.desired_return = 500;
    auto tokens = make_tokens(c, replay::PrevStep{}, {true, true, false, true, true, true});
    auto [dist, next] = policy_forward({0.01, -0.02, 0.03, -0.04}, tokens, HiddenState::zeros(p.config), p);
    CHECK(dist.logits[0] == doctest::Approx(-0.066579411691896961).epsilon(1e-12));
    CHECK(dist.logits[1] == doctest::Approx(-0.11121234784376456).epsilon(1e-12));
}

TEST_CASE("single uniform step gives ln 2") {
    Rng rng(4);
    PolicyParams p(PolicyConfig{}, rng);
    std::fill(p.head_w.values.begin(), p.head_w.values.end(), 0.0);
    std::fill(p.head_b.values.begin(), p.head_b.values.end(), 0.0);
    auto ep = random_episode(rng, 1, false);
    replay::TrainingBatch batch{replay::hindsight_suffix(ep, 0, {})};
    ad::Tape tape;
    CHECK(loss_batch(tape, p, batch, all_tokens()).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("duplicating a batch leaves the loss unchanged") {
    Rng rng(5);
    PolicyParams p(PolicyConfig{}, rng);
    replay::TrainingBatch batch;
    for (int i = 0; i < 4; ++i) {
        auto ep = random_episode(rng, 3 + rng.below(10), false);
        batch.push_back(replay::hindsight_suffix(ep, rng.below(ep.length()), {}));
    }
    auto doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    ad::Tape t1, t2;
    const TokenMask m{true, true, false, true, true, true};
    CHECK(loss_batch(t1, p, batch, m).item() == doctest::Approx(loss_batch(t2, p, doubled, m).item()).epsilon(1e-13));
    ad::Tape t3;
    CHECK_THROWS_AS(loss_batch(t3, p, replay::TrainingBatch{}, m), std::invalid_argument);
}

TEST_CASE("unrolled loss equals stepping one sample at a time") {
    Rng rng(6);
    PolicyParams p(PolicyConfig{}, rng);
    const TokenMask m{true, true, false, true, true, true};
    auto ep = random_episode(rng, 7, false);
    auto s = replay::hindsight_suffix(ep, 2, {});
    ad::Tape tape;
    const double batched = loss_batch(tape, p, {s}, m).item();
    auto h = HiddenState::zeros(p.config);
    double total = 0;
    for (std::size_t i = 0; i < s.length(); ++i) {
        h.prev = s.prev[i];
        auto [d, next] = policy_forward(s.observations[i], make_tokens(s.commands[i], s.prev[i], m), h, p);
        total += -std::log(d.probs[static_cast<std::size_t>(s.actions[i])]);
        h = next;
    }
    CHECK(batched == doctest::Approx(total / static_cast<double>(s.length())).epsilon(1e-12));
}

TEST_CASE("checkpoint diagnostics") {
    Rng rng(7);
    PolicyParams p(small_config(), rng);
    std::ostringstream out;
    write_checkpoint(p, out);
    std::string text = out.str();
    {
        std::istringstream in("GUDRL-CKPT v9 1\n");
        CHECK_THROWS_AS(read_checkpoint(in), CheckpointError);
    }
    {
        std::istringstream in(text.substr(0, text.size() / 2));
        CHECK_THROWS_AS(read_checkpoint(in), CheckpointError);
    }
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt"), CheckpointError);
}

TEST_CASE("training reduces the loss on a fixed memory") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(100 + seed);
        replay::ReplayMemory memory;
        for (int i = 0; i < 10; ++i) memory.add_episode(random_episode(rng, 5 + rng.below(30), false));
        PolicyParams p(PolicyConfig{}, rng);
        const TokenMask m{true, true, false, true, true, true};
        Rng fixed(seed);
        auto probe = replay::sample_training_batch(memory, 32, fixed, {}, 16);
        auto loss_now = [&] {
            ad::Tape tape;
            return loss_batch(tape, p, probe, m).item();
        };
        const double before = loss_now();
        AdamState adam;
        auto tensors = p.tensors();
        for (int step = 0; step < 200; ++step) {
            auto batch = replay::sample_training_batch(memory, 16, rng, {}, 16);
            for (auto* t : tensors) t->grad.assign(t->values.size(), 0.0);
            ad::Tape tape;
            tape.backward(loss_batch(tape, p, batch, m));
            adam_step(tensors, adam);
        }
        CAPTURE(seed);
        CHECK(loss_now() < before);
        CHECK(p.all_finite());
    }
}

}  // TEST_SUITE("unit")

TEST_SUITE("property") {

TEST_CASE("token encoding is permutation invariant") {
    Rng rng(8);
    PolicyParams p(PolicyConfig{}, rng);
    for (int trial = 0; trial < 100; ++trial) {
        TokenMask m{};
        for (auto& b : m) b = rng.uniform() < 0.6;
        auto t = random_tokens(rng, m);
        std::vector<std::size_t> order;
        for (std::size_t k = 0; k < kTokenKinds; ++k)
            if (m[k]) order.push_back(k);
        auto base = context_of(p, t, order);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        CHECK(max_abs_diff(base, context_of(p, t, order)) <= 1e-12);
    }
}

TEST_CASE("masked token values never reach the output") {
    Rng rng(9);
    PolicyParams p(PolicyConfig{}, rng);
    for (int trial = 0; trial < 100; ++trial) {
        TokenMask allowed{};
        for (auto& b : allowed) b = rng.uniform() < 0.5;
        replay::Command c;
        c.horizon = rng.uniform(1, 500);
        c.desired_return = rng.uniform(-10, 500);
        c.goal = rng.uniform(-1, 1);
        c.enabled = {rng.uniform() < 0.5, rng.uniform() < 0.5, rng.uniform() < 0.5};
        replay::PrevStep prev{rng.uniform() < 0.5 ? 1.0 : 0.0, rng.uniform(), 0};
        const auto obs = random_obs(rng);
        auto logits_for = [&](const replay::Command& cmd, const replay::PrevStep& pv) {
            auto [d, h] = policy_forward(obs, make_tokens(cmd, pv, allowed), HiddenState::zeros(p.config), p);
            return d.logits;
        };
        const auto base = logits_for(c, prev);
        auto c2 = c;
        auto prev2 = prev;
        using T = Token;
        auto on = [&](T k, bool enabled) { return allowed[static_cast<std::size_t>(k)] && enabled; };
        if (!on(T::horizon, c.enabled.horizon)) c2.horizon += 123;
        if (!on(T::desired_return, c.enabled.desired_return)) c2.desired_return -= 77;
        if (!on(T::goal, c.enabled.goal)) c2.goal = -*c.goal;
        if (!on(T::prev_action, true)) prev2.action = 1 - prev.action;
        if (!on(T::prev_reward, true)) prev2.reward += 5;
        if (!on(T::prev_terminal, true)) prev2.terminal = 1;
        CHECK(logits_for(c2, prev2) == base);
    }
}

TEST_CASE("disabled commands receive exactly zero gradient") {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        PolicyParams p(small_config(), rng);
        const bool empty = trial % 2 == 0;
        const TokenMask m = empty ? TokenMask{} : TokenMask{false, false, false, true, true, true};
        replay::TrainingBatch batch;
        for (int i = 0; i < 2; ++i) {
            auto ep = random_episode(rng, 2 + rng.below(5), true);
            batch.push_back(replay::hindsight_suffix(ep, rng.below(ep.length()), {true, true, true}));
        }
        for (auto* t : p.tensors()) t->grad.assign(t->values.size(), 0.0);
        ad::Tape tape;
        tape.backward(loss_batch(tape, p, batch, m));
        auto zero = [](const Tensor& t) { return std::all_of(t.grad.begin(), t.grad.end(), [](double g) { return g == 0.0; }); };
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(zero(p.token_w[k]));
            CHECK(zero(p.token_b[k]));
        }
        for (std::size_t j = 0; j < p.config.encoding_dim * 3; ++j) CHECK(p.encodings.grad[j] == 0.0);
        if (empty) {
            for (const Tensor* t : {&p.qkv_w, &p.ff1_w, &p.ln2_gain, &p.gate_w, &p.encodings}) CHECK(zero(*t));
        }
        CHECK_FALSE(zero(p.head_w));
    }
}

TEST_CASE("a reset hidden state forgets the previous episode") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        PolicyParams p(small_config(), rng);
        const TokenMask m{true, true, false, true, true, true};
        replay::Command c;
        c.horizon = 500;
        c.desired_return = 500;
        auto roll = [&](int steps) {
            auto h = HiddenState::zeros(p.config);
            for (int i = 0; i < steps; ++i) {
                auto [d, next] = policy_forward(random_obs(rng), make_tokens(c, h.prev, m), h, p);
                h = next;
                h.prev = {1, 1, 0};
            }
            return h;
        };
        auto first = roll(1 + static_cast<int>(rng.below(5)));
        auto second = roll(1 + static_cast<int>(rng.below(5)));
        CHECK(first.lstm_h != second.lstm_h);
        const auto obs = random_obs(rng);
        first = HiddenState::zeros(p.config);
        second = HiddenState::zeros(p.config);
        auto a = policy_forward(obs, make_tokens(c, first.prev, m), first, p).first.logits;
        auto b = policy_forward(obs, make_tokens(c, second.prev, m), second, p).first.logits;
        CHECK(a == b);
    }
}

TEST_CASE("the policy is stateful") {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        PolicyParams p(PolicyConfig{}, rng);
        const auto obs = random_obs(rng);
        auto tokens = random_tokens(rng, {true, true, false, true, true, true});
        auto h0 = HiddenState::zeros(p.config);
        auto [d1, h1] = policy_forward(obs, tokens, h0, p);
        auto [d2, h2] = policy_forward(obs, tokens, h1, p);
        CHECK(d1.logits != d2.logits);
        CHECK(std::abs(d1.probs[0] + d1.probs[1] - 1.0) <= 1e-9);
    }
}

TEST_CASE("checkpoints round-trip losslessly") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        auto cfg = small_config();
        cfg.lstm_hidden = 1 + rng.below(4);
        cfg.ff_dim = 1 + rng.below(6);
        PolicyParams p(cfg, rng);
        for (auto* t : p.tensors())
            for (auto& v : t->values) v = rng.uniform(-1, 1) * std::pow(10.0, rng.uniform(-8, 8));
        std::ostringstream out;
        write_checkpoint(p, out);
        std::istringstream in(out.str());
        auto q = read_checkpoint(in);
        CHECK(q.config == p.config);
        auto a = p.named();
        auto b = q.named();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].first == b[i].first);
            CHECK(a[i].second->shape == b[i].second->shape);
            CHECK(a[i].second->values == b[i].second->values);
        }
    }
}

}  // TEST_SUITE("property")
