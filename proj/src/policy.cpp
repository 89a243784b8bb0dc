#include "gudrl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gudrl::policy {

using ad::Var;

std::string_view token_name(Token t) {
    switch (t) {
    case Token::horizon: return "horizon";
    case Token::desired_return: return "desired_return";
    case Token::goal: return "goal";
    case Token::prev_action: return "prev_action";
    case Token::prev_reward: return "prev_reward";
    case Token::prev_terminal: return "prev_terminal";
    }
    return "unknown";
}

std::size_t CommandTokenSet::count() const {
    return static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
}

CommandTokenSet make_tokens(const replay::Command& c, const replay::PrevStep& prev, const TokenMask& allowed) {
    CommandTokenSet t;
    auto set = [&](Token k, bool on, double v) {
        const auto i = static_cast<std::size_t>(k);
        t.present[i] = allowed[i] && on;
        if (t.present[i]) t.values[i] = v;
    };
    set(Token::horizon, c.enabled.horizon, c.horizon);
    set(Token::desired_return, c.enabled.desired_return, c.desired_return);
    set(Token::goal, c.enabled.goal && c.goal.has_value(), c.goal.value_or(0.0));
    set(Token::prev_action, true, prev.action);
    set(Token::prev_reward, true, prev.reward);
    set(Token::prev_terminal, true, prev.terminal);
    return t;
}

namespace {

Tensor uniform_tensor(std::vector<std::size_t> shape, double bound, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values) v = rng.uniform(-bound, bound);
    return t;
}

// Linear layer initialised like the common default: U(-1/sqrt(in), 1/sqrt(in)).
std::pair<Tensor, Tensor> linear_init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    auto w = uniform_tensor({in, out}, bound, rng);
    auto b = uniform_tensor({1, out}, bound, rng);
    return {std::move(w), std::move(b)};
}

Tensor filled(std::size_t n, double v) { return Tensor({1, n}, std::vector<double>(n, v)); }

}  // namespace

PolicyParams::PolicyParams(const PolicyConfig& cfg, Rng& rng) : config(cfg) {
    if (cfg.token_dim() % cfg.heads != 0) throw std::invalid_argument("policy: token width must split across heads");
    if (cfg.actions != 2) throw std::invalid_argument("policy: only two actions are supported");
    const std::size_t d = cfg.token_dim();
    std::tie(obs_w, obs_b) = linear_init(4, cfg.obs_features, rng);
    for (std::size_t k = 0; k < kTokenKinds; ++k) std::tie(token_w[k], token_b[k]) = linear_init(1, cfg.embed_dim, rng);
    encodings = uniform_tensor({kTokenKinds, cfg.encoding_dim}, 1.0, rng);
    std::tie(qkv_w, qkv_b) = linear_init(d, 3 * d, rng);
    std::tie(attn_out_w, attn_out_b) = linear_init(d, d, rng);
    ln1_gain = filled(d, 1.0);
    ln1_bias = filled(d, 0.0);
    std::tie(ff1_w, ff1_b) = linear_init(d, cfg.ff_dim, rng);
    std::tie(ff2_w, ff2_b) = linear_init(cfg.ff_dim, d, rng);
    ln2_gain = filled(d, 1.0);
    ln2_bias = filled(d, 0.0);
    std::tie(fuse_w, fuse_b) = linear_init(cfg.obs_features, cfg.obs_features, rng);
    std::tie(gate_w, gate_b) = linear_init(d, cfg.obs_features, rng);
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.lstm_hidden));
        lstm_w_ih = uniform_tensor({cfg.obs_features, 4 * cfg.lstm_hidden}, bound, rng);
        lstm_w_hh = uniform_tensor({cfg.lstm_hidden, 4 * cfg.lstm_hidden}, bound, rng);
        lstm_b = uniform_tensor({1, 4 * cfg.lstm_hidden}, bound, rng);
    }
    std::tie(head_w, head_b) = linear_init(cfg.lstm_hidden, cfg.actions, rng);
}

std::vector<std::pair<std::string, Tensor*>> PolicyParams::named() {
    std::vector<std::pair<std::string, Tensor*>> out = {{"obs_w", &obs_w}, {"obs_b", &obs_b}};
    for (std::size_t k = 0; k < kTokenKinds; ++k) {
        const std::string n(token_name(static_cast<Token>(k)));
        out.emplace_back("token_w." + n, &token_w[k]);
        out.emplace_back("token_b." + n, &token_b[k]);
    }
    out.insert(out.end(), {{"encodings", &encodings},   {"qkv_w", &qkv_w},       {"qkv_b", &qkv_b},
                           {"attn_out_w", &attn_out_w}, {"attn_out_b", &attn_out_b}, {"ln1_gain", &ln1_gain},
                           {"ln1_bias", &ln1_bias},     {"ff1_w", &ff1_w},       {"ff1_b", &ff1_b},
                           {"ff2_w", &ff2_w},           {"ff2_b", &ff2_b},       {"ln2_gain", &ln2_gain},
                           {"ln2_bias", &ln2_bias},     {"fuse_w", &fuse_w},     {"fuse_b", &fuse_b},
                           {"gate_w", &gate_w},         {"gate_b", &gate_b},     {"lstm_w_ih", &lstm_w_ih},
                           {"lstm_w_hh", &lstm_w_hh},
                           {"lstm_b", &lstm_b},         {"head_w", &head_w},     {"head_b", &head_b}});
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> PolicyParams::named() const {
    auto mut = const_cast<PolicyParams*>(this)->named();
    return {mut.begin(), mut.end()};
}

std::vector<Tensor*> PolicyParams::tensors() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

std::size_t PolicyParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t->size();
    return n;
}

bool PolicyParams::all_finite() const {
    for (const auto& [name, t] : named())
        for (double v : t->values)
            if (!std::isfinite(v)) return false;
    return true;
}

RecurrentVars zero_state(ad::Tape& tape, const PolicyConfig& cfg, std::size_t batch) {
    std::vector<double> z(batch * cfg.lstm_hidden, 0.0);
    return {tape.constant({batch, cfg.lstm_hidden}, z), tape.constant({batch, cfg.lstm_hidden}, z)};
}

Var encode_tokens(ad::Tape& tape, PolicyParams& p, std::span<const CommandTokenSet> rows,
                  std::span<const std::size_t> order) {
    const auto& cfg = p.config;
    const std::size_t batch = rows.size();
    if (batch == 0) throw std::invalid_argument("encode_tokens: no rows");
    const TokenMask mask = rows[0].present;
    for (const auto& r : rows)
        if (r.present != mask) throw std::invalid_argument("encode_tokens: rows disagree on token presence");

    std::vector<std::size_t> kinds(order.begin(), order.end());
    if (order.empty()) {
        for (std::size_t k = 0; k < kTokenKinds; ++k)
            if (mask[k]) kinds.push_back(k);
    }
    for (auto k : kinds)
        if (k >= kTokenKinds || !mask[k])
            throw std::invalid_argument("encode_tokens: token kind " + std::to_string(k) + " is not present");
    const std::size_t d = cfg.token_dim();
    if (kinds.empty()) return tape.constant({batch, d}, std::vector<double>(batch * d, 0.0));

    std::vector<Var> embedded;
    embedded.reserve(kinds.size());
    for (auto k : kinds) {
        const bool scaled = k == static_cast<std::size_t>(Token::horizon) ||
                            k == static_cast<std::size_t>(Token::desired_return);
        std::vector<double> col(batch);
        for (std::size_t b = 0; b < batch; ++b) col[b] = rows[b].values[k] * (scaled ? cfg.command_scale : 1.0);
        Var scalar = tape.constant({batch, 1}, std::move(col));
        Var emb = ad::linear(scalar, tape.param(p.token_w[k]), tape.param(p.token_b[k]));
        std::vector<std::size_t> idx(batch, k);
        Var enc = ad::embed_lookup(tape.param(p.encodings), idx);
        Var parts[] = {emb, enc};
        embedded.push_back(ad::concat(parts));
    }
    const std::size_t n = kinds.size();
    Var x = n == 1 ? embedded[0] : ad::concat_rows(embedded);

    // Post-norm Transformer encoder layer over the token set.
    Var qkv = ad::linear(x, tape.param(p.qkv_w), tape.param(p.qkv_b));
    Var q = ad::slice_cols(qkv, 0, d);
    Var k = ad::slice_cols(qkv, d, 2 * d);
    Var v = ad::slice_cols(qkv, 2 * d, 3 * d);
    Var att = ad::attention(q, k, v, n, cfg.heads);
    att = ad::linear(att, tape.param(p.attn_out_w), tape.param(p.attn_out_b));
    Var x1 = ad::layer_norm(ad::add(x, att), tape.param(p.ln1_gain), tape.param(p.ln1_bias));
    Var ff = ad::linear(ad::relu(ad::linear(x1, tape.param(p.ff1_w), tape.param(p.ff1_b))), tape.param(p.ff2_w),
                        tape.param(p.ff2_b));
    Var x2 = ad::layer_norm(ad::add(x1, ff), tape.param(p.ln2_gain), tape.param(p.ln2_bias));

    if (n == 1) return x2;
    std::vector<Var> members;
    members.reserve(n);
    for (std::size_t i = 0; i < n; ++i) members.push_back(ad::slice_rows(x2, i * batch, (i + 1) * batch));
    return ad::max_over_set(members);
}

StepOutput policy_step(ad::Tape& tape, PolicyParams& p, std::span<const env::Observation> obs,
                       std::span<const CommandTokenSet> tokens, RecurrentVars state) {
    const std::size_t active[] = {obs.size()};
    return policy_unroll(tape, p, obs, tokens, active, state);
}

StepOutput policy_unroll(ad::Tape& tape, PolicyParams& p, std::span<const env::Observation> obs,
                         std::span<const CommandTokenSet> tokens, std::span<const std::size_t> active,
                         RecurrentVars state) {
    const auto& cfg = p.config;
    const std::size_t rows = obs.size();
    const std::size_t H = cfg.lstm_hidden;
    if (tokens.size() != rows) throw std::invalid_argument("policy_unroll: observation and token row counts differ");
    if (active.empty() || rows == 0) throw std::invalid_argument("policy_unroll: nothing to run");
    std::size_t total = 0;
    for (std::size_t k = 0; k < active.size(); ++k) {
        if (active[k] == 0 || (k > 0 && active[k] > active[k - 1]))
            throw std::invalid_argument("policy_unroll: active row counts must be positive and non-increasing");
        total += active[k];
    }
    if (total != rows) throw std::invalid_argument("policy_unroll: active counts do not cover the rows");
    if (state.h.rows() != active[0] || state.h.cols() != H || state.c.rows() != active[0] || state.c.cols() != H)
        throw std::invalid_argument("policy_unroll: hidden state " + shape_string(state.h.shape()) +
                                    " does not match batch " + std::to_string(active[0]) + " x " + std::to_string(H));

    // State-independent part, batched over all rows.
    std::vector<double> o;
    o.reserve(rows * 4);
    for (const auto& row : obs) o.insert(o.end(), row.begin(), row.end());
    Var feat = ad::linear(tape.constant({rows, 4}, std::move(o)), tape.param(p.obs_w), tape.param(p.obs_b));
    Var context = encode_tokens(tape, p, tokens);
    Var gate = ad::sigmoid(ad::linear(context, tape.param(p.gate_w), tape.param(p.gate_b)));
    Var fused = ad::multiply(ad::linear(feat, tape.param(p.fuse_w), tape.param(p.fuse_b)), gate);
    Var lstm_in = ad::linear(fused, tape.param(p.lstm_w_ih), tape.param(p.lstm_b));

    Var w_hh = tape.param(p.lstm_w_hh);
    std::vector<Var> hs;
    hs.reserve(active.size());
    std::size_t offset = 0;
    for (std::size_t k = 0; k < active.size(); ++k) {
        const std::size_t n = active[k];
        if (n < state.h.rows()) {
            state.h = ad::slice_rows(state.h, 0, n);
            state.c = ad::slice_rows(state.c, 0, n);
        }
        Var x = active.size() == 1 ? lstm_in : ad::slice_rows(lstm_in, offset, offset + n);
        Var z = ad::add(x, ad::matmul(state.h, w_hh));
        Var in_gate = ad::sigmoid(ad::slice_cols(z, 0, H));
        Var forget = ad::sigmoid(ad::slice_cols(z, H, 2 * H));
        Var cand = ad::tanh(ad::slice_cols(z, 2 * H, 3 * H));
        Var out_gate = ad::sigmoid(ad::slice_cols(z, 3 * H, 4 * H));
        state.c = ad::add(ad::multiply(forget, state.c), ad::multiply(in_gate, cand));
        state.h = ad::multiply(out_gate, ad::tanh(state.c));
        hs.push_back(state.h);
        offset += n;
    }
    Var all_h = hs.size() == 1 ? hs[0] : ad::concat_rows(hs);
    Var logits = ad::linear(all_h, tape.param(p.head_w), tape.param(p.head_b));
    return {logits, state};
}

HiddenState HiddenState::zeros(const PolicyConfig& cfg) {
    HiddenState s;
    s.lstm_h.assign(cfg.lstm_hidden, 0.0);
    s.lstm_c.assign(cfg.lstm_hidden, 0.0);
    return s;
}

ActionDistribution ActionDistribution::from_logits(double l0, double l1) {
    ActionDistribution d;
    d.logits = {l0, l1};
    const double m = std::max(l0, l1);
    const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
    d.probs = {e0 / (e0 + e1), e1 / (e0 + e1)};
    return d;
}

std::pair<ActionDistribution, HiddenState> policy_forward(const env::Observation& obs, const CommandTokenSet& tokens,
                                                          const HiddenState& hidden, PolicyParams& params) {
    const std::size_t H = params.config.lstm_hidden;
    if (hidden.lstm_h.size() != H || hidden.lstm_c.size() != H)
        throw std::invalid_argument("policy_forward: hidden state width " + std::to_string(hidden.lstm_h.size()) +
                                    " does not match " + std::to_string(H));
    ad::Tape tape;
    RecurrentVars state{tape.constant({1, H}, hidden.lstm_h), tape.constant({1, H}, hidden.lstm_c)};
    auto out = policy_step(tape, params, std::span(&obs, 1), std::span(&tokens, 1), state);
    const auto& l = out.logits.values();
    HiddenState next = hidden;
    next.lstm_h = out.next.h.values();
    next.lstm_c = out.next.c.values();
    return {ActionDistribution::from_logits(l[0], l[1]), std::move(next)};
}

env::Action act(const ActionDistribution& dist, Rng& rng, ActMode mode) {
    if (mode == ActMode::greedy) return dist.probs[1] > dist.probs[0] ? env::Action::right : env::Action::left;
    return rng.uniform() < dist.probs[0] ? env::Action::left : env::Action::right;
}

Var loss_batch(ad::Tape& tape, PolicyParams& params, const replay::TrainingBatch& batch, const TokenMask& allowed) {
    if (batch.empty()) throw std::invalid_argument("loss_batch: empty batch");
    for (const auto& s : batch)
        if (s.length() == 0) throw std::invalid_argument("loss_batch: empty sequence in batch");

    // Longest first, so the rows still running at step k are always a prefix.
    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return batch[a].length() > batch[b].length(); });
    const std::size_t steps = batch[order[0]].length();

    std::vector<std::size_t> active;
    std::vector<std::size_t> targets;
    std::vector<env::Observation> obs;
    std::vector<CommandTokenSet> tokens;
    std::size_t n = batch.size();
    for (std::size_t k = 0; k < steps; ++k) {
        while (n > 0 && batch[order[n - 1]].length() <= k) --n;
        active.push_back(n);
        for (std::size_t r = 0; r < n; ++r) {
            const auto& s = batch[order[r]];
            obs.push_back(s.observations[k]);
            tokens.push_back(make_tokens(s.commands[k], s.prev[k], allowed));
            targets.push_back(static_cast<std::size_t>(s.actions[k]));
        }
    }
    auto out = policy_unroll(tape, params, obs, tokens, active, zero_state(tape, params.config, batch.size()));
    return ad::cross_entropy(out.logits, targets);
}

namespace {

constexpr const char* kCkptMagic = "GUDRL-CKPT";
constexpr const char* kCkptVersion = "v1";

std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_checkpoint(const PolicyParams& params, std::ostream& out) {
    const auto& c = params.config;
    const auto named = params.named();
    out << kCkptMagic << ' ' << kCkptVersion << ' ' << named.size() << '\n';
    out << "config " << c.embed_dim << ' ' << c.encoding_dim << ' ' << c.heads << ' ' << c.ff_dim << ' '
        << c.obs_features << ' ' << c.lstm_hidden << ' ' << c.actions << ' ' << real(c.command_scale) << '\n';
    for (const auto& [name, t] : named) {
        out << "P " << name << ' ' << t->shape.size();
        for (auto d : t->shape) out << ' ' << d;
        out << '\n';
        for (std::size_t i = 0; i < t->values.size(); ++i) out << (i ? " " : "") << real(t->values[i]);
        out << '\n';
    }
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + path.string() + "' for writing");
    write_checkpoint(params, f);
    if (!f) throw CheckpointError("checkpoint: write to '" + path.string() + "' failed");
}

PolicyParams read_checkpoint(std::istream& in) {
    std::string magic, version;
    std::size_t count = 0;
    if (!(in >> magic >> version >> count) || magic != kCkptMagic)
        throw CheckpointError("checkpoint: missing GUDRL-CKPT header");
    if (version != kCkptVersion)
        throw CheckpointError("checkpoint: unsupported version '" + version + "', expected " + kCkptVersion);
    std::string tag;
    PolicyConfig cfg;
    if (!(in >> tag) || tag != "config" ||
        !(in >> cfg.embed_dim >> cfg.encoding_dim >> cfg.heads >> cfg.ff_dim >> cfg.obs_features >> cfg.lstm_hidden >>
          cfg.actions >> cfg.command_scale))
        throw CheckpointError("checkpoint: malformed config line");
    Rng unused(0);
    PolicyParams params;
    try {
        params = PolicyParams(cfg, unused);
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint: invalid config: ") + e.what());
    }
    auto named = params.named();
    if (count != named.size())
        throw CheckpointError("checkpoint: expected " + std::to_string(named.size()) + " parameter blocks, header says " +
                              std::to_string(count));
    for (auto& [name, t] : named) {
        std::string block_name;
        std::size_t rank = 0;
        if (!(in >> tag >> block_name >> rank) || tag != "P")
            throw CheckpointError("checkpoint: truncated before parameter '" + name + "'");
        if (block_name != name)
            throw CheckpointError("checkpoint: expected parameter '" + name + "', found '" + block_name + "'");
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape)
            if (!(in >> d)) throw CheckpointError("checkpoint: truncated shape for '" + name + "'");
        if (shape != t->shape)
            throw CheckpointError("checkpoint: parameter '" + name + "' has shape " + shape_string(shape) +
                                  ", expected " + shape_string(t->shape));
        for (auto& v : t->values) {
            std::string tok;
            if (!(in >> tok)) throw CheckpointError("checkpoint: truncated values for '" + name + "'");
            try {
                std::size_t used = 0;
                v = std::stod(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw CheckpointError("checkpoint: bad value '" + tok + "' in '" + name + "'");
            }
            if (!std::isfinite(v)) throw CheckpointError("checkpoint: non-finite value in '" + name + "'");
        }
    }
    return params;
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
    return read_checkpoint(f);
}

}  // namespace gudrl::policy
