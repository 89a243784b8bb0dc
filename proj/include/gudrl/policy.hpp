#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gudrl/autodiff.hpp"
#include "gudrl/cartpole.hpp"
#include "gudrl/replay.hpp"
#include "gudrl/rng.hpp"
#include "gudrl/tensor.hpp"

namespace gudrl::policy {

// Scalar inputs that can enter the token set, in encoding-table order.
enum class Token : std::size_t { horizon, desired_return, goal, prev_action, prev_reward, prev_terminal };
inline constexpr std::size_t kTokenKinds = 6;
using TokenMask = std::array<bool, kTokenKinds>;

std::string_view token_name(Token t);

struct PolicyConfig {
    std::size_t embed_dim = 16;     // per-token scalar embedding
    std::size_t encoding_dim = 16;  // learnable per-kind encoding appended to it
    std::size_t heads = 2;
    std::size_t ff_dim = 64;
    std::size_t obs_features = 64;
    std::size_t lstm_hidden = 64;
    std::size_t actions = 2;
    double command_scale = 1.0 / 500.0;  // applied to d^H and d^R before embedding

    std::size_t token_dim() const { return embed_dim + encoding_dim; }
    bool operator==(const PolicyConfig&) const = default;
};

struct CommandTokenSet {
    std::array<double, kTokenKinds> values{};
    TokenMask present{};

    std::size_t count() const;
};

// Builds the token set for one step. A command component is present when the
// setting allows it and the command enables it; the goal also needs a value.
CommandTokenSet make_tokens(const replay::Command& c, const replay::PrevStep& prev, const TokenMask& allowed);

struct PolicyParams {
    PolicyConfig config;

    Tensor obs_w, obs_b;
    std::array<Tensor, kTokenKinds> token_w, token_b;
    Tensor encodings;
    Tensor qkv_w, qkv_b, attn_out_w, attn_out_b;
    Tensor ln1_gain, ln1_bias;
    Tensor ff1_w, ff1_b, ff2_w, ff2_b;
    Tensor ln2_gain, ln2_bias;
    Tensor fuse_w, fuse_b, gate_w, gate_b;
    Tensor lstm_w_ih, lstm_w_hh, lstm_b;
    Tensor head_w, head_b;

    PolicyParams() = default;
    PolicyParams(const PolicyConfig& cfg, Rng& rng);

    // Stable (name, tensor) listing used by the optimiser and checkpoints.
    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<std::pair<std::string, const Tensor*>> named() const;
    std::vector<Tensor*> tensors();
    std::size_t parameter_count() const;
    bool all_finite() const;
};

struct RecurrentVars {
    ad::Var h;
    ad::Var c;
};

// Zero LSTM state for `batch` rows on the tape.
RecurrentVars zero_state(ad::Tape& tape, const PolicyConfig& cfg, std::size_t batch);

// Context vector [batch, token_dim]. Every row must share one presence mask;
// an empty set gives zeros. `order` lists the token kinds in the order they
// are stacked into the encoder (default: present kinds in enum order); every
// listed kind must be present, and a kind may repeat.
ad::Var encode_tokens(ad::Tape& tape, PolicyParams& params, std::span<const CommandTokenSet> rows,
                      std::span<const std::size_t> order = {});

struct StepOutput {
    ad::Var logits;
    RecurrentVars next;
};

StepOutput policy_step(ad::Tape& tape, PolicyParams& params, std::span<const env::Observation> obs,
                       std::span<const CommandTokenSet> tokens, RecurrentVars state);

// Runs several recurrent steps at once. Rows are time-major: step k owns the
// next active[k] rows, active counts never increase, and the rows still
// running at step k are the first active[k] rows of step k-1. Everything that
// does not depend on the recurrent state is computed in one pass over all
// rows. Returns logits for every row, in input order.
StepOutput policy_unroll(ad::Tape& tape, PolicyParams& params, std::span<const env::Observation> obs,
                         std::span<const CommandTokenSet> tokens, std::span<const std::size_t> active,
                         RecurrentVars state);

struct HiddenState {
    std::vector<double> lstm_h;
    std::vector<double> lstm_c;
    replay::PrevStep prev;  // start-of-episode marker after reset

    static HiddenState zeros(const PolicyConfig& cfg);
};

struct ActionDistribution {
    std::array<double, 2> logits{};
    std::array<double, 2> probs{};

    static ActionDistribution from_logits(double l0, double l1);
};

// Single-sample forward; the returned state carries the advanced LSTM memory
// and the unchanged previous-step tokens.
std::pair<ActionDistribution, HiddenState> policy_forward(const env::Observation& obs, const CommandTokenSet& tokens,
                                                          const HiddenState& hidden, PolicyParams& params);

enum class ActMode { sample, greedy };
env::Action act(const ActionDistribution& dist, Rng& rng, ActMode mode);

// Mean cross-entropy over every step of every sequence, threading the LSTM
// state through each suffix from a zero state at its head.
ad::Var loss_batch(ad::Tape& tape, PolicyParams& params, const replay::TrainingBatch& batch, const TokenMask& allowed);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
void write_checkpoint(const PolicyParams& params, std::ostream& out);
PolicyParams load_checkpoint(const std::filesystem::path& path);
PolicyParams read_checkpoint(std::istream& in);

}  // namespace gudrl::policy
