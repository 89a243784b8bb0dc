#pragma once

// Reverse-mode differentiation over a dynamic tape.
//
// Every forward pass builds a fresh Tape. Persistent parameters enter the
// tape through Tape::param(), which binds the leaf to the caller's Tensor so
// that backward() can accumulate into Tensor::grad. All values are treated as
// row-major matrices (rank-1 tensors are a single row).

#include <cstddef>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gudrl/tensor.hpp"

namespace gudrl::ad {

enum class Op {
    leaf,
    add,           // same shape, or second operand a single row broadcast over rows
    multiply,      // elementwise, same broadcasting rule as add
    scale,         // multiply by a constant
    matmul,
    concat,        // along columns
    concat_rows,
    slice_cols,
    slice_rows,
    sigmoid,
    tanh,
    relu,
    max_over_set,  // elementwise max across equally shaped inputs
    embed_lookup,  // gather rows of a table
    layer_norm,    // row-wise, with gain and bias rows
    softmax,       // row-wise
    attention,     // multi-head scaled dot-product self-attention over token sets
    cross_entropy, // weighted mean of -log softmax(logits)[target] over rows
    sum,
};

std::string_view op_name(Op op);

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const std::vector<double>& values() const;
    const std::vector<std::size_t>& shape() const;
    std::size_t rows() const;
    std::size_t cols() const;
    double item() const;
};

struct Node {
    Op op = Op::leaf;
    std::vector<std::size_t> inputs;
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;
    Tensor* bound = nullptr;
    bool needs_grad = false;  // depends on some bound parameter
    std::vector<long> iattr;
    std::vector<double> dattr;
    std::vector<double> saved;
    std::vector<std::size_t> saved_index;
};

class Tape {
public:
    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf bound to a persistent tensor; repeated calls with the same tensor
    // return the same node so gradients from every use are summed.
    Var param(Tensor& t);
    Var constant(const Tensor& t);
    Var constant(std::vector<std::size_t> shape, std::vector<double> values);

    Var record(Op op, std::span<const Var> inputs, std::vector<long> iattr = {},
               std::vector<double> dattr = {});

    // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node, then
    // adds leaf gradients into their bound tensors.
    void backward(Var loss);

    // Recomputes every non-leaf node from its recorded inputs and reports
    // whether all outputs match the recorded ones bit for bit.
    bool replay() const;

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    const std::vector<double>& grad(Var v) const { return nodes_[v.id].grad; }
    // Bound leaves read straight from their tensor instead of holding a copy.
    const std::vector<double>& value_of(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.bound ? n.bound->values : n.value;
    }

private:
    std::vector<Node> nodes_;
    std::unordered_map<const Tensor*, std::size_t> bound_ids_;

    void forward(Node& n) const;
    void propagate(std::size_t id);
    std::vector<double>& grad_of(std::size_t id);
};

// Generic entry point for attribute-free primitives.
Var apply_primitive(Op op, std::span<const Var> inputs);

Var add(Var a, Var b);
Var multiply(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
Var concat(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var max_over_set(std::span<const Var> members);
Var embed_lookup(Var table, std::span<const std::size_t> indices);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax(Var a);
// q, k, v: [tokens * batch, width], token-major (row = token * batch + b).
Var attention(Var q, Var k, Var v, std::size_t tokens, std::size_t heads);
Var cross_entropy(Var logits, std::span<const std::size_t> targets,
                  std::span<const double> weights = {});
Var cross_entropy_loss(Var logits, std::size_t target);
Var sum(Var a);

// x * w + b for a row bias b.
Var linear(Var x, Var w, Var b);

}  // namespace gudrl::ad
