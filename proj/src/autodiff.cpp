#include "gudrl/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace gudrl::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t rows_of(const std::vector<std::size_t>& shape) {
    return shape_product(shape) / shape.back();
}

std::size_t cols_of(const std::vector<std::size_t>& shape) { return shape.back(); }

[[noreturn]] void shape_error(Op op, std::string_view detail) {
    throw std::invalid_argument(std::string(op_name(op)) + ": " + std::string(detail));
}

std::string shapes_of(const std::vector<const Node*>& in) {
    std::string s;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (i) s += " and ";
        s += shape_string(in[i]->shape);
    }
    return s;
}

bool broadcastable(const Node& a, const Node& b) {
    if (a.shape == b.shape) return true;
    return rows_of(b.shape) == 1 && cols_of(b.shape) == cols_of(a.shape);
}

double sigmoid_fn(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// Shape inference and validation, run before forward().
std::vector<std::size_t> infer_shape(Op op, const std::vector<const Node*>& in,
                                     const std::vector<long>& iattr,
                                     const std::vector<double>& dattr) {
    auto need = [&](std::size_t n) {
        if (in.size() != n)
            shape_error(op, "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    };
    switch (op) {
    case Op::leaf:
        shape_error(op, "leaves are created with Tape::param or Tape::constant");
    case Op::add:
    case Op::multiply:
        need(2);
        if (!broadcastable(*in[0], *in[1])) shape_error(op, "shape mismatch " + shapes_of(in));
        return in[0]->shape;
    case Op::scale:
        need(1);
        if (dattr.size() != 1) shape_error(op, "missing scale factor");
        return in[0]->shape;
    case Op::matmul: {
        need(2);
        if (cols_of(in[0]->shape) != rows_of(in[1]->shape))
            shape_error(op, "inner dimensions differ " + shapes_of(in));
        return {rows_of(in[0]->shape), cols_of(in[1]->shape)};
    }
    case Op::concat: {
        if (in.empty()) shape_error(op, "no inputs");
        std::size_t r = rows_of(in[0]->shape), c = 0;
        for (auto* n : in) {
            if (rows_of(n->shape) != r) shape_error(op, "row counts differ " + shapes_of(in));
            c += cols_of(n->shape);
        }
        return {r, c};
    }
    case Op::concat_rows: {
        if (in.empty()) shape_error(op, "no inputs");
        std::size_t c = cols_of(in[0]->shape), r = 0;
        for (auto* n : in) {
            if (cols_of(n->shape) != c) shape_error(op, "column counts differ " + shapes_of(in));
            r += rows_of(n->shape);
        }
        return {r, c};
    }
    case Op::slice_cols:
    case Op::slice_rows: {
        need(1);
        if (iattr.size() != 2) shape_error(op, "missing bounds");
        auto lim = op == Op::slice_cols ? cols_of(in[0]->shape) : rows_of(in[0]->shape);
        if (iattr[0] < 0 || iattr[1] <= iattr[0] || static_cast<std::size_t>(iattr[1]) > lim)
            shape_error(op, "bounds [" + std::to_string(iattr[0]) + "," + std::to_string(iattr[1]) +
                                ") outside " + shapes_of(in));
        std::size_t len = static_cast<std::size_t>(iattr[1] - iattr[0]);
        if (op == Op::slice_cols) return {rows_of(in[0]->shape), len};
        return {len, cols_of(in[0]->shape)};
    }
    case Op::sigmoid:
    case Op::tanh:
    case Op::relu:
    case Op::softmax:
        need(1);
        return in[0]->shape;
    case Op::max_over_set:
        if (in.empty()) shape_error(op, "empty set");
        for (auto* n : in)
            if (n->shape != in[0]->shape) shape_error(op, "members differ in shape " + shapes_of(in));
        return in[0]->shape;
    case Op::embed_lookup: {
        need(1);
        auto rows = rows_of(in[0]->shape);
        if (iattr.empty()) shape_error(op, "no indices");
        for (auto i : iattr)
            if (i < 0 || static_cast<std::size_t>(i) >= rows)
                shape_error(op, "index " + std::to_string(i) + " outside table " + shapes_of(in));
        return {iattr.size(), cols_of(in[0]->shape)};
    }
    case Op::layer_norm: {
        need(3);
        auto c = cols_of(in[0]->shape);
        for (int i = 1; i < 3; ++i)
            if (shape_product(in[i]->shape) != c) shape_error(op, "gain/bias width mismatch " + shapes_of(in));
        return in[0]->shape;
    }
    case Op::attention: {
        need(3);
        if (iattr.size() != 2 || iattr[0] <= 0 || iattr[1] <= 0) shape_error(op, "bad token/head counts");
        if (in[0]->shape != in[1]->shape || in[0]->shape != in[2]->shape)
            shape_error(op, "q/k/v shapes differ " + shapes_of(in));
        auto r = rows_of(in[0]->shape), c = cols_of(in[0]->shape);
        if (r % static_cast<std::size_t>(iattr[0]) != 0)
            shape_error(op, std::to_string(r) + " rows do not split into " + std::to_string(iattr[0]) + " tokens");
        if (c % static_cast<std::size_t>(iattr[1]) != 0)
            shape_error(op, std::to_string(c) + " columns do not split into " + std::to_string(iattr[1]) + " heads");
        return {r, c};
    }
    case Op::cross_entropy: {
        need(1);
        auto r = rows_of(in[0]->shape), c = cols_of(in[0]->shape);
        if (iattr.size() != r) shape_error(op, "need one target per row of " + shapes_of(in));
        for (auto t : iattr)
            if (t < 0 || static_cast<std::size_t>(t) >= c)
                shape_error(op, "target index " + std::to_string(t) + " out of range for " + shapes_of(in));
        if (dattr.size() != r) shape_error(op, "need one weight per row");
        double total = 0;
        for (auto w : dattr) {
            if (w < 0) shape_error(op, "negative row weight");
            total += w;
        }
        if (!(total > 0)) shape_error(op, "row weights sum to zero");
        return {1};
    }
    case Op::sum:
        need(1);
        return {1};
    }
    shape_error(op, "unknown primitive");
}

}  // namespace

std::string_view op_name(Op op) {
    switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::multiply: return "multiply";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::concat: return "concat";
    case Op::concat_rows: return "concat_rows";
    case Op::slice_cols: return "slice_cols";
    case Op::slice_rows: return "slice_rows";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::max_over_set: return "max_over_set";
    case Op::embed_lookup: return "embed_lookup";
    case Op::layer_norm: return "layer_norm";
    case Op::softmax: return "softmax";
    case Op::attention: return "attention";
    case Op::cross_entropy: return "cross_entropy";
    case Op::sum: return "sum";
    }
    return "unknown";
}

const std::vector<double>& Var::values() const { return tape->value_of(id); }
const std::vector<std::size_t>& Var::shape() const { return tape->node(id).shape; }
std::size_t Var::rows() const { return rows_of(shape()); }
std::size_t Var::cols() const { return cols_of(shape()); }
double Var::item() const {
    if (values().size() != 1) throw std::invalid_argument("item: tensor is not a scalar");
    return values()[0];
}

namespace {

// Tape buffers are large and short-lived. With glibc's default thresholds
// each one is a fresh mmap, and first-touch page faults cost more than the
// arithmetic, so keep them on the heap and keep the heap from shrinking.
void keep_large_buffers_on_heap() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        mallopt(M_TOP_PAD, 64 << 20);
        return true;
    }();
    (void)done;
#endif
}

}  // namespace

Tape::Tape() {
    keep_large_buffers_on_heap();
    nodes_.reserve(256);
}

Var Tape::param(Tensor& t) {
    if (auto it = bound_ids_.find(&t); it != bound_ids_.end()) return {this, it->second};
    Node n;
    n.shape = t.shape;
    n.bound = &t;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    bound_ids_[&t] = nodes_.size() - 1;
    return {this, nodes_.size() - 1};
}

Var Tape::constant(const Tensor& t) { return constant(t.shape, t.values); }

Var Tape::constant(std::vector<std::size_t> shape, std::vector<double> values) {
    Tensor checked(std::move(shape), std::move(values));
    Node n;
    n.shape = std::move(checked.shape);
    n.value = std::move(checked.values);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::record(Op op, std::span<const Var> inputs, std::vector<long> iattr, std::vector<double> dattr) {
    std::vector<const Node*> in;
    in.reserve(inputs.size());
    for (auto v : inputs) {
        if (v.tape != this) throw std::invalid_argument(std::string(op_name(op)) + ": input from another tape");
        in.push_back(&nodes_[v.id]);
    }
    Node n;
    n.op = op;
    n.shape = infer_shape(op, in, iattr, dattr);
    n.iattr = std::move(iattr);
    n.dattr = std::move(dattr);
    n.inputs.reserve(inputs.size());
    for (auto v : inputs) {
        n.inputs.push_back(v.id);
        n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    forward(n);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

void Tape::forward(Node& n) const {
    auto in = [&](std::size_t i) -> const Node& { return nodes_[n.inputs[i]]; };
    auto val = [&](std::size_t i) -> const std::vector<double>& { return value_of(n.inputs[i]); };
    const std::size_t out_size = shape_product(n.shape);
    n.value.assign(out_size, 0.0);
    auto& y = n.value;
    switch (n.op) {
    case Op::leaf:
        break;
    case Op::add:
    case Op::multiply: {
        const auto& a = val(0);
        const auto& b = val(1);
        const std::size_t c = cols_of(n.shape);
        const std::size_t stride = b.size() != a.size() ? 0 : c;
        const std::size_t r = c ? out_size / c : 0;
        for (std::size_t i = 0; i < r; ++i) {
            const double* ai = a.data() + i * c;
            const double* bi = b.data() + i * stride;
            double* yi = y.data() + i * c;
            if (n.op == Op::add)
                for (std::size_t j = 0; j < c; ++j) yi[j] = ai[j] + bi[j];
            else
                for (std::size_t j = 0; j < c; ++j) yi[j] = ai[j] * bi[j];
        }
        break;
    }
    case Op::scale: {
        const auto& a = val(0);
        for (std::size_t i = 0; i < out_size; ++i) y[i] = a[i] * n.dattr[0];
        break;
    }
    case Op::matmul: {
        const auto& a = in(0);
        const auto& b = in(1);
        ConstMap A(val(0).data(), rows_of(a.shape), cols_of(a.shape));
        ConstMap B(val(1).data(), rows_of(b.shape), cols_of(b.shape));
        MutMap Y(y.data(), rows_of(n.shape), cols_of(n.shape));
        Y.noalias() = A * B;
        break;
    }
    case Op::concat: {
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const auto& p = in(k);
            const std::size_t pc = cols_of(p.shape);
            for (std::size_t i = 0; i < r; ++i)
                std::copy_n(val(k).begin() + static_cast<long>(i * pc), pc, y.begin() + static_cast<long>(i * c + off));
            off += pc;
        }
        break;
    }
    case Op::concat_rows: {
        auto out = y.begin();
        for (std::size_t k = 0; k < n.inputs.size(); ++k) out = std::copy(val(k).begin(), val(k).end(), out);
        break;
    }
    case Op::slice_cols: {
        const auto& a = in(0);
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape), ac = cols_of(a.shape);
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(val(0).begin() + static_cast<long>(i * ac + static_cast<std::size_t>(n.iattr[0])), c,
                        y.begin() + static_cast<long>(i * c));
        break;
    }
    case Op::slice_rows: {
        const std::size_t c = cols_of(n.shape);
        std::copy_n(val(0).begin() + static_cast<long>(static_cast<std::size_t>(n.iattr[0]) * c), out_size, y.begin());
        break;
    }
    case Op::sigmoid: {
        const auto& a = val(0);
        for (std::size_t i = 0; i < out_size; ++i) y[i] = sigmoid_fn(a[i]);
        break;
    }
    case Op::tanh: {
        const auto& a = val(0);
        for (std::size_t i = 0; i < out_size; ++i) y[i] = std::tanh(a[i]);
        break;
    }
    case Op::relu: {
        const auto& a = val(0);
        for (std::size_t i = 0; i < out_size; ++i) y[i] = a[i] > 0 ? a[i] : 0.0;
        break;
    }
    case Op::max_over_set: {
        n.saved_index.assign(out_size, 0);
        y = val(0);
        for (std::size_t k = 1; k < n.inputs.size(); ++k) {
            const auto& m = val(k);
            for (std::size_t i = 0; i < out_size; ++i)
                if (m[i] > y[i]) {
                    y[i] = m[i];
                    n.saved_index[i] = k;
                }
        }
        break;
    }
    case Op::embed_lookup: {
        const auto& t = val(0);
        const std::size_t c = cols_of(n.shape);
        for (std::size_t r = 0; r < n.iattr.size(); ++r)
            std::copy_n(t.begin() + static_cast<long>(static_cast<std::size_t>(n.iattr[r]) * c), c,
                        y.begin() + static_cast<long>(r * c));
        break;
    }
    case Op::layer_norm: {
        const auto& x = val(0);
        const auto& g = val(1);
        const auto& b = val(2);
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
        // saved: xhat (r*c) followed by rstd (r)
        n.saved.assign(r * c + r, 0.0);
        for (std::size_t i = 0; i < r; ++i) {
            const double* xi = x.data() + i * c;
            double mean = 0;
            for (std::size_t j = 0; j < c; ++j) mean += xi[j];
            mean /= static_cast<double>(c);
            double var = 0;
            for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
            var /= static_cast<double>(c);
            const double rstd = 1.0 / std::sqrt(var + n.dattr[0]);
            n.saved[r * c + i] = rstd;
            for (std::size_t j = 0; j < c; ++j) {
                const double xh = (xi[j] - mean) * rstd;
                n.saved[i * c + j] = xh;
                y[i * c + j] = xh * g[j] + b[j];
            }
        }
        break;
    }
    case Op::softmax: {
        const auto& a = val(0);
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
        for (std::size_t i = 0; i < r; ++i) {
            const double* ai = a.data() + i * c;
            double* yi = y.data() + i * c;
            const double mx = *std::max_element(ai, ai + c);
            double z = 0;
            for (std::size_t j = 0; j < c; ++j) z += (yi[j] = std::exp(ai[j] - mx));
            for (std::size_t j = 0; j < c; ++j) yi[j] /= z;
        }
        break;
    }
    case Op::attention: {
        const auto& q = val(0);
        const auto& k = val(1);
        const auto& v = val(2);
        const std::size_t tokens = static_cast<std::size_t>(n.iattr[0]);
        const std::size_t heads = static_cast<std::size_t>(n.iattr[1]);
        const std::size_t width = cols_of(n.shape);
        const std::size_t batch = rows_of(n.shape) / tokens;
        const std::size_t hd = width / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
        // saved: attention weights indexed [b][h][i][j]
        n.saved.assign(batch * heads * tokens * tokens, 0.0);
        std::vector<double> s(tokens);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < tokens; ++i) {
                    const double* qi = q.data() + (i * batch + b) * width + h * hd;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j < tokens; ++j) {
                        const double* kj = k.data() + (j * batch + b) * width + h * hd;
                        double dot = 0;
                        for (std::size_t d = 0; d < hd; ++d) dot += qi[d] * kj[d];
                        s[j] = dot * inv_sqrt;
                        mx = std::max(mx, s[j]);
                    }
                    double z = 0;
                    for (std::size_t j = 0; j < tokens; ++j) z += (s[j] = std::exp(s[j] - mx));
                    double* w = n.saved.data() + ((b * heads + h) * tokens + i) * tokens;
                    double* yi = y.data() + (i * batch + b) * width + h * hd;
                    for (std::size_t j = 0; j < tokens; ++j) {
                        w[j] = s[j] / z;
                        const double* vj = v.data() + (j * batch + b) * width + h * hd;
                        for (std::size_t d = 0; d < hd; ++d) yi[d] += w[j] * vj[d];
                    }
                }
        break;
    }
    case Op::cross_entropy: {
        const auto& z = val(0);
        const std::size_t r = rows_of(in(0).shape), c = cols_of(in(0).shape);
        n.saved.assign(r * c, 0.0);  // softmax probabilities
        double total_w = 0, loss = 0;
        for (std::size_t i = 0; i < r; ++i) {
            const double* zi = z.data() + i * c;
            const double mx = *std::max_element(zi, zi + c);
            double s = 0;
            for (std::size_t j = 0; j < c; ++j) s += std::exp(zi[j] - mx);
            const double lse = mx + std::log(s);
            for (std::size_t j = 0; j < c; ++j) n.saved[i * c + j] = std::exp(zi[j] - lse);
            loss += n.dattr[i] * (lse - zi[n.iattr[i]]);
            total_w += n.dattr[i];
        }
        y[0] = loss / total_w;
        break;
    }
    case Op::sum: {
        double s = 0;
        for (auto x : val(0)) s += x;
        y[0] = s;
        break;
    }
    }
}

std::vector<double>& Tape::grad_of(std::size_t id) {
    auto& g = nodes_[id].grad;
    if (g.empty()) g.assign(shape_product(nodes_[id].shape), 0.0);
    return g;
}

void Tape::propagate(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() || n.op == Op::leaf || !n.needs_grad) return;
    const auto& gy = n.grad;
    const auto& y = n.value;
    const std::size_t out_size = y.size();
    switch (n.op) {
    case Op::leaf:
        break;
    case Op::add:
    case Op::multiply: {
        const auto& a = value_of(n.inputs[0]);
        const auto& b = value_of(n.inputs[1]);
        const std::size_t c = cols_of(n.shape);
        const std::size_t stride = b.size() != a.size() ? 0 : c;
        const std::size_t r = c ? out_size / c : 0;
        const bool add = n.op == Op::add;
        // a and b may be the same node; both references then alias one buffer.
        if (nodes_[n.inputs[0]].needs_grad) {
            auto& ga = grad_of(n.inputs[0]);
            for (std::size_t i = 0; i < r; ++i) {
                const double* gi = gy.data() + i * c;
                const double* bi = b.data() + i * stride;
                double* gai = ga.data() + i * c;
                if (add)
                    for (std::size_t j = 0; j < c; ++j) gai[j] += gi[j];
                else
                    for (std::size_t j = 0; j < c; ++j) gai[j] += gi[j] * bi[j];
            }
        }
        if (nodes_[n.inputs[1]].needs_grad) {
            auto& gb = grad_of(n.inputs[1]);
            for (std::size_t i = 0; i < r; ++i) {
                const double* gi = gy.data() + i * c;
                const double* ai = a.data() + i * c;
                double* gbi = gb.data() + i * stride;
                if (add)
                    for (std::size_t j = 0; j < c; ++j) gbi[j] += gi[j];
                else
                    for (std::size_t j = 0; j < c; ++j) gbi[j] += gi[j] * ai[j];
            }
        }
        break;
    }
    case Op::scale: {
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < out_size; ++i) ga[i] += gy[i] * n.dattr[0];
        break;
    }
    case Op::matmul: {
        const std::size_t ia = n.inputs[0], ib = n.inputs[1];
        const auto ashape = nodes_[ia].shape, bshape = nodes_[ib].shape;
        const std::size_t m = rows_of(ashape), k = cols_of(ashape), p = cols_of(bshape);
        ConstMap G(gy.data(), m, p);
        if (nodes_[ia].needs_grad) {
            auto& ga = grad_of(ia);
            ConstMap B(value_of(ib).data(), k, p);
            MutMap GA(ga.data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (nodes_[ib].needs_grad) {
            auto& gb = grad_of(ib);
            ConstMap A(value_of(ia).data(), m, k);
            MutMap GB(gb.data(), k, p);
            GB.noalias() += A.transpose() * G;
        }
        break;
    }
    case Op::concat: {
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
        std::size_t off = 0;
        for (auto pid : n.inputs) {
            auto& gp = grad_of(pid);
            const std::size_t pc = cols_of(nodes_[pid].shape);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += gy[i * c + off + j];
            off += pc;
        }
        break;
    }
    case Op::concat_rows: {
        std::size_t off = 0;
        for (auto pid : n.inputs) {
            auto& gp = grad_of(pid);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gy[off + i];
            off += gp.size();
        }
        break;
    }
    case Op::slice_cols: {
        auto& ga = grad_of(n.inputs[0]);
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
        const std::size_t ac = cols_of(nodes_[n.inputs[0]].shape);
        const auto b0 = static_cast<std::size_t>(n.iattr[0]);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * ac + b0 + j] += gy[i * c + j];
        break;
    }
    case Op::slice_rows: {
        auto& ga = grad_of(n.inputs[0]);
        const std::size_t off = static_cast<std::size_t>(n.iattr[0]) * cols_of(n.shape);
        for (std::size_t i = 0; i < out_size; ++i) ga[off + i] += gy[i];
        break;
    }
    case Op::sigmoid: {
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < out_size; ++i) ga[i] += gy[i] * y[i] * (1.0 - y[i]);
        break;
    }
    case Op::tanh: {
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < out_size; ++i) ga[i] += gy[i] * (1.0 - y[i] * y[i]);
        break;
    }
    case Op::relu: {
        auto& ga = grad_of(n.inputs[0]);
        const auto& a = value_of(n.inputs[0]);
        for (std::size_t i = 0; i < out_size; ++i)
            if (a[i] > 0) ga[i] += gy[i];
        break;
    }
    case Op::max_over_set: {
        for (std::size_t i = 0; i < out_size; ++i) grad_of(n.inputs[n.saved_index[i]])[i] += gy[i];
        break;
    }
    case Op::embed_lookup: {
        auto& gt = grad_of(n.inputs[0]);
        const std::size_t c = cols_of(n.shape);
        for (std::size_t r = 0; r < n.iattr.size(); ++r) {
            const std::size_t base = static_cast<std::size_t>(n.iattr[r]) * c;
            for (std::size_t j = 0; j < c; ++j) gt[base + j] += gy[r * c + j];
        }
        break;
    }
    case Op::layer_norm: {
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
        const auto& g = value_of(n.inputs[1]);
        {
            auto& gg = grad_of(n.inputs[1]);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg[j] += gy[i * c + j] * n.saved[i * c + j];
        }
        {
            auto& gb = grad_of(n.inputs[2]);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += gy[i * c + j];
        }
        auto& gx = grad_of(n.inputs[0]);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
            const double rstd = n.saved[r * c + i];
            double mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = gy[i * c + j] * g[j];
                mean_d += d;
                mean_dx += d * n.saved[i * c + j];
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = gy[i * c + j] * g[j];
                gx[i * c + j] += rstd * (d - mean_d - n.saved[i * c + j] * mean_dx);
            }
        }
        break;
    }
    case Op::softmax: {
        auto& ga = grad_of(n.inputs[0]);
        const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += gy[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (gy[i * c + j] - dot);
        }
        break;
    }
    case Op::attention: {
        const std::size_t tokens = static_cast<std::size_t>(n.iattr[0]);
        const std::size_t heads = static_cast<std::size_t>(n.iattr[1]);
        const std::size_t width = cols_of(n.shape);
        const std::size_t batch = rows_of(n.shape) / tokens;
        const std::size_t hd = width / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
        grad_of(n.inputs[0]);
        grad_of(n.inputs[1]);
        grad_of(n.inputs[2]);
        auto& gq = nodes_[n.inputs[0]].grad;
        auto& gk = nodes_[n.inputs[1]].grad;
        auto& gv = nodes_[n.inputs[2]].grad;
        const auto& q = value_of(n.inputs[0]);
        const auto& k = value_of(n.inputs[1]);
        const auto& v = value_of(n.inputs[2]);
        std::vector<double> da(tokens);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < tokens; ++i) {
                    const double* w = n.saved.data() + ((b * heads + h) * tokens + i) * tokens;
                    const double* gyi = gy.data() + (i * batch + b) * width + h * hd;
                    double wsum = 0;
                    for (std::size_t j = 0; j < tokens; ++j) {
                        const std::size_t rj = (j * batch + b) * width + h * hd;
                        double dot = 0;
                        for (std::size_t d = 0; d < hd; ++d) {
                            dot += gyi[d] * v[rj + d];
                            gv[rj + d] += w[j] * gyi[d];
                        }
                        da[j] = dot;
                        wsum += w[j] * dot;
                    }
                    const std::size_t ri = (i * batch + b) * width + h * hd;
                    for (std::size_t j = 0; j < tokens; ++j) {
                        const double ds = w[j] * (da[j] - wsum) * inv_sqrt;
                        const std::size_t rj = (j * batch + b) * width + h * hd;
                        for (std::size_t d = 0; d < hd; ++d) {
                            gq[ri + d] += ds * k[rj + d];
                            gk[rj + d] += ds * q[ri + d];
                        }
                    }
                }
        break;
    }
    case Op::cross_entropy: {
        auto& gz = grad_of(n.inputs[0]);
        const std::size_t c = cols_of(nodes_[n.inputs[0]].shape);
        double total_w = 0;
        for (auto w : n.dattr) total_w += w;
        for (std::size_t i = 0; i < n.iattr.size(); ++i) {
            const double f = gy[0] * n.dattr[i] / total_w;
            if (f == 0) continue;
            for (std::size_t j = 0; j < c; ++j) {
                const double target = static_cast<long>(j) == n.iattr[i] ? 1.0 : 0.0;
                gz[i * c + j] += f * (n.saved[i * c + j] - target);
            }
        }
        break;
    }
    case Op::sum: {
        auto& ga = grad_of(n.inputs[0]);
        for (auto& g : ga) g += gy[0];
        break;
    }
    }
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (shape_product(nodes_[loss.id].shape) != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    shape_string(nodes_[loss.id].shape));
    for (auto& n : nodes_) n.grad.clear();
    grad_of(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) propagate(id);
    for (auto& n : nodes_) {
        if (!n.bound) continue;
        auto& t = *n.bound;
        if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0);
        if (n.grad.empty()) continue;
        for (std::size_t i = 0; i < n.grad.size(); ++i) t.grad[i] += n.grad[i];
    }
}

bool Tape::replay() const {
    for (const auto& n : nodes_) {
        if (n.op == Op::leaf) continue;
        Node copy;
        copy.op = n.op;
        copy.inputs = n.inputs;
        copy.shape = n.shape;
        copy.iattr = n.iattr;
        copy.dattr = n.dattr;
        forward(copy);
        if (copy.value != n.value) return false;
    }
    return true;
}

Var apply_primitive(Op op, std::span<const Var> inputs) {
    if (inputs.empty()) throw std::invalid_argument(std::string(op_name(op)) + ": no inputs");
    return inputs[0].tape->record(op, inputs);
}

Var add(Var a, Var b) {
    Var in[] = {a, b};
    return a.tape->record(Op::add, in);
}

Var multiply(Var a, Var b) {
    Var in[] = {a, b};
    return a.tape->record(Op::multiply, in);
}

Var scale(Var a, double s) {
    Var in[] = {a};
    return a.tape->record(Op::scale, in, {}, {s});
}

Var matmul(Var a, Var b) {
    Var in[] = {a, b};
    return a.tape->record(Op::matmul, in);
}

Var concat(std::span<const Var> parts) { return apply_primitive(Op::concat, parts); }

Var concat_rows(std::span<const Var> parts) { return apply_primitive(Op::concat_rows, parts); }

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    Var in[] = {a};
    return a.tape->record(Op::slice_cols, in, {static_cast<long>(begin), static_cast<long>(end)});
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Var in[] = {a};
    return a.tape->record(Op::slice_rows, in, {static_cast<long>(begin), static_cast<long>(end)});
}

Var sigmoid(Var a) {
    Var in[] = {a};
    return a.tape->record(Op::sigmoid, in);
}

Var tanh(Var a) {
    Var in[] = {a};
    return a.tape->record(Op::tanh, in);
}

Var relu(Var a) {
    Var in[] = {a};
    return a.tape->record(Op::relu, in);
}

Var max_over_set(std::span<const Var> members) { return apply_primitive(Op::max_over_set, members); }

Var embed_lookup(Var table, std::span<const std::size_t> indices) {
    Var in[] = {table};
    std::vector<long> idx(indices.begin(), indices.end());
    return table.tape->record(Op::embed_lookup, in, std::move(idx));
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Var in[] = {x, gain, bias};
    return x.tape->record(Op::layer_norm, in, {}, {eps});
}

Var softmax(Var a) {
    Var in[] = {a};
    return a.tape->record(Op::softmax, in);
}

Var attention(Var q, Var k, Var v, std::size_t tokens, std::size_t heads) {
    Var in[] = {q, k, v};
    return q.tape->record(Op::attention, in, {static_cast<long>(tokens), static_cast<long>(heads)});
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> weights) {
    Var in[] = {logits};
    std::vector<long> t(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    if (w.empty()) w.assign(t.size(), 1.0);
    return logits.tape->record(Op::cross_entropy, in, std::move(t), std::move(w));
}

Var cross_entropy_loss(Var logits, std::size_t target) {
    if (logits.rows() != 1) throw std::invalid_argument("cross_entropy_loss: expects a single row of logits");
    const std::size_t t[] = {target};
    return cross_entropy(logits, t);
}

Var sum(Var a) {
    Var in[] = {a};
    return a.tape->record(Op::sum, in);
}

Var linear(Var x, Var w, Var b) { return add(matmul(x, w), b); }

}  // namespace gudrl::ad
