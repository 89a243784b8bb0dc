#include "gudrl/adam.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace gudrl {

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
    double sq = 0;
    for (auto* p : params)
        for (auto g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto* p : params)
            for (auto& g : p->grad) g *= f;
    }
    return norm;
}

void adam_step(std::span<Tensor* const> params, AdamState& state, std::span<const std::string> names) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->grad.size() != params[i]->values.size()) {
            std::string label = i < names.size() ? names[i] : "#" + std::to_string(i);
            throw std::invalid_argument("adam_step: parameter " + label + " has no gradient");
        }
    }
    if (state.m.empty()) {
        for (auto* p : params) {
            state.m.emplace_back(p->values.size(), 0.0);
            state.v.emplace_back(p->values.size(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: optimiser state tracks " + std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    clip_grad_norm(params, state.clip_norm);

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.values.size())
            throw std::invalid_argument("adam_step: moment shape mismatch for parameter #" + std::to_string(i));
        for (std::size_t j = 0; j < p.values.size(); ++j) {
            const double g = p.grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p.values[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        std::fill(p.grad.begin(), p.grad.end(), 0.0);
    }
}

}  // namespace gudrl
