#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gudrl/tensor.hpp"

namespace gudrl {

struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Global-norm gradient clipping applied before the update; <= 0 disables.
    double clip_norm = 10.0;
};

// Scales all gradients so their joint L2 norm is at most max_norm and
// returns the norm measured before scaling.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

// One bias-corrected Adam update. Every parameter must carry a gradient;
// gradients are zeroed afterwards. Moment buffers are created on first use.
void adam_step(std::span<Tensor* const> params, AdamState& state,
               std::span<const std::string> names = {});

}  // namespace gudrl
