// Adam optimizer with bias correction, plus the staged learning-rate decay
// schedule used by the training loop.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dualsynth/common.hpp"
#include "dualsynth/nn.hpp"
#include "dualsynth/tensor.hpp"

namespace dualsynth {

// Per-parameter first/second moment estimates. Moment shapes mirror the
// parameter set they were created for.
template <typename Real>
struct AdamState {
    std::vector<Tensor<Real>> m;
    std::vector<Tensor<Real>> v;
    int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename Real>
AdamState<Real> make_adam_state(const ParamSet<Real>& params) {
    AdamState<Real> s;
    s.m.reserve(params.values.size());
    s.v.reserve(params.values.size());
    for (const auto& p : params.values) {
        s.m.push_back(Tensor<Real>::zeros(p.shape));
        s.v.push_back(Tensor<Real>::zeros(p.shape));
    }
    return s;
}

// One bias-corrected Adam update applied in place to the master values:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,  t <- t+1
//   theta <- theta - lr * (m / (1-b1^t)) / sqrt(v / (1-b2^t) + eps)
// A non-finite gradient aborts before any parameter is touched, naming the
// offending tensor.
template <typename Real>
void adam_step(ParamSet<Real>& params, const std::vector<Tensor<Real>>& grads,
               AdamState<Real>& state, double lr) {
    if (grads.size() != params.values.size())
        throw ShapeError("adam_step: got " + std::to_string(grads.size()) +
                         " gradients for " + std::to_string(params.values.size()) +
                         " parameters");
    if (state.m.size() != params.values.size() || state.v.size() != params.values.size())
        throw ShapeError("adam_step: optimizer state does not match the parameter set");
    if (!(lr > 0.0) || !std::isfinite(lr))
        throw ConfigError("adam_step: learning rate must be positive and finite");
    for (size_t i = 0; i < grads.size(); i++) {
        if (grads[i].shape != params.values[i].shape)
            throw ShapeError("adam_step: gradient shape " + shape_str(grads[i].shape) +
                             " does not match parameter '" + params.names[i] + "' " +
                             shape_str(params.values[i].shape));
        for (int64_t k = 0; k < grads[i].numel(); k++)
            if (!std::isfinite(static_cast<double>(grads[i][k])))
                throw NonFiniteError("adam_step: gradient for parameter '" + params.names[i] +
                                     "' contains a non-finite value");
    }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < grads.size(); i++) {
        Tensor<Real>& theta = params.values[i];
        Tensor<Real>& m = state.m[i];
        Tensor<Real>& v = state.v[i];
        for (int64_t k = 0; k < theta.numel(); k++) {
            const double g = static_cast<double>(grads[i][k]);
            const double mk = state.beta1 * static_cast<double>(m[k]) + (1.0 - state.beta1) * g;
            const double vk =
                state.beta2 * static_cast<double>(v[k]) + (1.0 - state.beta2) * g * g;
            m[k] = static_cast<Real>(mk);
            v[k] = static_cast<Real>(vk);
            const double update = lr * (mk / bc1) / std::sqrt(vk / bc2 + state.eps);
            theta[k] = static_cast<Real>(static_cast<double>(theta[k]) - update);
        }
    }
}

// base * factor^floor(epoch / period), evaluated by repeated multiplication
// so the sequence is exactly reproducible.
inline double scheduled_lr(double base, int epoch, double factor, int period = 2) {
    if (epoch < 0) throw ConfigError("scheduled_lr: epoch must be >= 0");
    if (period < 1) throw ConfigError("scheduled_lr: period must be >= 1");
    if (!(base > 0.0) || !(factor > 0.0))
        throw ConfigError("scheduled_lr: base and factor must be positive");
    double lr = base;
    for (int k = 0; k < epoch / period; k++) lr *= factor;
    return lr;
}

}  // namespace dualsynth
