// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "corruptlab/grad_check.hpp"

namespace corruptlab {

/// Bias-corrected Adam moments for an ordered parameter list.
template <typename T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
};

/// One Adam update using the gradients accumulated on `params`. Tensors with
/// no gradient are treated as having a zero gradient. Throws NonFiniteError
/// before touching anything if any gradient is NaN or infinite.
template <typename T>
void adam_step(std::span<NamedTensor<T>* const> params, AdamState<T>& state, double lr) {
    if (state.m.empty()) {
        for (auto* p : params) {
            state.m.emplace_back(p->tensor.numel(), T{0});
            state.v.emplace_back(p->tensor.numel(), T{0});
        }
    }
    if (state.m.size() != params.size()) throw ValidationError("Adam state does not match parameter list");
    for (auto* p : params) {
        if (!p->tensor.has_grad()) continue;
        for (T g : p->tensor.grad()) {
            if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in " + p->name);
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.tensor.numel()) throw ValidationError("Adam moment shape mismatch for " + p.name);
        auto theta = p.tensor.data();
        const bool has = p.tensor.has_grad();
        std::span<const T> g = has ? std::span<const T>(p.tensor.grad()) : std::span<const T>{};
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const T gj = has ? g[j] : T{0};
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            const double m_hat = static_cast<double>(m[j]) / c1;
            const double v_hat = static_cast<double>(v[j]) / c2;
            theta[j] = static_cast<T>(static_cast<double>(theta[j]) - lr * m_hat / (std::sqrt(v_hat) + state.eps));
        }
    }
}

template <typename T>
void adam_step(std::vector<NamedTensor<T>*>& params, AdamState<T>& state, double lr) {
    adam_step(std::span<NamedTensor<T>* const>(params), state, lr);
}

}  // namespace corruptlab
