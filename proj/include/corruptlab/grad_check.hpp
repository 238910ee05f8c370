// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "corruptlab/tensor.hpp"

namespace corruptlab {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

enum class Stencil {
    Central2,  // (f(x+h) - f(x-h)) / 2h
    Central4,  // fourth-order five-point central difference
};

struct GradCheckOptions {
    double step = 1e-3;
    double tolerance = 1e-5;
    Stencil stencil = Stencil::Central4;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;  // at worst_index
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    bool passed = true;
    std::string failure;  // first offending location, empty when passed

    double max_rel_error() const {
        double m = 0.0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_error);
        return m;
    }
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares reverse-mode gradients of the scalar produced by `build` against
/// central finite differences, element by element, for every tensor in
/// `params`. `build` must be deterministic and must read the tensors in
/// `params` (it is re-run after each perturbation).
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& build,
                                  std::vector<NamedTensor<double>>& params,
                                  const GradCheckOptions& opts = {}) {
    GradCheckReport report;
    report.tolerance = opts.tolerance;

    for (auto& p : params) p.tensor.zero_grad();
    Tensor<double> loss = build();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        auto g = p.tensor.grad();
        analytic.emplace_back(g.begin(), g.end());
    }
    // a non-finite analytic entry poisons every perturbed loss, so name it first
    for (std::size_t pi = 0; pi < params.size() && report.failure.empty(); ++pi)
        for (std::size_t i = 0; i < analytic[pi].size(); ++i)
            if (!std::isfinite(analytic[pi][i])) {
                report.passed = false;
                report.failure = "non-finite gradient at " + params[pi].name + "[" + std::to_string(i) + "]";
                break;
            }

    const double h = opts.step;
    auto eval_at = [&](double& slot, double base, double offset) {
        slot = base + offset;
        return build().item();
    };

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        GradCheckEntry entry{.name = p.name};
        auto values = p.tensor.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double base = values[i];
            double numeric = 0.0;
            if (opts.stencil == Stencil::Central2) {
                double fp = eval_at(values[i], base, h);
                double fm = eval_at(values[i], base, -h);
                numeric = (fp - fm) / (2.0 * h);
            } else {
                double fp1 = eval_at(values[i], base, h);
                double fm1 = eval_at(values[i], base, -h);
                double fp2 = eval_at(values[i], base, 2.0 * h);
                double fm2 = eval_at(values[i], base, -2.0 * h);
                numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h);
            }
            values[i] = base;
            const double a = analytic[pi][i];
            if (!std::isfinite(a) || !std::isfinite(numeric)) {
                report.passed = false;
                if (report.failure.empty()) {
                    report.failure = "non-finite gradient at " + p.name + "[" + std::to_string(i) + "]";
                }
                entry.max_rel_error = std::numeric_limits<double>::infinity();
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
                continue;
            }
            double err = relative_error(a, numeric);
            if (err > entry.max_rel_error) {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        if (entry.max_rel_error > opts.tolerance) {
            report.passed = false;
            if (report.failure.empty()) {
                report.failure = p.name + "[" + std::to_string(entry.worst_index) + "] rel err " +
                                 std::to_string(entry.max_rel_error) + " (analytic " + std::to_string(entry.analytic) +
                                 ", numeric " + std::to_string(entry.numeric) + ")";
            }
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace corruptlab
