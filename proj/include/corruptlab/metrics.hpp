// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "corruptlab/error.hpp"

namespace corruptlab {

struct ConfusionCounts {
    std::vector<std::size_t> tp, fp, fn, support;

    std::size_t total() const {
        std::size_t n = 0;
        for (auto s : support) n += s;
        return n;
    }
};

inline ConfusionCounts confusion_counts(std::span<const std::int32_t> preds, std::span<const std::int32_t> labels,
                                        std::size_t num_classes) {
    if (preds.size() != labels.size()) throw ValidationError("predictions and labels differ in length");
    if (preds.empty()) throw ValidationError("cannot score an empty prediction set");
    ConfusionCounts c{std::vector<std::size_t>(num_classes), std::vector<std::size_t>(num_classes),
                      std::vector<std::size_t>(num_classes), std::vector<std::size_t>(num_classes)};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        auto p = preds[i], y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes || p < 0 || static_cast<std::size_t>(p) >= num_classes) {
            throw ValidationError("class id out of range at index " + std::to_string(i));
        }
        ++c.support[static_cast<std::size_t>(y)];
        if (p == y) {
            ++c.tp[static_cast<std::size_t>(y)];
        } else {
            ++c.fp[static_cast<std::size_t>(p)];
            ++c.fn[static_cast<std::size_t>(y)];
        }
    }
    return c;
}

/// Support-weighted mean of per-class F1 = 2PR/(P+R), with 0/0 taken as 0.
inline double weighted_f1(std::span<const std::int32_t> preds, std::span<const std::int32_t> labels, std::size_t num_classes) {
    auto c = confusion_counts(preds, labels, num_classes);
    double total = 0.0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        if (c.support[k] == 0) continue;
        const double tp = static_cast<double>(c.tp[k]);
        // 2PR/(P+R) == 2tp / (2tp + fp + fn)
        const double denom = 2.0 * tp + static_cast<double>(c.fp[k] + c.fn[k]);
        const double f1 = denom == 0.0 ? 0.0 : 2.0 * tp / denom;
        total += f1 * static_cast<double>(c.support[k]);
    }
    return total / static_cast<double>(preds.size());
}

/// Most frequent label; ties go to the smaller class id.
inline std::int32_t majority_class(std::span<const std::int32_t> labels, std::size_t num_classes) {
    if (labels.empty()) throw ValidationError("majority of an empty label set");
    std::vector<std::size_t> counts(num_classes);
    for (auto y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ValidationError("label out of range");
        ++counts[static_cast<std::size_t>(y)];
    }
    return static_cast<std::int32_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

/// Weighted F1 of the constant majority-class predictor.
inline double majority_baseline(std::span<const std::int32_t> labels, std::size_t num_classes) {
    std::vector<std::int32_t> preds(labels.size(), majority_class(labels, num_classes));
    return weighted_f1(preds, labels, num_classes);
}

struct OutlierVerdict {
    bool flagged = false;
    std::string reason;
};

/// A run is an outlier when it aborted on a non-finite value or when its
/// best F1 does not clear 1.05× the majority-class baseline.
inline OutlierVerdict flag_outlier(double best_f1, bool aborted, double baseline, const std::string& abort_reason = {}) {
    if (aborted) return {true, "aborted: " + (abort_reason.empty() ? std::string("non-finite value") : abort_reason)};
    const double threshold = 1.05 * baseline;
    if (!(best_f1 > threshold)) {
        return {true, "best F1 " + std::to_string(best_f1) + " <= 1.05 x majority baseline " + std::to_string(baseline)};
    }
    return {};
}

}  // namespace corruptlab
