// SPDX-License-Identifier: Apache-2.0
//
// Feature extraction, exact t-SNE and silhouette scoring.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "corruptlab/checkpoint.hpp"
#include "corruptlab/data.hpp"
#include "corruptlab/rng.hpp"
#include "corruptlab/training.hpp"

namespace corruptlab {

struct FeatureMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;  // row-major
    std::vector<std::int32_t> labels;

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Pooled hidden states (dropout off), one row per example in dataset order.
inline FeatureMatrix extract_features(const EncoderModel<float>& model, const Vocabulary& vocab, const LabeledDataset& ds, Pooling pooling,
                                      PoolOptions opts = {}, std::size_t max_len = 128) {
    if (ds.examples.empty()) throw ValidationError("cannot extract features from an empty dataset");
    auto seqs = encode_dataset(ds, vocab, std::min(max_len, model.config().max_len));
    auto f = pooled_features(model, seqs, pooling, opts);
    return {ds.size(), model.config().hidden, std::vector<double>(f.begin(), f.end()), ds.labels()};
}

inline FeatureMatrix extract_features(const Checkpoint& ck, const LabeledDataset& ds, Pooling pooling, PoolOptions opts = {},
                                      std::size_t max_len = 128) {
    return extract_features(ck.model, ck.vocab, ds, pooling, opts, max_len);
}

struct TsneOptions {
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    std::uint64_t seed = 0;
    double learning_rate = 200.0;
    double exaggeration = 12.0;
    std::size_t exaggeration_iters = 250;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    double perplexity_tolerance = 1e-4;
};

struct Projection {
    std::vector<double> points;  // N×2 row-major
    std::vector<std::int32_t> labels;
    double initial_kl = 0.0;
    double final_kl = 0.0;
    std::uint64_t seed = 0;
    double perplexity = 0.0;
    std::size_t iterations = 0;
    double max_perplexity_error = 0.0;  // worst |achieved - target| over rows

    std::size_t size() const { return labels.size(); }
};

namespace detail {

inline std::vector<double> squared_distances(const std::vector<double>& x, std::size_t n, std::size_t d) {
    std::vector<double> out(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = x[i * d + k] - x[j * d + k];
                s += diff * diff;
            }
            out[i * n + j] = out[j * n + i] = s;
        }
    return out;
}

/// Conditional affinities of row i at precision beta; returns the perplexity.
inline double row_affinities(const std::vector<double>& d2, std::size_t n, std::size_t i, double beta, std::vector<double>& p) {
    double min_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
        if (j != i) min_d = std::min(min_d, d2[i * n + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        p[j] = j == i ? 0.0 : std::exp(-beta * (d2[i * n + j] - min_d));
        sum += p[j];
    }
    double entropy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        p[j] /= sum;
        if (p[j] > 0.0) entropy -= p[j] * std::log(p[j]);
    }
    return std::exp(entropy);
}

inline double kl_divergence(const std::vector<double>& P, const std::vector<double>& Q) {
    double kl = 0.0;
    for (std::size_t k = 0; k < P.size(); ++k)
        if (P[k] > 0.0) kl += P[k] * std::log(P[k] / std::max(Q[k], 1e-300));
    return kl;
}

/// Student-t joint affinities of the embedding; `num` receives 1/(1+d²).
inline std::vector<double> low_dim_affinities(const std::vector<double>& y, std::size_t n, std::vector<double>& num) {
    num.assign(n * n, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
            const double v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = num[j * n + i] = v;
            sum += 2.0 * v;
        }
    std::vector<double> q(n * n);
    for (std::size_t k = 0; k < q.size(); ++k) q[k] = std::max(num[k] / sum, 1e-12);
    for (std::size_t i = 0; i < n; ++i) q[i * n + i] = 0.0;
    return q;
}

}  // namespace detail

/// Exact O(N²) t-SNE into two dimensions.
inline Projection tsne(const FeatureMatrix& x, const TsneOptions& opt = {}) {
    const std::size_t n = x.rows;
    if (n > 5000) throw ValidationError("exact t-SNE supports at most 5000 points, got " + std::to_string(n));
    if (!(3.0 * opt.perplexity < static_cast<double>(n))) {
        throw ValidationError("t-SNE needs more than 3 x perplexity points (" + std::to_string(n) + " <= " +
                              std::to_string(3.0 * opt.perplexity) + ")");
    }
    if (x.values.size() != n * x.cols) throw ShapeError("feature matrix size disagrees with its shape");
    for (std::size_t k = 0; k < x.values.size(); ++k)
        if (!std::isfinite(x.values[k])) throw NonFiniteError("non-finite feature at row " + std::to_string(k / x.cols));

    const auto d2 = detail::squared_distances(x.values, n, x.cols);
    Projection proj;
    proj.labels = x.labels;
    proj.seed = opt.seed;
    proj.perplexity = opt.perplexity;
    proj.iterations = opt.iterations;

    // Per-row precision by bisection on the perplexity.
    std::vector<double> P(n * n, 0.0), row(n);
    for (std::size_t i = 0; i < n; ++i) {
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double perp = detail::row_affinities(d2, n, i, beta, row);
        for (int it = 0; it < 200 && std::abs(perp - opt.perplexity) > opt.perplexity_tolerance; ++it) {
            if (perp > opt.perplexity) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            perp = detail::row_affinities(d2, n, i, beta, row);
        }
        proj.max_perplexity_error = std::max(proj.max_perplexity_error, std::abs(perp - opt.perplexity));
        std::copy(row.begin(), row.end(), P.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = std::max((P[i * n + j] + P[j * n + i]) / (2.0 * static_cast<double>(n)), 1e-12);
            P[i * n + j] = P[j * n + i] = v;
        }

    Rng rng(derive_seed(opt.seed, "tsne_init"));
    std::normal_distribution<double> init(0.0, 1e-4);
    std::vector<double> y(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n), num;
    for (auto& v : y) v = init(rng);
    proj.initial_kl = detail::kl_divergence(P, detail::low_dim_affinities(y, n, num));

    for (std::size_t it = 0; it < opt.iterations; ++it) {
        const double exag = it < opt.exaggeration_iters ? opt.exaggeration : 1.0;
        const double momentum = it < opt.exaggeration_iters ? opt.initial_momentum : opt.final_momentum;
        const auto Q = detail::low_dim_affinities(y, n, num);
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double m = (exag * P[i * n + j] - Q[i * n + j]) * num[i * n + j];
                grad[2 * i] += 4.0 * m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += 4.0 * m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        for (std::size_t k = 0; k < y.size(); ++k) {
            gains[k] = (grad[k] > 0.0) != (update[k] > 0.0) ? gains[k] + 0.2 : gains[k] * 0.8;
            gains[k] = std::max(gains[k], 0.01);
            update[k] = momentum * update[k] - opt.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < n; ++i) mx += y[2 * i], my += y[2 * i + 1];
        mx /= static_cast<double>(n), my /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) y[2 * i] -= mx, y[2 * i + 1] -= my;
    }
    proj.final_kl = detail::kl_divergence(P, detail::low_dim_affinities(y, n, num));
    for (double v : y)
        if (!std::isfinite(v)) throw NonFiniteError("t-SNE diverged to non-finite coordinates");
    proj.points = std::move(y);
    return proj;
}

/// Mean silhouette (b - a) / max(a, b) over all points, Euclidean distance.
inline double silhouette(std::span<const double> points, std::size_t dims, std::span<const std::int32_t> labels) {
    const std::size_t n = labels.size();
    if (points.size() != n * dims) throw ShapeError("silhouette: point matrix does not match label count");
    std::map<std::int32_t, std::size_t> sizes;
    for (auto l : labels) ++sizes[l];
    if (sizes.size() < 2) throw ValidationError("silhouette needs at least two classes");
    for (auto [label, count] : sizes)
        if (count < 2) throw ValidationError("silhouette: class " + std::to_string(label) + " has fewer than two points");

    std::vector<std::int32_t> ids;
    for (auto [label, count] : sizes) ids.push_back(label);
    double total = 0.0;
    std::map<std::int32_t, double> sum;
    for (std::size_t i = 0; i < n; ++i) {
        for (auto l : ids) sum[l] = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double s = 0.0;
            for (std::size_t k = 0; k < dims; ++k) {
                const double d = points[i * dims + k] - points[j * dims + k];
                s += d * d;
            }
            sum[labels[j]] += std::sqrt(s);
        }
        const double a = sum[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (auto l : ids)
            if (l != labels[i]) b = std::min(b, sum[l] / static_cast<double>(sizes[l]));
        const double m = std::max(a, b);
        total += m == 0.0 ? 0.0 : (b - a) / m;
    }
    return total / static_cast<double>(n);
}

inline double silhouette(const Projection& p) { return silhouette(p.points, 2, p.labels); }

inline std::string projection_csv(const Projection& p, const std::vector<std::string>& label_names = {}) {
    std::ostringstream os;
    os.precision(17);
    os << "x,y,label\n";
    for (std::size_t i = 0; i < p.size(); ++i) {
        os << p.points[2 * i] << ',' << p.points[2 * i + 1] << ',';
        const auto l = static_cast<std::size_t>(p.labels[i]);
        if (l < label_names.size()) os << label_names[l]; else os << p.labels[i];
        os << '\n';
    }
    return os.str();
}

/// Panels laid out two per row, one glyph color per class.
inline std::string projection_svg(const std::vector<std::pair<std::string, Projection>>& panels, const std::vector<std::string>& label_names = {}) {
    static constexpr const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                              "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    constexpr double cell = 320.0, pad = 24.0;
    const std::size_t cols = std::min<std::size_t>(2, std::max<std::size_t>(1, panels.size()));
    const std::size_t rows = (panels.size() + cols - 1) / cols;
    std::set<std::int32_t> classes;
    for (const auto& [title, p] : panels) classes.insert(p.labels.begin(), p.labels.end());
    const double legend = 22.0;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cols * cell << "\" height=\"" << rows * cell + legend
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    for (std::size_t k = 0; k < panels.size(); ++k) {
        const auto& [title, p] = panels[k];
        const double ox = static_cast<double>(k % cols) * cell, oy = static_cast<double>(k / cols) * cell;
        double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
        for (std::size_t i = 0; i < p.size(); ++i) {
            xmin = std::min(xmin, p.points[2 * i]), xmax = std::max(xmax, p.points[2 * i]);
            ymin = std::min(ymin, p.points[2 * i + 1]), ymax = std::max(ymax, p.points[2 * i + 1]);
        }
        const double sx = (cell - 2 * pad) / std::max(xmax - xmin, 1e-12), sy = (cell - 2 * pad) / std::max(ymax - ymin, 1e-12);
        os << "<g>\n<rect x=\"" << ox + 2 << "\" y=\"" << oy + 2 << "\" width=\"" << cell - 4 << "\" height=\"" << cell - 4
           << "\" fill=\"none\" stroke=\"#999\"/>\n<text x=\"" << ox + pad << "\" y=\"" << oy + 16 << "\">" << title << "</text>\n";
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double cx = ox + pad + (p.points[2 * i] - xmin) * sx;
            const double cy = oy + pad + (ymax - p.points[2 * i + 1]) * sy;
            os << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"2.5\" fill=\"" << palette[static_cast<std::size_t>(p.labels[i]) % 10]
               << "\"/>\n";
        }
        os << "</g>\n";
    }
    double lx = pad;
    for (auto c : classes) {
        const auto idx = static_cast<std::size_t>(c);
        const std::string name = idx < label_names.size() ? label_names[idx] : std::to_string(c);
        os << "<circle cx=\"" << lx << "\" cy=\"" << rows * cell + 11 << "\" r=\"4\" fill=\"" << palette[idx % 10] << "\"/><text x=\""
           << lx + 8 << "\" y=\"" << rows * cell + 15 << "\">" << name << "</text>\n";
        lx += 20.0 + 7.0 * static_cast<double>(name.size());
    }
    os << "</svg>\n";
    return os.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace corruptlab
