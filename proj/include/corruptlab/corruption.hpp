// SPDX-License-Identifier: Apache-2.0
//
// Layer-range corruption by reinitialization.
//
// Within the selected encoder layers every LayerNorm scale is set to exactly
// 1.0, every bias (LayerNorm shift included) to exactly 0.0, and every other
// weight matrix is redrawn Kaiming-uniform on (-b, b) with
// b = gain * sqrt(3 / fan_in). Everything outside the selection is left
// bit-identical.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "corruptlab/model.hpp"
#include "corruptlab/rng.hpp"

namespace corruptlab {

enum class ParamKind { LayerNormWeight, LayerNormBias, Weight, Bias };

inline std::string to_string(ParamKind k) {
    switch (k) {
        case ParamKind::LayerNormWeight: return "layernorm_weight";
        case ParamKind::LayerNormBias: return "layernorm_bias";
        case ParamKind::Weight: return "weight";
        case ParamKind::Bias: return "bias";
    }
    return "?";
}

enum class Direction { Bottom, Top, Full, None };

inline std::string to_string(Direction d) {
    switch (d) {
        case Direction::Bottom: return "bottom";
        case Direction::Top: return "top";
        case Direction::Full: return "full";
        case Direction::None: return "none";
    }
    return "?";
}

inline Direction parse_direction(std::string_view s) {
    if (s == "bottom") return Direction::Bottom;
    if (s == "top") return Direction::Top;
    if (s == "full") return Direction::Full;
    if (s == "none") return Direction::None;
    throw ValidationError("unknown direction '" + std::string(s) + "' (bottom|top|full|none)");
}

namespace detail {

inline std::vector<std::string_view> split_dots(std::string_view s) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        auto dot = s.find('.', start);
        parts.push_back(s.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    return parts;
}

inline bool is_positive_integer(std::string_view s) {
    return !s.empty() && s.size() < 10 && s.front() != '0' &&
           std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace detail

/// Encoder layer (1-based) a parameter belongs to; 0 for embeddings/heads.
inline std::size_t parameter_layer(std::string_view name) {
    auto parts = detail::split_dots(name);
    if (parts.size() == 4 && parts[0] == "layer" && detail::is_positive_integer(parts[1])) {
        return std::stoul(std::string(parts[1]));
    }
    return 0;
}

/// Kind of a census parameter name. Unknown names are an error.
inline ParamKind classify_parameter(std::string_view name) {
    static const std::set<std::string_view> layer_modules{"attn_q", "attn_k", "attn_v", "attn_out", "ffn1", "ffn2", "ln1", "ln2"};
    static const std::set<std::string_view> embedding_tables{"token", "position", "segment"};
    auto parts = detail::split_dots(name);
    const std::string_view leaf = parts.back();
    if (leaf != "weight" && leaf != "bias") throw ValidationError("unknown parameter name '" + std::string(name) + "'");
    const bool weight = leaf == "weight";

    std::string_view module;
    if (parts.size() == 4 && parts[0] == "layer" && detail::is_positive_integer(parts[1]) && layer_modules.count(parts[2])) {
        module = parts[2];
    } else if (parts.size() == 3 && parts[0] == "embeddings" && (parts[1] == "ln" || (weight && embedding_tables.count(parts[1])))) {
        module = parts[1];
    } else if (parts.size() == 2 && (parts[0] == "cls" || parts[0] == "mlm")) {
        module = parts[0];
    } else {
        throw ValidationError("unknown parameter name '" + std::string(name) + "'");
    }
    const bool layer_norm = module == "ln" || module == "ln1" || module == "ln2";
    if (layer_norm) return weight ? ParamKind::LayerNormWeight : ParamKind::LayerNormBias;
    return weight ? ParamKind::Weight : ParamKind::Bias;
}

/// Kaiming-uniform bound gain·sqrt(3 / fan_in); the default gain √2 gives
/// sqrt(6 / fan_in).
inline double kaiming_bound(std::size_t fan_in, double gain = std::numbers::sqrt2) {
    if (fan_in == 0) throw ValidationError("fan_in must be positive");
    return gain * std::sqrt(3.0 / static_cast<double>(fan_in));
}

/// Contiguous 1-based layer set: Bottom {1..k}, Top {L-k+1..L}, Full {1..L},
/// None ∅, with k = fraction·L required to be an integer.
inline std::vector<std::size_t> layer_range(std::size_t num_layers, double fraction, Direction direction) {
    if (num_layers == 0) throw ValidationError("layer count must be positive");
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("corruption fraction must lie in [0, 1]");
    const double exact = fraction * static_cast<double>(num_layers);
    const double k_round = std::round(exact);
    if (std::abs(exact - k_round) > 1e-9) {
        const double lo = std::floor(exact) / static_cast<double>(num_layers);
        const double hi = std::ceil(exact) / static_cast<double>(num_layers);
        std::ostringstream os;
        os << "fraction " << fraction << " of " << num_layers << " layers is not a whole number of layers; nearest valid fractions are "
           << lo << " and " << hi;
        throw ValidationError(os.str());
    }
    const auto k = static_cast<std::size_t>(k_round);
    std::vector<std::size_t> out;
    switch (direction) {
        case Direction::None: break;
        case Direction::Full:
            for (std::size_t l = 1; l <= num_layers; ++l) out.push_back(l);
            break;
        case Direction::Bottom:
            for (std::size_t l = 1; l <= k; ++l) out.push_back(l);
            break;
        case Direction::Top:
            for (std::size_t l = num_layers - k + 1; l <= num_layers; ++l) out.push_back(l);
            break;
    }
    if (fraction == 0.0) out.clear();
    return out;
}

/// "(1-3)"-style annotation of how many layers a fraction covers. Empty for
/// zero layers.
inline std::string layer_count_label(std::size_t num_layers, double fraction) {
    auto n = layer_range(num_layers, fraction, Direction::Bottom).size();
    return n == 0 ? std::string{} : "(1-" + std::to_string(n) + ")";
}

struct CorruptionSpec {
    Direction direction = Direction::None;
    double fraction = 0.0;
    std::vector<std::size_t> resolved_layers;
    std::uint64_t seed = 0;
    bool include_embeddings = false;
    double gain = std::numbers::sqrt2;
    bool resolved = false;

    static CorruptionSpec make(Direction d, double fraction, std::uint64_t seed) {
        CorruptionSpec s;
        s.direction = d;
        s.fraction = fraction;
        s.seed = seed;
        return s;
    }

    CorruptionSpec& resolve(std::size_t num_layers) {
        resolved_layers = layer_range(num_layers, fraction, direction);
        resolved = true;
        return *this;
    }

    bool covers(std::string_view name) const {
        auto layer = parameter_layer(name);
        if (layer == 0) return include_embeddings && name.starts_with("embeddings.");
        return std::binary_search(resolved_layers.begin(), resolved_layers.end(), layer);
    }

    std::string fingerprint() const {
        std::ostringstream os;
        os << to_string(direction) << ':' << fraction << ':';
        for (auto l : resolved_layers) os << l << ',';
        os << ':' << seed << ':' << include_embeddings << ':' << gain;
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(os.str())));
        return buf;
    }
};

inline void to_json(nlohmann::json& j, const CorruptionSpec& s) {
    j = nlohmann::json{{"direction", to_string(s.direction)}, {"fraction", s.fraction}, {"resolved_layers", s.resolved_layers},
                       {"seed", s.seed}, {"include_embeddings", s.include_embeddings}, {"gain", s.gain}};
}

inline void from_json(const nlohmann::json& j, CorruptionSpec& s) {
    s.direction = parse_direction(j.at("direction").get<std::string>());
    s.fraction = j.at("fraction").get<double>();
    s.seed = j.value("seed", std::uint64_t{0});
    s.include_embeddings = j.value("include_embeddings", false);
    s.gain = j.value("gain", std::numbers::sqrt2);
    s.resolved = j.contains("resolved_layers");
    if (s.resolved) s.resolved_layers = j.at("resolved_layers").get<std::vector<std::size_t>>();
}

struct ManifestEntry {
    std::string name;
    ParamKind kind = ParamKind::Weight;
    std::string action;  // set_one | set_zero | kaiming_uniform
    double bound = 0.0;
    std::size_t fan_in = 0;
    std::size_t count = 0;
};

struct CorruptionManifest {
    CorruptionSpec spec;
    std::string spec_fingerprint;
    std::vector<ManifestEntry> entries;
};

inline void to_json(nlohmann::json& j, const CorruptionManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json je{{"name", e.name}, {"kind", to_string(e.kind)}, {"action", e.action}, {"count", e.count}};
        if (e.action == "kaiming_uniform") {
            je["bound"] = e.bound;
            je["fan_in"] = e.fan_in;
        }
        entries.push_back(std::move(je));
    }
    j = nlohmann::json{{"format", "corruptlab-manifest"}, {"version", 1}, {"spec", m.spec},
                       {"spec_fingerprint", m.spec_fingerprint}, {"seed", m.spec.seed}, {"entries", std::move(entries)}};
}

inline void from_json(const nlohmann::json& j, CorruptionManifest& m) {
    if (j.value("format", "") != "corruptlab-manifest") throw ValidationError("not a corruption manifest");
    m.spec = j.at("spec").get<CorruptionSpec>();
    m.spec_fingerprint = j.value("spec_fingerprint", "");
    m.entries.clear();
    for (const auto& je : j.at("entries")) {
        ManifestEntry e;
        e.name = je.at("name").get<std::string>();
        e.kind = classify_parameter(e.name);
        e.action = je.at("action").get<std::string>();
        e.count = je.at("count").get<std::size_t>();
        e.bound = je.value("bound", 0.0);
        e.fan_in = je.value("fan_in", std::size_t{0});
        m.entries.push_back(std::move(e));
    }
}

/// Per-parameter stream: seed ⊕ hash(name).
inline Rng parameter_stream(std::uint64_t seed, std::string_view name) { return Rng(mix64(seed ^ fnv1a(name))); }

/// Fan-in of a stored (out × in) matrix.
inline std::size_t fan_in_of(const Shape& shape) {
    if (shape.size() != 2) throw ShapeError("fan-in requested for non-matrix shape " + shape_str(shape));
    return shape[1];
}

/// Reinitializes every parameter covered by the spec in a copy of `model`.
template <typename T>
std::pair<EncoderModel<T>, CorruptionManifest> corrupt(const EncoderModel<T>& model, const CorruptionSpec& spec) {
    if (!spec.resolved) throw ValidationError("corruption spec must be resolved against the model's layer count");
    auto expected = layer_range(model.config().num_layers, spec.fraction, spec.direction);
    if (expected != spec.resolved_layers) throw ValidationError("corruption spec was resolved for a different layer count");

    EncoderModel<T> out(model);
    CorruptionManifest manifest{spec, spec.fingerprint(), {}};
    for (auto& p : out.params()) {
        if (!spec.covers(p.name)) continue;
        ManifestEntry e{.name = p.name, .kind = classify_parameter(p.name), .count = p.tensor.numel()};
        auto data = p.tensor.data();
        switch (e.kind) {
            case ParamKind::LayerNormWeight:
                e.action = "set_one";
                std::fill(data.begin(), data.end(), T(1));
                break;
            case ParamKind::LayerNormBias:
            case ParamKind::Bias:
                e.action = "set_zero";
                std::fill(data.begin(), data.end(), T(0));
                break;
            case ParamKind::Weight: {
                e.action = "kaiming_uniform";
                e.fan_in = fan_in_of(p.tensor.shape());
                e.bound = kaiming_bound(e.fan_in, spec.gain);
                Rng rng = parameter_stream(spec.seed, p.name);
                std::uniform_real_distribution<double> dist(-e.bound, e.bound);
                const T limit = static_cast<T>(e.bound);
                for (auto& v : data) {
                    T x = static_cast<T>(dist(rng));
                    // rounding to T must not step outside [-b, b]
                    if (static_cast<double>(std::abs(x)) > e.bound || std::abs(x) > limit) {
                        x = std::nextafter(x, T(0));
                    }
                    v = x;
                }
                break;
            }
        }
        manifest.entries.push_back(std::move(e));
    }
    return {std::move(out), std::move(manifest)};
}

struct VerifyReport {
    bool passed = true;
    std::string failure;  // first offending parameter and reason
    std::map<std::string, std::size_t> corrupted_by_kind;
    std::size_t untouched_checked = 0;
    std::size_t untouched_diffs = 0;
    std::size_t bound_violations = 0;
    std::size_t exactness_violations = 0;
    std::size_t weight_values = 0;
    double normalized_mean = 0.0;      // of w / b over all corrupted weights
    double normalized_variance = 0.0;  // expected 1/3

    void fail(const std::string& what) {
        if (passed) failure = what;
        passed = false;
    }
};

namespace detail {
template <typename T>
bool bitwise_equal(std::span<const T> a, std::span<const T> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}
}  // namespace detail

/// Checks every post-condition of corrupt() on a before/after pair:
/// exact 1.0 / 0.0 assignments, Kaiming bounds, a pooled moment check on
/// the redrawn weights (mean within 3σ of 0, variance within 10% of b²/3,
/// applied once at least 10⁴ values exist), and bitwise locality.
template <typename T>
VerifyReport verify_corruption(const EncoderModel<T>& before, const EncoderModel<T>& after, CorruptionSpec spec) {
    VerifyReport r;
    if (!(before.config() == after.config())) {
        r.fail("architectures differ");
        return r;
    }
    if (!spec.resolved) spec.resolve(before.config().num_layers);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < before.params().size(); ++i) {
        const auto& pb = before.params()[i];
        const auto& pa = after.params()[i];
        auto vb = pb.tensor.data();
        auto va = pa.tensor.data();
        if (!spec.covers(pb.name)) {
            ++r.untouched_checked;
            if (!detail::bitwise_equal(vb, va)) {
                ++r.untouched_diffs;
                r.fail(pb.name + ": parameter outside the corrupted range was modified");
            }
            continue;
        }
        const ParamKind kind = classify_parameter(pb.name);
        ++r.corrupted_by_kind[to_string(kind)];
        switch (kind) {
            case ParamKind::LayerNormWeight:
                for (T v : va)
                    if (v != T(1)) {
                        ++r.exactness_violations;
                        r.fail(pb.name + ": LayerNorm weight not exactly 1.0");
                    }
                break;
            case ParamKind::LayerNormBias:
            case ParamKind::Bias:
                for (T v : va)
                    if (v != T(0)) {
                        ++r.exactness_violations;
                        r.fail(pb.name + ": bias not exactly 0.0");
                    }
                break;
            case ParamKind::Weight: {
                const double b = kaiming_bound(fan_in_of(pa.tensor.shape()), spec.gain);
                for (T v : va) {
                    const double x = static_cast<double>(v);
                    if (!std::isfinite(x) || std::abs(x) > b) {
                        ++r.bound_violations;
                        r.fail(pb.name + ": value " + std::to_string(x) + " outside ±" + std::to_string(b));
                        continue;
                    }
                    sum += x / b;
                    sum_sq += (x / b) * (x / b);
                    ++r.weight_values;
                }
                break;
            }
        }
    }
    if (r.weight_values > 0) {
        const double n = static_cast<double>(r.weight_values);
        r.normalized_mean = sum / n;
        r.normalized_variance = sum_sq / n - r.normalized_mean * r.normalized_mean;
    }
    if (r.weight_values >= 10000) {
        const double sigma_mean = std::sqrt(1.0 / (3.0 * static_cast<double>(r.weight_values)));
        if (std::abs(r.normalized_mean) > 3.0 * sigma_mean) r.fail("corrupted weights: sample mean outside 3 sigma of 0");
        if (std::abs(r.normalized_variance - 1.0 / 3.0) > 0.1 / 3.0) r.fail("corrupted weights: sample variance not within 10% of b^2/3");
    }
    return r;
}

}  // namespace corruptlab
