// SPDX-License-Identifier: Apache-2.0
//
// Compact BERT-style bidirectional encoder: token/position/segment
// embeddings, post-norm transformer layers, a single linear classification
// head and an untied MLM head.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "corruptlab/grad_check.hpp"
#include "corruptlab/ops.hpp"
#include "corruptlab/rng.hpp"
#include "corruptlab/vocab.hpp"

namespace corruptlab {

enum class Pooling { Cls, MeanNonCls };

inline std::string to_string(Pooling p) { return p == Pooling::Cls ? "cls" : "mean"; }

inline Pooling parse_pooling(std::string_view s) {
    if (s == "cls") return Pooling::Cls;
    if (s == "mean" || s == "mean_non_cls" || s == "average") return Pooling::MeanNonCls;
    throw ValidationError("unknown pooling strategy '" + std::string(s) + "' (expected cls|mean)");
}

struct ModelConfig {
    std::string name = "custom";
    std::size_t num_layers = 4;
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t ffn_multiplier = 4;
    std::size_t max_len = 128;
    std::size_t vocab_size = 512;
    std::size_t num_classes = 2;
    double dropout = 0.1;

    std::size_t ffn() const { return hidden * ffn_multiplier; }
    std::size_t head_dim() const { return hidden / heads; }

    void validate() const {
        if (num_layers < 1) throw ValidationError("model needs at least one layer");
        if (hidden == 0 || heads == 0 || hidden % heads != 0) {
            throw ValidationError("hidden size " + std::to_string(hidden) + " not divisible by " + std::to_string(heads) + " heads");
        }
        if (ffn_multiplier == 0) throw ValidationError("ffn multiplier must be positive");
        if (max_len < 2) throw ValidationError("max_len must leave room for [CLS] and [SEP]");
        if (vocab_size <= static_cast<std::size_t>(special::count)) throw ValidationError("vocabulary too small");
        if (num_classes < 1) throw ValidationError("num_classes must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("dropout must lie in [0, 1)");
    }

    /// tiny (L=4,H=64), small (L=8,H=128), mini-base (L=12,H=128); all A=4.
    static ModelConfig preset(std::string_view name) {
        ModelConfig c;
        c.name = std::string(name);
        if (name == "tiny") {
            c.num_layers = 4, c.hidden = 64, c.heads = 4;
        } else if (name == "small") {
            c.num_layers = 8, c.hidden = 128, c.heads = 4;
        } else if (name == "mini-base") {
            c.num_layers = 12, c.hidden = 128, c.heads = 4;
        } else {
            throw ValidationError("unknown model preset '" + std::string(name) + "' (tiny|small|mini-base)");
        }
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Static description of one named parameter.
struct ParamSpec {
    std::string name;
    Shape shape;
    std::size_t layer = 0;  // 1-based encoder layer, 0 for embeddings and heads
};

/// Canonical parameter census; a pure function of the config.
inline std::vector<ParamSpec> parameter_census(const ModelConfig& cfg) {
    const std::size_t H = cfg.hidden, F = cfg.ffn(), V = cfg.vocab_size;
    std::vector<ParamSpec> out{
        {"embeddings.token.weight", {V, H}, 0},
        {"embeddings.position.weight", {cfg.max_len, H}, 0},
        {"embeddings.segment.weight", {2, H}, 0},
        {"embeddings.ln.weight", {H}, 0},
        {"embeddings.ln.bias", {H}, 0},
    };
    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        for (const char* proj : {"attn_q", "attn_k", "attn_v", "attn_out"}) {
            out.push_back({p + proj + ".weight", {H, H}, l});
            out.push_back({p + proj + ".bias", {H}, l});
        }
        out.push_back({p + "ln1.weight", {H}, l});
        out.push_back({p + "ln1.bias", {H}, l});
        out.push_back({p + "ffn1.weight", {F, H}, l});
        out.push_back({p + "ffn1.bias", {F}, l});
        out.push_back({p + "ffn2.weight", {H, F}, l});
        out.push_back({p + "ffn2.bias", {H}, l});
        out.push_back({p + "ln2.weight", {H}, l});
        out.push_back({p + "ln2.bias", {H}, l});
    }
    out.push_back({"cls.weight", {cfg.num_classes, H}, 0});
    out.push_back({"cls.bias", {cfg.num_classes}, 0});
    out.push_back({"mlm.weight", {V, H}, 0});
    out.push_back({"mlm.bias", {V}, 0});
    return out;
}

inline std::size_t parameter_count(const ModelConfig& cfg) {
    std::size_t n = 0;
    for (const auto& p : parameter_census(cfg)) n += shape_numel(p.shape);
    return n;
}

inline bool is_head_param(std::string_view name) { return name.starts_with("cls.") || name.starts_with("mlm."); }
inline bool is_embedding_param(std::string_view name) { return name.starts_with("embeddings."); }

template <typename T>
class EncoderModel {
public:
    explicit EncoderModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        for (auto& spec : parameter_census(cfg_)) {
            index_.emplace(spec.name, params_.size());
            params_.push_back({spec.name, Tensor<T>::zeros(spec.shape, true)});
            specs_.push_back(std::move(spec));
        }
    }

    EncoderModel(const EncoderModel& other) : cfg_(other.cfg_), specs_(other.specs_), index_(other.index_) {
        for (const auto& p : other.params_) params_.push_back({p.name, Tensor<T>(p.tensor.shape(), p.tensor.values(), true)});
    }
    EncoderModel& operator=(const EncoderModel& other) {
        if (this != &other) *this = EncoderModel(other);
        return *this;
    }
    EncoderModel(EncoderModel&&) noexcept = default;
    EncoderModel& operator=(EncoderModel&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    const std::vector<ParamSpec>& specs() const { return specs_; }
    std::vector<NamedTensor<T>>& params() { return params_; }
    const std::vector<NamedTensor<T>>& params() const { return params_; }

    bool has(std::string_view name) const { return index_.count(std::string(name)) != 0; }

    Tensor<T>& param(std::string_view name) {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw ValidationError("no parameter named '" + std::string(name) + "'");
        return params_[it->second].tensor;
    }
    const Tensor<T>& param(std::string_view name) const { return const_cast<EncoderModel*>(this)->param(name); }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    /// Fresh-model initialization: N(0, std) for matrices and embeddings,
    /// LayerNorm scale 1, every bias 0.
    void init_weights(Rng& rng, double stddev = 0.02) {
        std::normal_distribution<double> normal(0.0, stddev);
        for (auto& p : params_) {
            auto data = p.tensor.data();
            if (p.name.ends_with("ln.weight") || p.name.ends_with("ln1.weight") || p.name.ends_with("ln2.weight")) {
                std::fill(data.begin(), data.end(), T(1));
            } else if (p.name.ends_with(".bias")) {
                std::fill(data.begin(), data.end(), T(0));
            } else {
                for (auto& v : data) v = static_cast<T>(normal(rng));
            }
        }
    }

    /// Value copy in another precision.
    template <typename U>
    EncoderModel<U> cast() const {
        EncoderModel<U> out(cfg_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto src = params_[i].tensor.data();
            auto dst = out.params()[i].tensor.data();
            for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<U>(src[j]);
        }
        return out;
    }

private:
    ModelConfig cfg_;
    std::vector<ParamSpec> specs_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<NamedTensor<T>> params_;
};

/// A padded minibatch of encoded sequences, row-major B×T.
struct Batch {
    std::size_t size = 0;
    std::size_t length = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::int32_t> segments;
    std::vector<std::uint8_t> mask;
};

/// Stacks the selected sequences and trims trailing columns that are padding
/// in every row.
inline Batch make_batch(std::span<const EncodedSequence> seqs, std::span<const std::size_t> rows) {
    if (rows.empty()) throw ValidationError("empty batch");
    std::size_t len = 0;
    for (auto r : rows) {
        const auto& m = seqs[r].mask;
        std::size_t used = 0;
        for (std::size_t t = 0; t < m.size(); ++t)
            if (m[t]) used = t + 1;
        len = std::max(len, used);
    }
    Batch b;
    b.size = rows.size();
    b.length = std::max<std::size_t>(len, 1);
    for (auto r : rows) {
        const auto& s = seqs[r];
        if (s.ids.size() < b.length) throw ValidationError("sequence shorter than batch length");
        b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.begin() + b.length);
        b.segments.insert(b.segments.end(), s.segments.begin(), s.segments.begin() + b.length);
        b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.begin() + b.length);
    }
    return b;
}

inline Batch make_batch(std::span<const EncodedSequence> seqs) {
    std::vector<std::size_t> rows(seqs.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return make_batch(seqs, rows);
}

/// Dropout is applied only when `rng` is set and the rate is positive.
struct ForwardContext {
    Rng* rng = nullptr;
    double dropout = 0.0;

    static ForwardContext eval() { return {}; }
    static ForwardContext train(Rng& rng, double p) { return {&rng, p}; }
    bool training() const { return rng != nullptr && dropout > 0.0; }
};

template <typename T>
Tensor<T> apply_dropout(const Tensor<T>& x, ForwardContext& ctx) {
    return ctx.training() ? dropout(x, ctx.dropout, *ctx.rng) : x;
}

/// Optional capture of attention probabilities [B, heads, T, T].
template <typename T>
struct AttentionTrace {
    Tensor<T> probs;
};

/// Scaled dot-product attention for encoder layer `layer` (1-based) over
/// hidden [B, T, H]. Keys whose mask entry is 0 receive a -1e9 logit.
template <typename T>
Tensor<T> multi_head_attention(const EncoderModel<T>& model, std::size_t layer, const Tensor<T>& hidden,
                               std::span<const std::uint8_t> mask, ForwardContext& ctx,
                               AttentionTrace<T>* trace = nullptr) {
    const auto& cfg = model.config();
    if (hidden.rank() != 3 || hidden.dim(2) != cfg.hidden) {
        throw ShapeError("attention input must be [B, T, " + std::to_string(cfg.hidden) + "], got " + shape_str(hidden.shape()));
    }
    const std::size_t B = hidden.dim(0), Tn = hidden.dim(1), A = cfg.heads, D = cfg.head_dim();
    if (mask.size() != B * Tn) throw ShapeError("attention mask length does not match sequence length");
    const std::string p = "layer." + std::to_string(layer) + ".";
    auto heads = [&](const char* proj) {
        auto y = linear(hidden, model.param(p + proj + ".weight"), model.param(p + proj + ".bias"));
        return swap_axes12(reshape(y, Shape{B, Tn, A, D}));  // [B, A, T, D]
    };
    auto q = heads("attn_q");
    auto k = heads("attn_k");
    auto v = heads("attn_v");
    auto scores = matmul(q, transpose(k)) * static_cast<T>(1.0 / std::sqrt(static_cast<double>(D)));
    auto probs = softmax(mask_keys(scores, mask), 3);
    if (trace) trace->probs = probs;
    auto ctx_heads = matmul(apply_dropout(probs, ctx), v);                    // [B, A, T, D]
    auto merged = reshape(swap_axes12(ctx_heads), Shape{B, Tn, cfg.hidden});  // [B, T, H]
    return linear(merged, model.param(p + "attn_out.weight"), model.param(p + "attn_out.bias"));
}

/// Encoder forward pass; returns hidden states [B, T, H].
template <typename T>
Tensor<T> forward(const EncoderModel<T>& model, const Batch& batch, ForwardContext ctx = {}) {
    const auto& cfg = model.config();
    const std::size_t B = batch.size, Tn = batch.length, H = cfg.hidden;
    if (Tn > cfg.max_len) {
        throw ValidationError("sequence length " + std::to_string(Tn) + " exceeds max_len " + std::to_string(cfg.max_len));
    }
    if (batch.ids.size() != B * Tn || batch.segments.size() != B * Tn || batch.mask.size() != B * Tn) {
        throw ShapeError("batch arrays do not match " + std::to_string(B) + "x" + std::to_string(Tn));
    }
    std::vector<std::int32_t> positions(B * Tn);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % Tn);

    auto x = embedding(model.param("embeddings.token.weight"), batch.ids) +
             embedding(model.param("embeddings.position.weight"), positions) +
             embedding(model.param("embeddings.segment.weight"), batch.segments);
    x = reshape(x, Shape{B, Tn, H});
    x = layer_norm(x, model.param("embeddings.ln.weight"), model.param("embeddings.ln.bias"));
    x = apply_dropout(x, ctx);

    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        auto attn = multi_head_attention(model, l, x, batch.mask, ctx);
        x = layer_norm(x + apply_dropout(attn, ctx), model.param(p + "ln1.weight"), model.param(p + "ln1.bias"));
        auto ff = linear(gelu(linear(x, model.param(p + "ffn1.weight"), model.param(p + "ffn1.bias"))),
                         model.param(p + "ffn2.weight"), model.param(p + "ffn2.bias"));
        x = layer_norm(x + apply_dropout(ff, ctx), model.param(p + "ln2.weight"), model.param(p + "ln2.bias"));
    }
    return x;
}

struct PoolOptions {
    bool include_sep = true;  // MeanNonCls averages over [SEP] too unless disabled
};

/// Per-position weights realizing a pooling strategy (B×T).
template <typename T>
std::vector<T> pooling_weights(const Batch& batch, Pooling strategy, PoolOptions opts = {}) {
    const std::size_t B = batch.size, Tn = batch.length;
    std::vector<T> w(B * Tn, T{0});
    for (std::size_t b = 0; b < B; ++b) {
        if (strategy == Pooling::Cls) {
            w[b * Tn] = T{1};
            continue;
        }
        std::size_t count = 0;
        for (std::size_t t = 1; t < Tn; ++t) {
            const std::size_t i = b * Tn + t;
            if (batch.mask[i] && (opts.include_sep || batch.ids[i] != special::sep)) ++count;
        }
        if (count == 0) throw ValidationError("mean pooling: sequence " + std::to_string(b) + " has no eligible positions");
        const T inv = T{1} / static_cast<T>(count);
        for (std::size_t t = 1; t < Tn; ++t) {
            const std::size_t i = b * Tn + t;
            if (batch.mask[i] && (opts.include_sep || batch.ids[i] != special::sep)) w[i] = inv;
        }
    }
    return w;
}

/// [B, T, H] -> [B, H].
template <typename T>
Tensor<T> pool(const Tensor<T>& hidden, const Batch& batch, Pooling strategy, PoolOptions opts = {}) {
    auto w = pooling_weights<T>(batch, strategy, opts);
    return weighted_pool(hidden, std::span<const T>(w));
}

/// logits = pooled·W_clsᵀ + b_cls
template <typename T>
Tensor<T> classify(const EncoderModel<T>& model, const Tensor<T>& pooled) {
    return linear(pooled, model.param("cls.weight"), model.param("cls.bias"));
}

/// Vocabulary logits at the given flattened positions (b·T + t) of hidden.
template <typename T>
Tensor<T> mlm_logits(const EncoderModel<T>& model, const Tensor<T>& hidden, std::span<const std::size_t> positions) {
    auto rows = gather_rows(hidden, positions);
    return linear(rows, model.param("mlm.weight"), model.param("mlm.bias"));
}

/// forward → pool → classify.
template <typename T>
Tensor<T> sequence_logits(const EncoderModel<T>& model, const Batch& batch, Pooling pooling, ForwardContext ctx = {},
                          PoolOptions opts = {}) {
    return classify(model, pool(forward(model, batch, ctx), batch, pooling, opts));
}

}  // namespace corruptlab
