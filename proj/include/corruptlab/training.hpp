// SPDX-License-Identifier: Apache-2.0
//
// MLM pre-training, full fine-tuning, linear probing and learning-rate sweeps.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "corruptlab/checkpoint.hpp"
#include "corruptlab/corruption.hpp"
#include "corruptlab/data.hpp"
#include "corruptlab/metrics.hpp"
#include "corruptlab/model.hpp"
#include "corruptlab/optim.hpp"
#include "corruptlab/parallel.hpp"

namespace corruptlab {

enum class TrainMode { FullFineTune, LinearProbe };

inline std::string to_string(TrainMode m) { return m == TrainMode::FullFineTune ? "finetune" : "probe"; }

inline TrainMode parse_train_mode(std::string_view s) {
    if (s == "finetune") return TrainMode::FullFineTune;
    if (s == "probe") return TrainMode::LinearProbe;
    throw ValidationError("unknown mode '" + std::string(s) + "' (finetune|probe)");
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct TrainConfig {
    double learning_rate = 2e-5;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::FullFineTune;
    Pooling pooling = Pooling::Cls;
    bool mean_includes_sep = true;
    std::size_t max_seq_len = 128;
    /// > 0 carves this fraction of the training set out as a validation
    /// split and selects the best epoch on it instead of on the test set.
    double validation_fraction = 0.0;
    std::optional<double> dropout;  // overrides the checkpoint's rate

    void validate() const {
        // lr == 0 is accepted: it freezes the run, which is a useful control
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning rate must be finite and >= 0");
        if (epochs < 1) throw ValidationError("epochs must be at least 1");
        if (batch_size < 1) throw ValidationError("batch size must be at least 1");
        if (max_seq_len < 3) throw ValidationError("max sequence length must be at least 3");
        if (validation_fraction < 0.0 || validation_fraction >= 1.0) throw ValidationError("validation fraction must lie in [0, 1)");
        if (dropout && (*dropout < 0.0 || *dropout >= 1.0)) throw ValidationError("dropout must lie in [0, 1)");
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"learning_rate", learning_rate}, {"epochs", epochs},         {"batch_size", batch_size},
                         {"seed", seed},                   {"mode", to_string(mode)},  {"pooling", to_string(pooling)},
                         {"mean_includes_sep", mean_includes_sep}, {"max_seq_len", max_seq_len},
                         {"validation_fraction", validation_fraction}};
        if (dropout) j["dropout"] = *dropout;
        return j;
    }

    std::string fingerprint() const { return hex64(fnv1a(to_json().dump())); }
};

struct RunResult {
    std::string config_fingerprint;
    std::string corruption_fingerprint;
    nlohmann::json config;
    double learning_rate = 0.0;
    std::vector<double> history;       // selection metric per epoch (test weighted F1 by default)
    std::vector<double> test_history;  // test weighted F1 per epoch
    std::vector<double> train_loss;    // mean training loss per epoch
    double best_f1 = 0.0;
    std::size_t best_epoch = 0;  // 1-based, 0 if no epoch completed
    double wall_clock_seconds = 0.0;
    bool aborted = false;
    std::string abort_reason;
    bool outlier = false;
    std::string outlier_reason;
    double majority_baseline = 0.0;

    /// Test F1 at the selected epoch.
    double reported_f1() const { return best_epoch == 0 ? 0.0 : test_history.at(best_epoch - 1); }
};

/// Fills the outlier flag of a finished run from the test labels.
inline OutlierVerdict flag_outlier(RunResult& r, std::span<const std::int32_t> labels, std::size_t num_classes) {
    r.majority_baseline = majority_baseline(labels, num_classes);
    auto v = flag_outlier(r.reported_f1(), r.aborted, r.majority_baseline, r.abort_reason);
    r.outlier = v.flagged;
    r.outlier_reason = v.reason;
    return v;
}

inline std::vector<EncodedSequence> encode_dataset(const LabeledDataset& ds, const Vocabulary& vocab, std::size_t max_len) {
    std::vector<EncodedSequence> out;
    out.reserve(ds.size());
    for (const auto& e : ds.examples) out.push_back(encode(e.text_a, e.text_b, vocab, max_len));
    return out;
}

template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<std::int32_t> out(n);
    auto v = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<std::int32_t>(std::max_element(&v[i * c], &v[i * c] + c) - &v[i * c]);
    }
    return out;
}

/// Pooled encoder features, dropout off, as an N×H row-major matrix.
inline std::vector<float> pooled_features(const EncoderModel<float>& model, std::span<const EncodedSequence> seqs, Pooling pooling,
                                          PoolOptions opts = {}, std::size_t batch_size = 64) {
    std::vector<float> out;
    out.reserve(seqs.size() * model.config().hidden);
    for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
        std::vector<std::size_t> rows(std::min(batch_size, seqs.size() - start));
        std::iota(rows.begin(), rows.end(), start);
        auto batch = make_batch(seqs, rows);
        auto pooled = pool(forward(model, batch), batch, pooling, opts);
        out.insert(out.end(), pooled.data().begin(), pooled.data().end());
    }
    return out;
}

inline std::vector<std::int32_t> predict(const EncoderModel<float>& model, std::span<const EncodedSequence> seqs, Pooling pooling,
                                         PoolOptions opts = {}, std::size_t batch_size = 64) {
    std::vector<std::int32_t> out;
    for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
        std::vector<std::size_t> rows(std::min(batch_size, seqs.size() - start));
        std::iota(rows.begin(), rows.end(), start);
        auto batch = make_batch(seqs, rows);
        auto p = argmax_rows(sequence_logits(model, batch, pooling, ForwardContext::eval(), opts));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

/// Copy of `model` whose classification head has `num_classes` outputs,
/// initialized Kaiming-uniform (bound sqrt(6/H)) with zero bias.
inline EncoderModel<float> with_fresh_head(const EncoderModel<float>& model, std::size_t num_classes, std::uint64_t seed,
                                           std::optional<double> dropout = std::nullopt) {
    ModelConfig cfg = model.config();
    cfg.num_classes = num_classes;
    if (dropout) cfg.dropout = *dropout;
    EncoderModel<float> out(cfg);
    for (auto& p : out.params()) {
        if (p.name.starts_with("cls.")) continue;
        auto src = model.param(p.name).data();
        std::copy(src.begin(), src.end(), p.tensor.data().begin());
    }
    auto w = out.param("cls.weight").data();
    const double bound = kaiming_bound(cfg.hidden);
    Rng rng(derive_seed(seed, "classification_head"));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : w) v = static_cast<float>(dist(rng));
    return out;
}

struct FinetuneOutput {
    RunResult result;
    EncoderModel<float> model;  // weights at the selected epoch
};

namespace detail {

inline void validate_datasets(const LabeledDataset& train, const LabeledDataset& test) {
    if (train.examples.empty() || test.examples.empty()) throw ValidationError("training and test sets must be nonempty");
    if (train.label_names != test.label_names) throw ValidationError("training and test sets use different label sets");
}

/// Moves the last `fraction` of a seeded permutation of train into a
/// validation set.
inline std::pair<LabeledDataset, LabeledDataset> carve_validation(const LabeledDataset& train, double fraction, std::uint64_t seed) {
    auto n_val = static_cast<std::size_t>(std::round(fraction * static_cast<double>(train.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, train.size() - 1);
    return truncate_split(train, train.size() - n_val, n_val, derive_seed(seed, "validation"), false);
}

struct EpochLoop {
    const TrainConfig& cfg;
    RunResult& result;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void record_epoch(double loss, double select_f1, double test_f1) {
        result.train_loss.push_back(loss);
        result.history.push_back(select_f1);
        result.test_history.push_back(test_f1);
        if (result.best_epoch == 0 || select_f1 > result.best_f1) {
            result.best_f1 = select_f1;
            result.best_epoch = result.history.size();
        }
    }

    void abort(const std::string& why) {
        result.aborted = true;
        result.abort_reason = why;
    }

    void finish() {
        result.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

inline RunResult start_result(const TrainConfig& cfg, const Checkpoint& ck) {
    RunResult r;
    r.config = cfg.to_json();
    r.config_fingerprint = cfg.fingerprint();
    r.corruption_fingerprint = ck.metadata.value("corruption_fingerprint", std::string("none"));
    r.learning_rate = cfg.learning_rate;
    return r;
}

}  // namespace detail

/// Full fine-tuning: every encoder parameter and the re-initialized head are
/// trained with Adam; weighted F1 is evaluated after every epoch.
inline FinetuneOutput finetune_model(const Checkpoint& ck, const LabeledDataset& train_in, const LabeledDataset& test,
                                     const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.mode != TrainMode::FullFineTune) throw ValidationError("finetune requires mode=finetune");
    detail::validate_datasets(train_in, test);
    LabeledDataset train = train_in, val;
    if (cfg.validation_fraction > 0.0) std::tie(train, val) = detail::carve_validation(train_in, cfg.validation_fraction, cfg.seed);

    RunResult result = detail::start_result(cfg, ck);
    detail::EpochLoop loop{cfg, result};
    EncoderModel<float> model = with_fresh_head(ck.model, train.num_classes(), cfg.seed, cfg.dropout);
    const std::size_t max_len = std::min(cfg.max_seq_len, model.config().max_len);
    const auto train_seqs = encode_dataset(train, ck.vocab, max_len);
    const auto test_seqs = encode_dataset(test, ck.vocab, max_len);
    const auto val_seqs = encode_dataset(val, ck.vocab, max_len);
    const auto train_labels = train.labels();
    const auto test_labels = test.labels();
    const auto val_labels = val.labels();
    const PoolOptions popts{cfg.mean_includes_sep};
    const double drop = model.config().dropout;

    std::vector<NamedTensor<float>*> trainable;
    for (auto& p : model.params())
        if (!p.name.starts_with("mlm.")) trainable.push_back(&p);
    AdamState<float> adam;
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
    EncoderModel<float> best = model;

    std::vector<std::size_t> order(train_seqs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs && !result.aborted; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
            std::vector<std::int32_t> targets;
            for (auto r : rows) targets.push_back(train_labels[r]);
            auto batch = make_batch(train_seqs, rows);
            for (auto* p : trainable) p->tensor.zero_grad();
            auto logits = sequence_logits(model, batch, cfg.pooling, ForwardContext::train(dropout_rng, drop), popts);
            auto loss = cross_entropy(logits, targets);
            if (!std::isfinite(loss.item())) {
                loop.abort("non-finite loss in epoch " + std::to_string(epoch + 1));
                break;
            }
            loss.backward();
            try {
                adam_step(trainable, adam, cfg.learning_rate);
            } catch (const NonFiniteError& e) {
                loop.abort(e.what());
                break;
            }
            loss_sum += loss.item();
            ++batches;
        }
        if (result.aborted) break;
        const double test_f1 = weighted_f1(predict(model, test_seqs, cfg.pooling, popts), test_labels, test.num_classes());
        const double select_f1 =
            val_seqs.empty() ? test_f1 : weighted_f1(predict(model, val_seqs, cfg.pooling, popts), val_labels, val.num_classes());
        const std::size_t prev_best = result.best_epoch;
        loop.record_epoch(batches ? loss_sum / static_cast<double>(batches) : 0.0, select_f1, test_f1);
        if (result.best_epoch != prev_best) best = model;
    }
    loop.finish();
    flag_outlier(result, test_labels, test.num_classes());
    return {std::move(result), std::move(best)};
}

inline RunResult finetune(const Checkpoint& ck, const LabeledDataset& train, const LabeledDataset& test, const TrainConfig& cfg) {
    return finetune_model(ck, train, test, cfg).result;
}

/// Linear probe: the encoder is frozen (its features are computed once with
/// dropout off) and only the re-initialized classification head is trained.
inline FinetuneOutput linear_probe_model(const Checkpoint& ck, const LabeledDataset& train_in, const LabeledDataset& test,
                                         const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.mode != TrainMode::LinearProbe) throw ValidationError("linear_probe requires mode=probe");
    detail::validate_datasets(train_in, test);
    LabeledDataset train = train_in, val;
    if (cfg.validation_fraction > 0.0) std::tie(train, val) = detail::carve_validation(train_in, cfg.validation_fraction, cfg.seed);

    RunResult result = detail::start_result(cfg, ck);
    detail::EpochLoop loop{cfg, result};
    EncoderModel<float> model = with_fresh_head(ck.model, train.num_classes(), cfg.seed, cfg.dropout);
    const std::size_t H = model.config().hidden;
    const std::size_t max_len = std::min(cfg.max_seq_len, model.config().max_len);
    const PoolOptions popts{cfg.mean_includes_sep};
    auto features = [&](const LabeledDataset& ds) {
        auto seqs = encode_dataset(ds, ck.vocab, max_len);
        return pooled_features(model, seqs, cfg.pooling, popts);
    };
    const auto f_train = features(train);
    const auto f_test = features(test);
    const auto f_val = val.examples.empty() ? std::vector<float>{} : features(val);
    const auto train_labels = train.labels();
    const auto test_labels = test.labels();
    const auto val_labels = val.labels();

    auto& head_w = model.params()[model.params().size() - 4];
    auto& head_b = model.params()[model.params().size() - 3];
    std::vector<NamedTensor<float>*> trainable{&head_w, &head_b};
    auto head_predict = [&](const std::vector<float>& f) {
        Tensor<float> x(Shape{f.size() / H, H}, f);
        return argmax_rows(linear(x, head_w.tensor, head_b.tensor));
    };

    AdamState<float> adam;
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    EncoderModel<float> best = model;
    std::vector<std::size_t> order(train_labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs && !result.aborted; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<float> xb;
            std::vector<std::int32_t> targets;
            for (std::size_t i = start; i < end; ++i) {
                xb.insert(xb.end(), f_train.begin() + static_cast<std::ptrdiff_t>(order[i] * H),
                          f_train.begin() + static_cast<std::ptrdiff_t>((order[i] + 1) * H));
                targets.push_back(train_labels[order[i]]);
            }
            head_w.tensor.zero_grad();
            head_b.tensor.zero_grad();
            auto loss = cross_entropy(linear(Tensor<float>(Shape{end - start, H}, std::move(xb)), head_w.tensor, head_b.tensor), targets);
            if (!std::isfinite(loss.item())) {
                loop.abort("non-finite loss in epoch " + std::to_string(epoch + 1));
                break;
            }
            loss.backward();
            try {
                adam_step(trainable, adam, cfg.learning_rate);
            } catch (const NonFiniteError& e) {
                loop.abort(e.what());
                break;
            }
            loss_sum += loss.item();
            ++batches;
        }
        if (result.aborted) break;
        const double test_f1 = weighted_f1(head_predict(f_test), test_labels, test.num_classes());
        const double select_f1 = f_val.empty() ? test_f1 : weighted_f1(head_predict(f_val), val_labels, val.num_classes());
        const std::size_t prev_best = result.best_epoch;
        loop.record_epoch(batches ? loss_sum / static_cast<double>(batches) : 0.0, select_f1, test_f1);
        if (result.best_epoch != prev_best) best = model;
    }
    loop.finish();
    flag_outlier(result, test_labels, test.num_classes());
    return {std::move(result), std::move(best)};
}

inline RunResult linear_probe(const Checkpoint& ck, const LabeledDataset& train, const LabeledDataset& test, const TrainConfig& cfg) {
    return linear_probe_model(ck, train, test, cfg).result;
}

/// Dispatches on cfg.mode.
inline FinetuneOutput train_model(const Checkpoint& ck, const LabeledDataset& train, const LabeledDataset& test, const TrainConfig& cfg) {
    return cfg.mode == TrainMode::FullFineTune ? finetune_model(ck, train, test, cfg) : linear_probe_model(ck, train, test, cfg);
}

struct SweepResult {
    std::vector<RunResult> runs;  // in the order of the requested learning rates
    std::size_t best = 0;
    std::optional<EncoderModel<float>> best_model;  // only when requested

    const RunResult& best_run() const { return runs.at(best); }
};

inline const std::vector<double> default_learning_rates{1e-5, 2e-5, 5e-5};

/// Runs every learning rate with identical seed and data; the best run has
/// the highest selection F1, ties going to the lower learning rate.
inline SweepResult lr_sweep(const Checkpoint& ck, const LabeledDataset& train, const LabeledDataset& test, const TrainConfig& tmpl,
                            const std::vector<double>& lrs = default_learning_rates, std::size_t workers = 1,
                            bool keep_best_model = false) {
    if (lrs.empty()) throw ValidationError("learning-rate sweep needs at least one rate");
    SweepResult out;
    out.runs.resize(lrs.size());
    std::vector<std::optional<EncoderModel<float>>> models(lrs.size());
    parallel_for(lrs.size(), workers, [&](std::size_t i) {
        TrainConfig cfg = tmpl;
        cfg.learning_rate = lrs[i];
        auto o = train_model(ck, train, test, cfg);
        out.runs[i] = std::move(o.result);
        if (keep_best_model) models[i].emplace(std::move(o.model));
    });
    for (std::size_t i = 1; i < out.runs.size(); ++i) {
        const auto& cand = out.runs[i];
        const auto& cur = out.runs[out.best];
        if (cand.best_f1 > cur.best_f1 || (cand.best_f1 == cur.best_f1 && lrs[i] < lrs[out.best])) out.best = i;
    }
    if (keep_best_model) out.best_model = std::move(models[out.best]);
    return out;
}

// ---------------------------------------------------------------------------
// Masked-language-model pre-training

struct PretrainConfig {
    std::size_t epochs = 8;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    double mask_rate = 0.15;
    double mask_token_share = 0.8;    // of selected positions → [MASK]
    double random_token_share = 0.1;  // → random token; the rest stay unchanged
    std::size_t max_seq_len = 128;
    double init_std = 0.02;

    nlohmann::json to_json() const {
        return {{"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate}, {"seed", seed},
                {"mask_rate", mask_rate}, {"mask_token_share", mask_token_share}, {"random_token_share", random_token_share},
                {"max_seq_len", max_seq_len}, {"init_std", init_std}};
    }
};

struct MaskedBatch {
    Batch batch;                         // ids with masking applied
    std::vector<std::size_t> positions;  // flattened b·T + t
    std::vector<std::int32_t> targets;   // original ids at `positions`
};

inline bool maskable(std::int32_t id) { return id >= special::count || id == special::unk; }

/// Selects round(rate·n) (at least one) of the n maskable positions of every
/// sequence; each selected position becomes [MASK], a random non-special
/// token, or stays unchanged according to the configured shares. Sequences
/// with no maskable position contribute nothing.
inline MaskedBatch mask_tokens(const Batch& in, std::size_t vocab_size, const PretrainConfig& cfg, Rng& rng) {
    MaskedBatch mb{in, {}, {}};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::int32_t> random_tok(special::count, static_cast<std::int32_t>(vocab_size) - 1);
    for (std::size_t b = 0; b < in.size; ++b) {
        std::vector<std::size_t> cand;
        for (std::size_t t = 0; t < in.length; ++t) {
            const std::size_t i = b * in.length + t;
            if (in.mask[i] && maskable(in.ids[i])) cand.push_back(i);
        }
        if (cand.empty()) continue;
        auto k = static_cast<std::size_t>(std::llround(cfg.mask_rate * static_cast<double>(cand.size())));
        k = std::clamp<std::size_t>(k, 1, cand.size());
        std::shuffle(cand.begin(), cand.end(), rng);
        cand.resize(k);
        std::sort(cand.begin(), cand.end());
        for (auto i : cand) {
            mb.positions.push_back(i);
            mb.targets.push_back(in.ids[i]);
            const double r = u(rng);
            if (r < cfg.mask_token_share) {
                mb.batch.ids[i] = special::mask;
            } else if (r < cfg.mask_token_share + cfg.random_token_share) {
                mb.batch.ids[i] = random_tok(rng);
            }
        }
    }
    return mb;
}

struct PretrainResult {
    Checkpoint checkpoint;
    double masked_accuracy = 0.0;  // [MASK]-only evaluation over the corpus
    std::vector<double> epoch_loss;
};

/// Fresh checkpoint: vocabulary from the corpus, BERT-style initialization.
inline Checkpoint fresh_checkpoint(ModelConfig cfg, const std::vector<std::string>& corpus, std::size_t vocab_size, std::uint64_t seed,
                                   double init_std = 0.02) {
    Vocabulary vocab = build_vocab(corpus, vocab_size);
    cfg.vocab_size = vocab.size();
    EncoderModel<float> model(cfg);
    Rng rng(derive_seed(seed, "init"));
    model.init_weights(rng, init_std);
    return {std::move(model), std::move(vocab), nlohmann::json::object()};
}

/// Masked-token accuracy with every selected position replaced by [MASK].
inline double masked_token_accuracy(const EncoderModel<float>& model, std::span<const EncodedSequence> seqs, const PretrainConfig& cfg,
                                    std::uint64_t seed) {
    PretrainConfig eval_cfg = cfg;
    eval_cfg.mask_token_share = 1.0;
    eval_cfg.random_token_share = 0.0;
    Rng rng(derive_seed(seed, "mlm_eval"));
    std::size_t hit = 0, total = 0;
    for (std::size_t start = 0; start < seqs.size(); start += 64) {
        std::vector<std::size_t> rows(std::min<std::size_t>(64, seqs.size() - start));
        std::iota(rows.begin(), rows.end(), start);
        auto mb = mask_tokens(make_batch(seqs, rows), model.config().vocab_size, eval_cfg, rng);
        if (mb.positions.empty()) continue;
        auto pred = argmax_rows(mlm_logits(model, forward(model, mb.batch), mb.positions));
        for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == mb.targets[i];
        total += pred.size();
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

/// MLM pre-training of every parameter except the classification head.
inline PretrainResult pretrain_mlm(Checkpoint start, const std::vector<std::string>& corpus, const PretrainConfig& cfg) {
    if (corpus.empty()) throw ValidationError("pre-training corpus is empty");
    if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0)) throw ValidationError("invalid pre-training config");
    auto& model = start.model;
    const std::size_t max_len = std::min(cfg.max_seq_len, model.config().max_len);
    std::vector<EncodedSequence> seqs;
    for (const auto& line : corpus) seqs.push_back(encode(line, std::nullopt, start.vocab, max_len));

    std::vector<NamedTensor<float>*> trainable;
    for (auto& p : model.params())
        if (!p.name.starts_with("cls.")) trainable.push_back(&p);
    AdamState<float> adam;
    Rng shuffle_rng(derive_seed(cfg.seed, "mlm_shuffle"));
    Rng mask_rng(derive_seed(cfg.seed, "mlm_mask"));
    Rng dropout_rng(derive_seed(cfg.seed, "mlm_dropout"));
    std::vector<double> epoch_loss;
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(s),
                                          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + cfg.batch_size)));
            auto mb = mask_tokens(make_batch(seqs, rows), model.config().vocab_size, cfg, mask_rng);
            if (mb.positions.empty()) continue;
            for (auto* p : trainable) p->tensor.zero_grad();
            auto hidden = forward(model, mb.batch, ForwardContext::train(dropout_rng, model.config().dropout));
            auto loss = cross_entropy(mlm_logits(model, hidden, mb.positions), mb.targets);
            if (!std::isfinite(loss.item())) throw NonFiniteError("non-finite MLM loss in epoch " + std::to_string(epoch + 1));
            loss.backward();
            adam_step(trainable, adam, cfg.learning_rate);
            loss_sum += loss.item();
            ++batches;
        }
        epoch_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    }
    const double acc = masked_token_accuracy(model, seqs, cfg, cfg.seed);
    start.metadata["pretrain"] = cfg.to_json();
    start.metadata["masked_accuracy"] = acc;
    return {std::move(start), acc, std::move(epoch_loss)};
}

}  // namespace corruptlab
