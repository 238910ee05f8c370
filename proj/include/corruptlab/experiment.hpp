// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration, the corruption run matrix and the append-only
// results store.
#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "corruptlab/checkpoint.hpp"
#include "corruptlab/corruption.hpp"
#include "corruptlab/data.hpp"
#include "corruptlab/projection.hpp"
#include "corruptlab/report.hpp"
#include "corruptlab/training.hpp"

namespace corruptlab {

namespace fs = std::filesystem;

inline constexpr const char* results_schema = "corruptlab-results/1";

inline std::string resolve_path(const std::string& p, const std::string& base_dir) {
    if (p.empty() || base_dir.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(base_dir) / p).string();
}

/// Dataset from a source description:
///   {"synth": {...}}                               generated
///   {"path": "f.csv", "format": "csv|tsv|jsonl",   loaded; format defaults
///    "text_a": ..., "text_b": ..., "label": ...,   to the file extension
///    "labels": [...]}
inline LabeledDataset load_source(const nlohmann::json& src, const std::string& base_dir = {}) {
    if (src.contains("synth")) return synth_generate(src.at("synth").get<SynthSpec>());
    if (!src.contains("path")) throw ValidationError("dataset source needs 'synth' or 'path'");
    const auto path = resolve_path(src.at("path").get<std::string>(), base_dir);
    ColumnSchema schema;
    schema.text_a = src.value("text_a", schema.text_a);
    if (src.contains("text_b") && !src.at("text_b").is_null()) schema.text_b = src.at("text_b").get<std::string>();
    schema.label = src.value("label", schema.label);
    LabelMap labels;
    labels.names = src.value("labels", std::vector<std::string>{});
    std::string format = src.value("format", std::string());
    if (format.empty()) format = path.ends_with(".jsonl") ? "jsonl" : path.ends_with(".tsv") ? "tsv" : "csv";
    if (format == "jsonl") return load_jsonl(path, schema, labels);
    if (format == "tsv") return load_delimited(path, schema, labels, '\t');
    if (format == "csv") return load_delimited(path, schema, labels, ',');
    throw ValidationError("unknown dataset format '" + format + "' (csv|tsv|jsonl)");
}

struct DatasetConfig {
    std::string name;
    nlohmann::json spec;  // {"train": src, "test": src} or {"source": src, "train_size": n, "test_size": m}

    /// (train, test) with the optional truncation applied.
    std::pair<LabeledDataset, LabeledDataset> load(const std::string& base_dir) const {
        const std::uint64_t seed = spec.value("split_seed", std::uint64_t{0});
        const bool stratified = spec.value("stratified", true);
        if (spec.contains("source")) {
            auto ds = load_source(spec.at("source"), base_dir);
            return truncate_split(ds, spec.at("train_size").get<std::size_t>(), spec.at("test_size").get<std::size_t>(), seed, stratified);
        }
        if (!spec.contains("train") || !spec.contains("test")) throw ValidationError("dataset '" + name + "' needs train and test sources");
        auto train = load_source(spec.at("train"), base_dir);
        auto test = load_source(spec.at("test"), base_dir);
        train.split = "train";
        test.split = "test";
        if (spec.contains("train_size")) train = truncate_split(train, spec.at("train_size").get<std::size_t>(), 0, seed, stratified).first;
        if (spec.contains("test_size")) test = truncate_split(test, spec.at("test_size").get<std::size_t>(), 0, seed + 1, stratified).first;
        return {std::move(train), std::move(test)};
    }
};

struct ProjectionConfig {
    bool enabled = false;
    std::vector<double> fractions{0.0, 1.0};
    double perplexity = 30.0;
    std::size_t iterations = 1000;
};

struct ExperimentConfig {
    std::string name = "experiment";
    ModelConfig model = ModelConfig::preset("tiny");
    nlohmann::json pretrain = nlohmann::json::object();
    std::vector<DatasetConfig> datasets;
    std::vector<double> fractions{0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<Direction> directions{Direction::Bottom, Direction::Top};
    Pooling pooling = Pooling::Cls;
    bool mean_includes_sep = true;
    TrainMode mode = TrainMode::FullFineTune;
    std::vector<double> learning_rates = default_learning_rates;
    double lr_scale = 1.0;  // desk-scale multiplier applied to every learning rate
    std::vector<std::uint64_t> seeds{0};
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::size_t max_seq_len = 128;
    double validation_fraction = 0.0;
    bool include_embeddings = false;
    std::size_t workers = 1;
    ProjectionConfig projection;
    std::string output_dir;
    std::string base_dir;  // directory relative paths are resolved against

    std::vector<double> effective_learning_rates() const {
        std::vector<double> out;
        for (double lr : learning_rates) out.push_back(lr * lr_scale);
        return out;
    }

    TrainConfig train_config(std::uint64_t seed) const {
        TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.seed = seed;
        t.mode = mode;
        t.pooling = pooling;
        t.mean_includes_sep = mean_includes_sep;
        t.max_seq_len = max_seq_len;
        t.validation_fraction = validation_fraction;
        t.learning_rate = effective_learning_rates().front();
        return t;
    }

    void validate() const {
        model.validate();
        if (datasets.empty()) throw ValidationError("experiment lists no datasets");
        std::set<std::string> names;
        for (const auto& d : datasets)
            if (!names.insert(d.name).second) throw ValidationError("duplicate dataset name '" + d.name + "'");
        if (fractions.empty()) throw ValidationError("experiment lists no corruption fractions");
        bool partial = false;
        for (double f : fractions) {
            if (f < 0.0 || f > 1.0) throw ValidationError("corruption fraction " + std::to_string(f) + " outside [0, 1]");
            if (f > 0.0 && f < 1.0) {
                partial = true;
                layer_range(model.num_layers, f, Direction::Bottom);  // throws when not integral
            }
        }
        if (partial && directions.empty()) throw ValidationError("partial fractions need at least one direction");
        for (auto d : directions)
            if (d != Direction::Bottom && d != Direction::Top) throw ValidationError("directions must be bottom or top");
        if (learning_rates.empty()) throw ValidationError("experiment lists no learning rates");
        if (!(lr_scale > 0.0)) throw ValidationError("lr_scale must be positive");
        if (seeds.empty()) throw ValidationError("experiment lists no seeds");
        train_config(seeds.front()).validate();
        if (projection.enabled && projection.perplexity <= 0.0) throw ValidationError("projection perplexity must be positive");
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    std::vector<std::string> dirs;
    for (auto d : c.directions) dirs.push_back(to_string(d));
    nlohmann::json datasets = nlohmann::json::array();
    for (const auto& d : c.datasets) {
        auto e = d.spec;
        e["name"] = d.name;
        datasets.push_back(std::move(e));
    }
    j = nlohmann::json{{"name", c.name},
                       {"model", c.model},
                       {"pretrain", c.pretrain},
                       {"datasets", std::move(datasets)},
                       {"fractions", c.fractions},
                       {"directions", dirs},
                       {"pooling", to_string(c.pooling)},
                       {"mean_includes_sep", c.mean_includes_sep},
                       {"mode", to_string(c.mode)},
                       {"learning_rates", c.learning_rates},
                       {"lr_scale", c.lr_scale},
                       {"seeds", c.seeds},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"max_seq_len", c.max_seq_len},
                       {"validation_fraction", c.validation_fraction},
                       {"include_embeddings", c.include_embeddings},
                       {"workers", c.workers},
                       {"projection",
                        {{"enabled", c.projection.enabled},
                         {"fractions", c.projection.fractions},
                         {"perplexity", c.projection.perplexity},
                         {"iterations", c.projection.iterations}}},
                       {"output_dir", c.output_dir}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    static const std::set<std::string> known{"name",   "model",       "pretrain",   "datasets",   "fractions",           "directions",
                                             "pooling", "mean_includes_sep", "mode", "learning_rates", "lr_scale",     "seeds",
                                             "epochs", "batch_size",  "max_seq_len", "validation_fraction", "include_embeddings",
                                             "workers", "projection", "output_dir"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ValidationError("unknown experiment config key '" + k + "'");
    c.name = j.value("name", c.name);
    if (j.contains("model")) c.model = j.at("model").is_string() ? ModelConfig::preset(j.at("model").get<std::string>())
                                                                 : j.at("model").get<ModelConfig>();
    c.pretrain = j.value("pretrain", c.pretrain);
    c.datasets.clear();
    for (const auto& d : j.value("datasets", nlohmann::json::array())) {
        DatasetConfig dc{d.value("name", "dataset" + std::to_string(c.datasets.size())), d};
        dc.spec.erase("name");
        c.datasets.push_back(std::move(dc));
    }
    c.fractions = j.value("fractions", c.fractions);
    if (j.contains("directions")) {
        c.directions.clear();
        for (const auto& d : j.at("directions")) c.directions.push_back(parse_direction(d.get<std::string>()));
    }
    if (j.contains("pooling")) c.pooling = parse_pooling(j.at("pooling").get<std::string>());
    c.mean_includes_sep = j.value("mean_includes_sep", c.mean_includes_sep);
    if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
    c.learning_rates = j.value("learning_rates", c.learning_rates);
    c.lr_scale = j.value("lr_scale", c.lr_scale);
    c.seeds = j.value("seeds", c.seeds);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.include_embeddings = j.value("include_embeddings", c.include_embeddings);
    c.workers = j.value("workers", c.workers);
    if (j.contains("projection")) {
        const auto& p = j.at("projection");
        c.projection.enabled = p.value("enabled", true);
        c.projection.fractions = p.value("fractions", c.projection.fractions);
        c.projection.perplexity = p.value("perplexity", c.projection.perplexity);
        c.projection.iterations = p.value("iterations", c.projection.iterations);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config '" + path + "' is not valid JSON: " + e.what());
    }
    ExperimentConfig c;
    try {
        c = j.get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config '" + path + "': " + e.what());
    }
    c.base_dir = fs::absolute(path).parent_path().string();
    return c;
}

// ---------------------------------------------------------------------------
// Pre-training step

/// Corpus lines from {"synth": {...}} or {"path": "corpus.txt"} (one line
/// per sentence, blank lines skipped).
inline std::vector<std::string> load_corpus(const nlohmann::json& src, const std::string& base_dir = {}) {
    std::vector<std::string> out;
    if (src.contains("synth")) {
        for (const auto& e : synth_generate(src.at("synth").get<SynthSpec>()).examples) {
            out.push_back(e.text_a);
            if (e.text_b) out.push_back(*e.text_b);
        }
        return out;
    }
    if (!src.contains("path")) throw ValidationError("corpus needs 'synth' or 'path'");
    const auto path = resolve_path(src.at("path").get<std::string>(), base_dir);
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open corpus '" + path + "'");
    for (std::string line; std::getline(in, line);)
        if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(line);
    if (out.empty()) throw ValidationError("corpus '" + path + "' is empty");
    return out;
}

inline PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
    PretrainConfig p;
    p.epochs = j.value("epochs", p.epochs);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.learning_rate = j.value("learning_rate", p.learning_rate);
    p.seed = j.value("seed", p.seed);
    p.mask_rate = j.value("mask_rate", p.mask_rate);
    p.mask_token_share = j.value("mask_token_share", p.mask_token_share);
    p.random_token_share = j.value("random_token_share", p.random_token_share);
    p.max_seq_len = j.value("max_seq_len", p.max_seq_len);
    p.init_std = j.value("init_std", p.init_std);
    return p;
}

/// The pre-trained checkpoint of an experiment: loaded from
/// pretrain.checkpoint when given, otherwise trained and cached under
/// `<output_dir>/pretrained.ckpt` keyed by a fingerprint of the recipe.
inline Checkpoint obtain_pretrained(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    if (cfg.pretrain.contains("checkpoint")) {
        const auto path = resolve_path(cfg.pretrain.at("checkpoint").get<std::string>(), cfg.base_dir);
        // vocabulary size and class count come from the checkpoint and the data
        ModelConfig expected = cfg.model;
        {
            const auto stored = load_checkpoint(path).model.config();
            expected.vocab_size = stored.vocab_size;
            expected.num_classes = stored.num_classes;
        }
        return load_checkpoint(path, &expected);
    }
    if (!cfg.pretrain.contains("corpus")) throw ValidationError("pretrain needs either 'checkpoint' or 'corpus'");
    nlohmann::json recipe{{"model", cfg.model}, {"pretrain", cfg.pretrain}};
    const std::string fp = hex64(fnv1a(recipe.dump()));
    const auto corpus = load_corpus(cfg.pretrain.at("corpus"), cfg.base_dir);
    const std::string cache = cfg.output_dir.empty() ? std::string() : (fs::path(cfg.output_dir) / "pretrained.ckpt").string();
    if (!cache.empty() && fs::exists(cache)) {
        auto ck = load_checkpoint(cache);
        if (ck.metadata.value("pretrain_fingerprint", std::string()) == fp) return ck;
    }
    const auto pc = pretrain_config_from_json(cfg.pretrain);
    auto start = fresh_checkpoint(cfg.model, corpus, cfg.pretrain.value("vocab_size", std::size_t{1000}),
                                  cfg.pretrain.value("init_seed", std::uint64_t{0}), pc.init_std);
    if (log) *log << "pre-training " << cfg.model.name << " on " << corpus.size() << " sentences\n";
    auto r = pretrain_mlm(std::move(start), corpus, pc);
    r.checkpoint.metadata["pretrain_fingerprint"] = fp;
    if (log) *log << "masked-token accuracy " << r.masked_accuracy << '\n';
    if (!cache.empty()) {
        fs::create_directories(cfg.output_dir);
        save_checkpoint(r.checkpoint, cache);
    }
    return std::move(r.checkpoint);
}

// ---------------------------------------------------------------------------
// Run matrix

struct RunSpec {
    std::string dataset;
    double fraction = 0.0;
    Direction direction = Direction::None;
    std::uint64_t seed = 0;
};

/// Every (dataset, seed, fraction, direction) cell; 0% and 100% appear once
/// per (dataset, seed) whatever the direction list.
inline std::vector<RunSpec> enumerate_runs(const ExperimentConfig& cfg) {
    std::vector<double> fr = cfg.fractions;
    std::sort(fr.begin(), fr.end());
    fr.erase(std::unique(fr.begin(), fr.end()), fr.end());
    std::vector<RunSpec> out;
    for (const auto& d : cfg.datasets)
        for (auto seed : cfg.seeds)
            for (double f : fr) {
                if (f == 0.0) {
                    out.push_back({d.name, f, Direction::None, seed});
                } else if (f == 1.0) {
                    out.push_back({d.name, f, Direction::Full, seed});
                } else {
                    for (auto dir : cfg.directions) out.push_back({d.name, f, dir, seed});
                }
            }
    return out;
}

inline CorruptionSpec corruption_for(const RunSpec& r, const ExperimentConfig& cfg) {
    auto spec = CorruptionSpec::make(r.direction, r.fraction, r.seed);
    spec.include_embeddings = cfg.include_embeddings && r.fraction > 0.0;
    spec.resolve(cfg.model.num_layers);
    return spec;
}

/// Append-only JSON-lines store of run records. Every record carries the
/// schema tag and a fingerprint of everything that determines its metrics.
class ResultsStore {
public:
    explicit ResultsStore(std::string path) : path_(std::move(path)) {
        std::ifstream in(path_);
        if (!in) return;
        std::size_t line_no = 0;
        for (std::string line; std::getline(in, line);) {
            ++line_no;
            if (line.empty()) continue;
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError(path_ + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
            }
            if (rec.value("schema", std::string()) != results_schema) {
                throw ValidationError(path_ + ":" + std::to_string(line_no) + ": unsupported record schema '" +
                                      rec.value("schema", std::string()) + "'");
            }
            if (!fingerprints_.insert(rec.at("fingerprint").get<std::string>()).second) {
                throw ValidationError(path_ + ":" + std::to_string(line_no) + ": duplicate fingerprint");
            }
            records_.push_back(std::move(rec));
        }
    }

    const std::string& path() const { return path_; }
    const std::vector<nlohmann::json>& records() const { return records_; }
    bool contains(const std::string& fingerprint) const { return fingerprints_.count(fingerprint) > 0; }

    const nlohmann::json* find(const std::string& fingerprint) const {
        for (const auto& r : records_)
            if (r.at("fingerprint") == fingerprint) return &r;
        return nullptr;
    }

    /// Writes one record; a fingerprint already present is rejected.
    void append(nlohmann::json rec) {
        std::lock_guard lock(mutex_);
        rec["schema"] = results_schema;
        const auto fp = rec.at("fingerprint").get<std::string>();
        if (fingerprints_.count(fp)) throw ValidationError("results store already holds a record with fingerprint " + fp);
        if (auto parent = fs::path(path_).parent_path(); !parent.empty()) fs::create_directories(parent);
        std::ofstream out(path_, std::ios::app);
        if (!out) throw Error("cannot append to results store '" + path_ + "'");
        out << rec.dump() << '\n';
        if (!out) throw Error("failed writing results store '" + path_ + "'");
        fingerprints_.insert(fp);
        records_.push_back(std::move(rec));
    }

private:
    std::string path_;
    std::vector<nlohmann::json> records_;
    std::set<std::string> fingerprints_;
    std::mutex mutex_;
};

inline nlohmann::json run_result_json(const RunResult& r) {
    return {{"learning_rate", r.learning_rate},
            {"history", r.history},
            {"test_history", r.test_history},
            {"train_loss", r.train_loss},
            {"best_f1", r.best_f1},
            {"best_epoch", r.best_epoch},
            {"reported_f1", r.reported_f1()},
            {"aborted", r.aborted},
            {"abort_reason", r.abort_reason},
            {"outlier", r.outlier},
            {"outlier_reason", r.outlier_reason},
            {"config_fingerprint", r.config_fingerprint},
            {"wall_clock_seconds", r.wall_clock_seconds}};
}

inline std::string run_label(const RunSpec& r) {
    std::string dir = r.fraction == 0.0 ? "none" : r.fraction == 1.0 ? "full" : to_string(r.direction);
    return r.dataset + "_s" + std::to_string(r.seed) + "_" + std::to_string(static_cast<int>(std::lround(r.fraction * 100))) + "_" + dir;
}

struct MatrixOutcome {
    std::vector<nlohmann::json> records;  // one per run, in enumeration order
    std::size_t executed = 0;             // runs trained now (the rest came from the store)
    std::string results_path;
};

/// Corrupts, trains (sweeping learning rates) and records every cell of the
/// matrix. Cells already in the results store are reused, not rerun. A run
/// that throws is recorded as an aborted outlier and the matrix continues.
inline MatrixOutcome run_matrix(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    if (cfg.output_dir.empty()) throw ValidationError("experiment needs an output directory");
    fs::create_directories(cfg.output_dir);
    const Checkpoint base = obtain_pretrained(cfg, log);
    if (!(base.model.config().num_layers == cfg.model.num_layers && base.model.config().hidden == cfg.model.hidden)) {
        throw ValidationError("pre-trained checkpoint does not match the experiment's model config");
    }
    const std::string base_checksum = hex64(encoder_checksum(base.model));

    std::map<std::string, std::pair<LabeledDataset, LabeledDataset>> data;
    for (const auto& d : cfg.datasets) data.emplace(d.name, d.load(cfg.base_dir));

    ResultsStore store((fs::path(cfg.output_dir) / "results.jsonl").string());
    const auto runs = enumerate_runs(cfg);
    const auto lrs = cfg.effective_learning_rates();
    MatrixOutcome outcome;
    outcome.results_path = store.path();
    outcome.records.resize(runs.size());
    std::mutex log_mutex;
    std::atomic<std::size_t> executed{0};

    auto fingerprint_of = [&](const RunSpec& r, const CorruptionSpec& spec) {
        const auto& [train, test] = data.at(r.dataset);
        auto tc = cfg.train_config(r.seed);
        tc.learning_rate = 0.0;  // the sweep list is hashed separately
        nlohmann::json id{{"checkpoint", base_checksum},
                          {"model", cfg.model},
                          {"dataset", r.dataset},
                          {"train", train.provenance},
                          {"test", test.provenance},
                          {"corruption", spec.fingerprint()},
                          {"train_config", tc.to_json()},
                          {"learning_rates", lrs},
                          {"projection", cfg.projection.enabled}};
        return hex64(fnv1a(id.dump()));
    };

    parallel_for(runs.size(), cfg.workers, [&](std::size_t i) {
        const RunSpec& r = runs[i];
        const auto spec = corruption_for(r, cfg);
        const auto fp = fingerprint_of(r, spec);
        if (const auto* existing = store.find(fp)) {
            outcome.records[i] = *existing;
            return;
        }
        const auto& [train, test] = data.at(r.dataset);
        const bool project =
            cfg.projection.enabled && std::find(cfg.projection.fractions.begin(), cfg.projection.fractions.end(), r.fraction) !=
                                          cfg.projection.fractions.end();
        nlohmann::json rec{{"fingerprint", fp},
                           {"experiment", cfg.name},
                           {"dataset", r.dataset},
                           {"model", cfg.model.name},
                           {"num_layers", cfg.model.num_layers},
                           {"fraction", r.fraction},
                           {"direction", to_string(r.direction)},
                           {"layers", layer_count_label(cfg.model.num_layers, r.fraction)},
                           {"seed", r.seed},
                           {"mode", to_string(cfg.mode)},
                           {"pooling", to_string(cfg.pooling)},
                           {"checkpoint_checksum", base_checksum},
                           {"corruption", spec},
                           {"corruption_fingerprint", spec.fingerprint()},
                           {"config", cfg.train_config(r.seed).to_json()},
                           {"learning_rates", lrs}};
        try {
            Checkpoint ck = base;
            if (r.fraction > 0.0) {
                auto [model, manifest] = corrupt(base.model, spec);
                ck.model = std::move(model);
            }
            ck.metadata["corruption_fingerprint"] = spec.fingerprint();
            auto sweep = lr_sweep(ck, train, test, cfg.train_config(r.seed), lrs, 1, project);
            nlohmann::json sweep_json = nlohmann::json::array();
            for (const auto& run : sweep.runs) sweep_json.push_back(run_result_json(run));
            const auto& best = sweep.best_run();
            rec["sweep"] = std::move(sweep_json);
            rec["best_lr"] = best.learning_rate;
            rec["best_f1"] = best.reported_f1();
            rec["best_epoch"] = best.best_epoch;
            rec["history"] = best.test_history;
            rec["aborted"] = best.aborted;
            rec["outlier"] = best.outlier;
            rec["outlier_reason"] = best.outlier_reason;
            rec["majority_baseline"] = best.majority_baseline;
            if (project) {
                auto feats = extract_features(*sweep.best_model, base.vocab, test, cfg.pooling, PoolOptions{cfg.mean_includes_sep},
                                              cfg.max_seq_len);
                TsneOptions topt;
                topt.perplexity = cfg.projection.perplexity;
                topt.iterations = cfg.projection.iterations;
                topt.seed = r.seed;
                auto proj = tsne(feats, topt);
                const auto dir = fs::path(cfg.output_dir) / "projections";
                fs::create_directories(dir);
                const auto csv = (dir / (run_label(r) + ".csv")).string();
                write_text_file(csv, projection_csv(proj, test.label_names));
                rec["projection"] = {{"silhouette", silhouette(proj)},
                                     {"initial_kl", proj.initial_kl},
                                     {"final_kl", proj.final_kl},
                                     {"perplexity", proj.perplexity},
                                     {"iterations", proj.iterations},
                                     {"csv", fs::relative(csv, cfg.output_dir).string()}};
            }
        } catch (const std::exception& e) {
            rec["sweep"] = nlohmann::json::array();
            rec["best_f1"] = 0.0;
            rec["best_epoch"] = 0;
            rec["history"] = nlohmann::json::array();
            rec["aborted"] = true;
            rec["outlier"] = true;
            rec["outlier_reason"] = std::string("run failed: ") + e.what();
        }
        rec["schema"] = results_schema;
        store.append(rec);
        ++executed;
        {
            std::lock_guard lock(log_mutex);
            if (log) {
                *log << run_label(r) << " best F1 " << rec["best_f1"].get<double>();
                if (rec["outlier"].get<bool>()) *log << " [outlier: " << rec["outlier_reason"].get<std::string>() << "]";
                *log << '\n';
            }
        }
        outcome.records[i] = std::move(rec);
    });
    outcome.executed = executed;
    if (cfg.projection.enabled) write_projection_figures(outcome.records, cfg.output_dir);
    return outcome;
}

/// Metrics of a record with timing removed, for reproducibility checks.
inline nlohmann::json record_metrics(nlohmann::json rec) {
    for (auto& run : rec["sweep"]) run.erase("wall_clock_seconds");
    return rec;
}

}  // namespace corruptlab
