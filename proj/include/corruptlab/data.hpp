// SPDX-License-Identifier: Apache-2.0
//
// Labeled datasets: delimited/JSONL ingestion, seeded splitting and a
// keyword-topic generator for desk-scale experiments.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "corruptlab/error.hpp"
#include "corruptlab/rng.hpp"

namespace corruptlab {

struct Example {
    std::string text_a;
    std::optional<std::string> text_b;
    std::int32_t label = 0;
};

struct LabeledDataset {
    std::vector<Example> examples;
    std::vector<std::string> label_names;
    std::string split = "train";
    std::string provenance;

    std::size_t size() const { return examples.size(); }
    std::size_t num_classes() const { return label_names.size(); }
    bool is_pair() const { return !examples.empty() && examples.front().text_b.has_value(); }

    std::vector<std::int32_t> labels() const {
        std::vector<std::int32_t> out;
        out.reserve(examples.size());
        for (const auto& e : examples) out.push_back(e.label);
        return out;
    }

    void validate() const {
        for (std::size_t i = 0; i < examples.size(); ++i) {
            const auto& e = examples[i];
            if (e.label < 0 || static_cast<std::size_t>(e.label) >= label_names.size()) {
                throw ValidationError("example " + std::to_string(i) + " has label id outside the label set");
            }
            if (e.text_a.empty()) throw ValidationError("example " + std::to_string(i) + " has empty text");
        }
    }
};

struct ClassStats {
    std::vector<std::size_t> support;
    bool balanced = true;  // max/min support <= 1.5
};

inline ClassStats class_stats(const LabeledDataset& ds) {
    if (ds.examples.empty()) throw ValidationError("class_stats on an empty dataset");
    ClassStats s;
    s.support.assign(ds.num_classes(), 0);
    for (const auto& e : ds.examples) ++s.support.at(static_cast<std::size_t>(e.label));
    auto [mn, mx] = std::minmax_element(s.support.begin(), s.support.end());
    s.balanced = *mn > 0 && static_cast<double>(*mx) / static_cast<double>(*mn) <= 1.5;
    return s;
}

struct ColumnSchema {
    std::string text_a = "text";
    std::optional<std::string> text_b;
    std::string label = "label";
};

/// Known label names in id order. With `extend` set, unseen labels are
/// appended; otherwise they are an error. An empty map discovers labels and
/// numbers them in sorted order.
struct LabelMap {
    std::vector<std::string> names;
    bool extend = false;
};

namespace detail {

/// Splits one physical record of RFC-4180-style delimited text. Returns false
/// when a quoted field continues past the end of `line`.
inline bool split_delimited(const std::string& line, char delim, std::vector<std::string>& fields, std::string& cur,
                            bool& in_quotes) {
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"' && cur.empty()) {
            in_quotes = true;
        } else if (c == delim) {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    if (in_quotes) {
        cur.push_back('\n');
        return false;
    }
    fields.push_back(std::move(cur));
    cur.clear();
    return true;
}

inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_delimited(std::istream& in, char delim) {
    std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
    std::string line, cur;
    std::vector<std::string> fields;
    bool in_quotes = false;
    std::size_t line_no = 0, record_start = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (fields.empty() && cur.empty() && !in_quotes) {
            record_start = line_no;
            if (line.empty() || line == "\r") continue;
        }
        if (split_delimited(line, delim, fields, cur, in_quotes)) {
            rows.emplace_back(record_start, std::move(fields));
            fields.clear();
        }
    }
    if (in_quotes) throw ValidationError("unterminated quoted field starting at line " + std::to_string(record_start));
    return rows;
}

inline std::int32_t resolve_label(const std::string& raw, LabelMap& map, bool discovering, std::size_t line) {
    auto it = std::find(map.names.begin(), map.names.end(), raw);
    if (it != map.names.end()) return static_cast<std::int32_t>(it - map.names.begin());
    if (!discovering && !map.extend) {
        throw ValidationError("line " + std::to_string(line) + ": unknown label '" + raw + "'");
    }
    map.names.push_back(raw);
    return static_cast<std::int32_t>(map.names.size() - 1);
}

/// Renumbers discovered labels into sorted order.
inline void sort_discovered_labels(LabeledDataset& ds) {
    std::vector<std::string> sorted = ds.label_names;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::int32_t> remap(ds.label_names.size());
    for (std::size_t i = 0; i < ds.label_names.size(); ++i) {
        remap[i] = static_cast<std::int32_t>(std::find(sorted.begin(), sorted.end(), ds.label_names[i]) - sorted.begin());
    }
    for (auto& e : ds.examples) e.label = remap[static_cast<std::size_t>(e.label)];
    ds.label_names = std::move(sorted);
}

}  // namespace detail

/// Delimited text with a header row. The delimiter is tab for .tsv files and
/// comma otherwise unless given explicitly.
inline LabeledDataset load_delimited(const std::string& path, const ColumnSchema& schema, LabelMap labels = {},
                                     std::optional<char> delimiter = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open dataset file '" + path + "'");
    const char delim = delimiter.value_or(path.ends_with(".tsv") ? '\t' : ',');
    auto rows = detail::read_delimited(in, delim);
    if (rows.empty()) throw ValidationError("'" + path + "' has no header row");

    const auto& header = rows.front().second;
    auto column = [&](const std::string& name) -> std::size_t {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ValidationError("'" + path + "' has no column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t ca = column(schema.text_a);
    const std::size_t cl = column(schema.label);
    const std::optional<std::size_t> cb = schema.text_b ? std::optional(column(*schema.text_b)) : std::nullopt;

    const bool discovering = labels.names.empty();
    LabeledDataset ds;
    ds.provenance = path;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& [line, fields] = rows[r];
        if (fields.size() != header.size()) {
            throw ValidationError("line " + std::to_string(line) + ": expected " + std::to_string(header.size()) + " fields, found " +
                                  std::to_string(fields.size()));
        }
        Example e;
        e.text_a = fields[ca];
        if (e.text_a.find_first_not_of(" \t") == std::string::npos) {
            throw ValidationError("line " + std::to_string(line) + ": empty text");
        }
        if (cb) e.text_b = fields[*cb];
        e.label = detail::resolve_label(fields[cl], labels, discovering, line);
        ds.examples.push_back(std::move(e));
    }
    ds.label_names = std::move(labels.names);
    if (discovering) detail::sort_discovered_labels(ds);
    ds.validate();
    return ds;
}

/// One JSON object per line with the schema's keys; labels may be strings or
/// integers (integers are used as label names verbatim).
inline LabeledDataset load_jsonl(const std::string& path, const ColumnSchema& schema, LabelMap labels = {}) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open dataset file '" + path + "'");
    const bool discovering = labels.names.empty();
    LabeledDataset ds;
    ds.provenance = path;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& err) {
            throw ValidationError("line " + std::to_string(line_no) + ": malformed JSON (" + err.what() + ")");
        }
        auto field = [&](const std::string& key) -> std::string {
            if (!j.contains(key)) throw ValidationError("line " + std::to_string(line_no) + ": missing key '" + key + "'");
            const auto& v = j.at(key);
            return v.is_string() ? v.get<std::string>() : v.dump();
        };
        Example e;
        e.text_a = field(schema.text_a);
        if (e.text_a.find_first_not_of(" \t") == std::string::npos) throw ValidationError("line " + std::to_string(line_no) + ": empty text");
        if (schema.text_b) e.text_b = field(*schema.text_b);
        e.label = detail::resolve_label(field(schema.label), labels, discovering, line_no);
        ds.examples.push_back(std::move(e));
    }
    ds.label_names = std::move(labels.names);
    if (discovering) detail::sort_discovered_labels(ds);
    ds.validate();
    return ds;
}

/// Seeded disjoint train/test subsets of exact sizes. Stratified mode
/// allocates each class its proportional share (largest remainder).
inline std::pair<LabeledDataset, LabeledDataset> truncate_split(const LabeledDataset& ds, std::size_t train_n, std::size_t test_n,
                                                                std::uint64_t seed, bool stratified) {
    if (train_n + test_n > ds.size()) {
        throw ValidationError("requested " + std::to_string(train_n) + "+" + std::to_string(test_n) + " examples from a dataset of " +
                              std::to_string(ds.size()));
    }
    Rng rng(derive_seed(seed, "truncate_split"));
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::size_t> train_idx, test_idx;
    if (!stratified) {
        train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_n));
        test_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(train_n),
                        order.begin() + static_cast<std::ptrdiff_t>(train_n + test_n));
    } else {
        const std::size_t C = ds.num_classes();
        std::vector<std::vector<std::size_t>> by_class(C);
        for (auto i : order) by_class[static_cast<std::size_t>(ds.examples[i].label)].push_back(i);
        auto quotas = [&](std::size_t total) {
            std::vector<std::size_t> q(C);
            std::vector<std::pair<double, std::size_t>> rem;
            std::size_t assigned = 0;
            for (std::size_t c = 0; c < C; ++c) {
                double exact = static_cast<double>(total) * static_cast<double>(by_class[c].size()) / static_cast<double>(ds.size());
                q[c] = static_cast<std::size_t>(exact);
                assigned += q[c];
                rem.emplace_back(exact - static_cast<double>(q[c]), c);
            }
            std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
            for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++q[rem[i % C].second];
            return q;
        };
        auto train_q = quotas(train_n);
        auto test_q = quotas(test_n);
        for (std::size_t c = 0; c < C; ++c) {
            if (train_q[c] + test_q[c] > by_class[c].size()) {
                throw ValidationError("class '" + ds.label_names[c] + "' has " + std::to_string(by_class[c].size()) +
                                      " examples, stratified split needs " + std::to_string(train_q[c] + test_q[c]));
            }
            for (std::size_t i = 0; i < train_q[c]; ++i) train_idx.push_back(by_class[c][i]);
            for (std::size_t i = 0; i < test_q[c]; ++i) test_idx.push_back(by_class[c][train_q[c] + i]);
        }
        // interleave classes again so minibatches are mixed
        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        std::shuffle(test_idx.begin(), test_idx.end(), rng);
    }

    auto subset = [&](const std::vector<std::size_t>& idx, const char* split) {
        LabeledDataset out;
        out.label_names = ds.label_names;
        out.split = split;
        out.provenance = ds.provenance + " | split seed " + std::to_string(seed);
        for (auto i : idx) out.examples.push_back(ds.examples[i]);
        return out;
    };
    return {subset(train_idx, "train"), subset(test_idx, "test")};
}

/// Keyword-topic generator. Each example is a shuffled bag of `length`
/// tokens: with probability `noise_rate` a shared noise word, otherwise a
/// keyword of the example's class. At least one class keyword is always
/// present, so the keyword-count classifier is perfect by construction.
struct SynthSpec {
    std::size_t num_classes = 4;
    std::vector<std::vector<std::string>> keywords;  // generated when empty
    std::size_t keywords_per_class = 24;
    std::size_t keyword_offset = 0;  // index of the first generated keyword
    std::size_t noise_vocab = 32;
    std::vector<std::string> noise_words;  // generated when empty
    std::size_t examples_per_class = 50;
    std::size_t length = 8;
    double noise_rate = 0.5;
    bool pair = false;  // label = whether text_a and text_b share a topic
    std::uint64_t seed = 0;

    std::vector<std::vector<std::string>> resolved_keywords() const {
        if (!keywords.empty()) return keywords;
        std::vector<std::vector<std::string>> out(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c)
            for (std::size_t j = keyword_offset; j < keyword_offset + keywords_per_class; ++j)
                out[c].push_back("kw" + std::to_string(c) + "x" + std::to_string(j));
        return out;
    }

    std::vector<std::string> resolved_noise() const {
        if (!noise_words.empty()) return noise_words;
        std::vector<std::string> out;
        for (std::size_t j = 0; j < noise_vocab; ++j) out.push_back("nz" + std::to_string(j));
        return out;
    }
};

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
    s.num_classes = j.value("num_classes", s.num_classes);
    s.keywords = j.value("keywords", s.keywords);
    s.keywords_per_class = j.value("keywords_per_class", s.keywords_per_class);
    s.keyword_offset = j.value("keyword_offset", s.keyword_offset);
    s.noise_vocab = j.value("noise_vocab", s.noise_vocab);
    s.noise_words = j.value("noise_words", s.noise_words);
    s.examples_per_class = j.value("examples_per_class", s.examples_per_class);
    s.length = j.value("length", s.length);
    s.noise_rate = j.value("noise_rate", s.noise_rate);
    s.pair = j.value("pair", s.pair);
    s.seed = j.value("seed", s.seed);
}

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
    j = nlohmann::json{{"num_classes", s.num_classes}, {"keywords_per_class", s.keywords_per_class}, {"keyword_offset", s.keyword_offset},
                       {"noise_vocab", s.noise_vocab},
                       {"examples_per_class", s.examples_per_class}, {"length", s.length}, {"noise_rate", s.noise_rate},
                       {"pair", s.pair}, {"seed", s.seed}};
    if (!s.keywords.empty()) j["keywords"] = s.keywords;
    if (!s.noise_words.empty()) j["noise_words"] = s.noise_words;
}

namespace detail {

inline std::string synth_sentence(const std::vector<std::string>& kws, const std::vector<std::string>& noise, std::size_t length,
                                  double noise_rate, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick_kw(0, kws.size() - 1);
    std::vector<std::string> toks;
    toks.push_back(kws[pick_kw(rng)]);
    for (std::size_t t = 1; t < length; ++t) {
        if (!noise.empty() && u(rng) < noise_rate) {
            toks.push_back(noise[std::uniform_int_distribution<std::size_t>(0, noise.size() - 1)(rng)]);
        } else {
            toks.push_back(kws[pick_kw(rng)]);
        }
    }
    std::shuffle(toks.begin(), toks.end(), rng);
    std::string s;
    for (const auto& t : toks) s += (s.empty() ? "" : " ") + t;
    return s;
}

}  // namespace detail

inline LabeledDataset synth_generate(const SynthSpec& spec) {
    if (spec.num_classes < 1) throw ValidationError("synthetic dataset needs at least one class");
    if (spec.length < 1) throw ValidationError("synthetic examples need at least one token");
    if (spec.noise_rate < 0.0 || spec.noise_rate >= 1.0) throw ValidationError("noise rate must lie in [0, 1)");
    auto kws = spec.resolved_keywords();
    auto noise = spec.resolved_noise();
    if (kws.size() != spec.num_classes) throw ValidationError("keyword sets do not match num_classes");
    std::set<std::string> seen;
    for (const auto& set : kws) {
        if (set.empty()) throw ValidationError("empty keyword set");
        for (const auto& w : set)
            if (!seen.insert(w).second) throw ValidationError("keyword '" + w + "' appears in more than one class");
    }
    for (const auto& w : noise)
        if (seen.count(w)) throw ValidationError("noise word '" + w + "' is also a class keyword");

    Rng rng(derive_seed(spec.seed, "synth_generate"));
    LabeledDataset ds;
    ds.provenance = "synth:" + nlohmann::json(spec).dump();
    if (!spec.pair) {
        for (std::size_t c = 0; c < spec.num_classes; ++c) ds.label_names.push_back("class" + std::to_string(c));
        for (std::size_t i = 0; i < spec.examples_per_class; ++i)
            for (std::size_t c = 0; c < spec.num_classes; ++c)
                ds.examples.push_back({detail::synth_sentence(kws[c], noise, spec.length, spec.noise_rate, rng), std::nullopt,
                                       static_cast<std::int32_t>(c)});
    } else {
        if (spec.num_classes < 2) throw ValidationError("pair mode needs at least two topics");
        ds.label_names = {"different", "same"};
        std::uniform_int_distribution<std::size_t> topic(0, spec.num_classes - 1);
        for (std::size_t i = 0; i < spec.examples_per_class; ++i)
            for (std::int32_t label = 0; label < 2; ++label) {
                std::size_t ta = topic(rng);
                std::size_t tb = ta;
                if (label == 0) tb = (ta + 1 + std::uniform_int_distribution<std::size_t>(0, spec.num_classes - 2)(rng)) % spec.num_classes;
                auto a = detail::synth_sentence(kws[ta], noise, spec.length, spec.noise_rate, rng);
                auto b = detail::synth_sentence(kws[tb], noise, spec.length, spec.noise_rate, rng);
                ds.examples.push_back({std::move(a), std::move(b), label});
            }
    }
    ds.validate();
    return ds;
}

}  // namespace corruptlab
