// SPDX-License-Identifier: Apache-2.0
//
// Word-level vocabulary and [CLS]/[SEP] sequence encoding.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "corruptlab/error.hpp"

namespace corruptlab {

namespace special {
inline constexpr std::int32_t pad = 0;
inline constexpr std::int32_t unk = 1;
inline constexpr std::int32_t cls = 2;
inline constexpr std::int32_t sep = 3;
inline constexpr std::int32_t mask = 4;
inline constexpr std::int32_t count = 5;
}  // namespace special

/// Lowercases and splits on whitespace; each ASCII punctuation character
/// becomes its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char ch : text) {
        auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (c < 0x80 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, ch);
        } else {
            cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
        }
    }
    flush();
    return out;
}

class Vocabulary {
public:
    Vocabulary() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"} { reindex(); }

    /// Rebuilds a vocabulary from its id-ordered token list (e.g. a checkpoint).
    static Vocabulary from_tokens(std::vector<std::string> tokens) {
        Vocabulary v;
        if (tokens.size() < static_cast<std::size_t>(special::count) ||
            !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
            throw ValidationError("vocabulary must start with [PAD],[UNK],[CLS],[SEP],[MASK]");
        }
        v.tokens_ = std::move(tokens);
        v.reindex();
        if (v.index_.size() != v.tokens_.size()) throw ValidationError("vocabulary contains duplicate tokens");
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    std::int32_t id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? special::unk : it->second;
    }

    bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

private:
    friend Vocabulary build_vocab(const std::vector<std::string>&, std::size_t);

    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

/// Keeps the (size - 5) most frequent tokens after the reserved ones; ties go
/// to the lexicographically smaller token.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t size) {
    if (size < 6) throw ValidationError("vocabulary size must be at least 6");
    std::map<std::string, std::size_t> freq;
    for (const auto& line : corpus)
        for (auto& tok : tokenize(line)) ++freq[tok];
    if (freq.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");

    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : ranked) {
        if (v.tokens_.size() >= size) break;
        if (v.index_.count(tok)) continue;  // literal "[PAD]" etc. in the corpus
        v.tokens_.push_back(tok);
        v.index_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size() - 1));
    }
    return v;
}

struct EncodedSequence {
    std::vector<std::int32_t> ids;
    std::vector<std::int32_t> segments;
    std::vector<std::uint8_t> mask;
};

/// [CLS] a… [SEP] (b… [SEP]) truncated to max_len and padded with [PAD].
/// Pair truncation trims the longer side first.
inline EncodedSequence encode(std::string_view text_a, const std::optional<std::string>& text_b,
                              const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 3) throw ValidationError("max_len must be at least 3");
    auto to_ids = [&](std::string_view s) {
        std::vector<std::int32_t> ids;
        for (const auto& t : tokenize(s)) ids.push_back(vocab.id(t));
        return ids;
    };
    auto a = to_ids(text_a);
    std::vector<std::int32_t> b;
    std::size_t budget = max_len - 2;
    if (text_b) {
        b = to_ids(*text_b);
        budget = max_len >= 4 ? max_len - 3 : 0;
        while (a.size() + b.size() > budget) {
            if (a.size() >= b.size()) a.pop_back();
            else b.pop_back();
        }
    } else if (a.size() > budget) {
        a.resize(budget);
    }

    EncodedSequence e;
    e.ids.push_back(special::cls);
    e.ids.insert(e.ids.end(), a.begin(), a.end());
    e.ids.push_back(special::sep);
    e.segments.assign(e.ids.size(), 0);
    if (text_b && max_len >= 4) {
        e.ids.insert(e.ids.end(), b.begin(), b.end());
        e.ids.push_back(special::sep);
        e.segments.resize(e.ids.size(), 1);
    }
    e.mask.assign(e.ids.size(), 1);
    e.ids.resize(max_len, special::pad);
    e.segments.resize(max_len, 0);
    e.mask.resize(max_len, 0);
    return e;
}

}  // namespace corruptlab
