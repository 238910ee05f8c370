// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   bytes 0..7    magic "CLABCKPT"
//   bytes 8..11   format version, u32 little-endian
//   bytes 12..19  header length in bytes, u64 little-endian
//   header        UTF-8 JSON: model config, vocabulary, metadata and the
//                 tensor manifest (name, dtype, shape, byte offset, nbytes)
//   payload       little-endian IEEE-754 float32 values, tensors back to
//                 back in manifest order
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "corruptlab/model.hpp"
#include "corruptlab/vocab.hpp"

namespace corruptlab {

inline constexpr char checkpoint_magic[8] = {'C', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

/// A float32 model together with the vocabulary it was trained with.
struct Checkpoint {
    EncoderModel<float> model;
    Vocabulary vocab;
    nlohmann::json metadata = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"name", c.name},       {"num_layers", c.num_layers}, {"hidden", c.hidden},
                       {"heads", c.heads},     {"ffn_multiplier", c.ffn_multiplier}, {"max_len", c.max_len},
                       {"vocab_size", c.vocab_size}, {"num_classes", c.num_classes}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    if (j.contains("preset")) d = ModelConfig::preset(j.at("preset").get<std::string>());
    c.name = j.value("name", d.name);
    c.num_layers = j.value("num_layers", d.num_layers);
    c.hidden = j.value("hidden", d.hidden);
    c.heads = j.value("heads", d.heads);
    c.ffn_multiplier = j.value("ffn_multiplier", d.ffn_multiplier);
    c.max_len = j.value("max_len", d.max_len);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.dropout = j.value("dropout", d.dropout);
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

}  // namespace detail

/// Serialized container bytes.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : ck.model.params()) {
        const std::uint64_t nbytes = p.tensor.numel() * 4;
        tensors.push_back({{"name", p.name}, {"dtype", "f32"}, {"shape", p.tensor.shape()}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    }
    nlohmann::json header{{"format_version", checkpoint_version}, {"model_config", ck.model.config()},
                          {"vocab", ck.vocab.tokens()},             {"metadata", ck.metadata},
                          {"tensors", std::move(tensors)},         {"payload_bytes", offset}};
    const std::string text = header.dump();

    std::string out(checkpoint_magic, sizeof checkpoint_magic);
    detail::put_u32(out, checkpoint_version);
    detail::put_u64(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& p : ck.model.params())
        for (float v : p.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write checkpoint '" + path + "'");
    const std::string bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

/// Parses container bytes. When `expected` is given, the stored architecture
/// must match it tensor for tensor.
inline Checkpoint deserialize_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr) {
    if (bytes.size() < 20 || std::memcmp(bytes.data(), checkpoint_magic, sizeof checkpoint_magic) != 0) {
        throw ValidationError("not a checkpoint (bad magic)");
    }
    const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
    if (version != checkpoint_version) {
        throw ValidationError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(checkpoint_version) + ")");
    }
    const auto header_len = detail::get_le(bytes, 12, 8);
    if (header_len > bytes.size() - 20) throw ValidationError("truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(20, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("corrupt checkpoint header: ") + e.what());
    }
    const auto cfg = header.at("model_config").get<ModelConfig>();
    const auto census = parameter_census(cfg);
    const auto& tensors = header.at("tensors");
    const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    const std::size_t payload_start = 20 + header_len;
    if (bytes.size() - payload_start != payload_bytes) {
        throw ValidationError("truncated checkpoint payload: expected " + std::to_string(payload_bytes) + " bytes, found " +
                              std::to_string(bytes.size() - payload_start));
    }

    if (expected) {
        auto want = parameter_census(*expected);
        for (std::size_t i = 0; i < std::max(want.size(), census.size()); ++i) {
            if (i >= want.size() || i >= census.size() || want[i].name != census[i].name || want[i].shape != census[i].shape) {
                const auto& name = i < census.size() ? census[i].name : want[i].name;
                throw ValidationError("checkpoint does not match expected model config at tensor '" + name + "'");
            }
        }
    }
    if (tensors.size() != census.size()) throw ValidationError("checkpoint manifest lists " + std::to_string(tensors.size()) +
                                                               " tensors, config implies " + std::to_string(census.size()));

    Checkpoint ck{EncoderModel<float>(cfg), Vocabulary::from_tokens(header.at("vocab").get<std::vector<std::string>>()),
                  header.value("metadata", nlohmann::json::object())};
    if (ck.vocab.size() != cfg.vocab_size) throw ValidationError("checkpoint vocabulary size disagrees with its config");
    std::uint64_t expected_offset = 0;
    for (std::size_t i = 0; i < census.size(); ++i) {
        const auto& t = tensors[i];
        const auto name = t.at("name").get<std::string>();
        const auto shape = t.at("shape").get<Shape>();
        if (name != census[i].name || shape != census[i].shape) {
            throw ValidationError("manifest/config disagreement at tensor '" + name + "'");
        }
        if (t.at("dtype").get<std::string>() != "f32") throw ValidationError("tensor '" + name + "' has unsupported dtype");
        const auto offset = t.at("offset").get<std::uint64_t>();
        const auto nbytes = t.at("nbytes").get<std::uint64_t>();
        if (offset != expected_offset || nbytes != shape_numel(shape) * 4) {
            throw ValidationError("tensor '" + name + "' has an inconsistent offset or size");
        }
        expected_offset += nbytes;
        auto dst = ck.model.params()[i].tensor.data();
        for (std::size_t j = 0; j < dst.size(); ++j) {
            dst[j] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, payload_start + offset + 4 * j, 4)));
        }
    }
    if (expected_offset != payload_bytes) throw ValidationError("manifest does not cover the payload");
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str(), expected);
}

/// FNV-1a over the raw bytes of the selected parameters.
template <typename Pred>
std::uint64_t parameter_checksum(const EncoderModel<float>& model, Pred&& include) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : model.params()) {
        if (!include(p.name)) continue;
        h = fnv1a(p.name, h);
        auto d = p.tensor.data();
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size_bytes()), h);
    }
    return h;
}

inline std::uint64_t encoder_checksum(const EncoderModel<float>& model) {
    return parameter_checksum(model, [](const std::string& n) { return !is_head_param(n); });
}

}  // namespace corruptlab
