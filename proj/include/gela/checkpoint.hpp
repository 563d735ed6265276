#pragma once

// Checkpoint container: a little-endian uint64 header length, a JSON header
// naming every array (name, shape, byte offset into the payload), then the
// flat payload of 64-bit float arrays. Version field "gela-ckpt-1".

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gela/error.hpp"
#include "gela/model.hpp"

namespace gela::model {

inline constexpr const char* kCheckpointVersion = "gela-ckpt-1";

inline nlohmann::ordered_json config_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_layers_text"] = cfg.n_layers_text;
    j["n_layers_cross"] = cfg.n_layers_cross;
    j["n_heads"] = cfg.n_heads;
    j["max_instruction_len"] = cfg.max_instruction_len;
    j["view_feature_dim"] = cfg.view_feature_dim;
    j["ffn_hidden"] = cfg.ffn_hidden;
    j["seed"] = cfg.seed;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_layers_text = j.at("n_layers_text").get<int>();
    cfg.n_layers_cross = j.at("n_layers_cross").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.max_instruction_len = j.at("max_instruction_len").get<int>();
    cfg.view_feature_dim = j.at("view_feature_dim").get<int>();
    cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

inline void save_params(const ParamStore& store, const std::string& path,
                        const ModelConfig* cfg = nullptr) {
    nlohmann::ordered_json header;
    header["version"] = kCheckpointVersion;
    if (cfg) header["model_config"] = config_json(*cfg);
    auto& arrays = header["arrays"] = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : store.items()) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        arrays.push_back(std::move(entry));
        offset += t.size() * sizeof(double);
    }
    const std::string htext = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    const std::uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, t] : store.items())
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

// Loads arrays into the existing store; every named array must exist in the
// file exactly once and match its shape.
inline void load_params(ParamStore& store, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::uint64_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen)))
        throw ParseError("checkpoint truncated: missing header length");
    std::string htext(hlen, '\0');
    if (!in.read(htext.data(), static_cast<std::streamsize>(hlen)))
        throw ParseError("checkpoint truncated: header shorter than declared");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(htext);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint header is not valid JSON at byte " + std::to_string(e.byte));
    }
    if (!header.contains("version") || !header["version"].is_string())
        throw ParseError("checkpoint header missing version");
    if (header["version"].get<std::string>() != kCheckpointVersion)
        throw VersionError("checkpoint version '" + header["version"].get<std::string>() +
                           "' != '" + kCheckpointVersion + "'");
    if (!header.contains("arrays") || !header["arrays"].is_array())
        throw ParseError("checkpoint header missing arrays");

    const std::streampos payload_start = in.tellg();
    std::set<std::string> seen;
    for (const auto& entry : header["arrays"]) {
        const std::string name = entry.at("name").get<std::string>();
        if (!seen.insert(name).second)
            throw SchemaError("checkpoint names array '" + name + "' more than once");
        const auto shape = entry.at("shape").get<std::vector<int>>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        if (!store.has(name))
            throw SchemaError("checkpoint contains unknown array '" + name + "'");
        diff::Tensor t = store.get(name);
        if (t.shape() != shape)
            throw ShapeError("checkpoint array '" + name + "' has shape " +
                             diff::shape_str(shape) + ", expected " + diff::shape_str(t.shape()));
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        if (!in.read(reinterpret_cast<char*>(t.values_mut().data()),
                     static_cast<std::streamsize>(t.size() * sizeof(double))))
            throw ParseError("checkpoint truncated: array '" + name + "' incomplete");
    }
    for (const auto& [name, t] : store.items())
        if (!seen.count(name)) throw SchemaError("checkpoint missing array '" + name + "'");
}

inline void save_checkpoint(const Model& m, const std::string& path) {
    const ModelConfig cfg = m.config();
    save_params(m.params(), path, &cfg);
}

inline Model load_checkpoint(const ModelConfig& cfg, const std::string& path) {
    Model m(cfg);
    load_params(m.params(), path);
    return m;
}

// Reads the model configuration embedded in the checkpoint header.
inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::uint64_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen)))
        throw ParseError("checkpoint truncated: missing header length");
    std::string htext(hlen, '\0');
    if (!in.read(htext.data(), static_cast<std::streamsize>(hlen)))
        throw ParseError("checkpoint truncated: header shorter than declared");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(htext);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint header is not valid JSON at byte " + std::to_string(e.byte));
    }
    if (!header.contains("model_config"))
        throw ParseError("checkpoint header carries no model_config");
    return load_checkpoint(config_from_json(header["model_config"]), path);
}

}  // namespace gela::model
