#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "semsr/nn/layers.hpp"

namespace semsr {

// Single-file container:
//   8-byte magic | u32 format version | u64 header length | JSON header | float32 payload
// The header names the component kind, its architecture hyperparameters and
// a tensor table of (name, shape, offset) into the payload.
inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'M', 'S', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
    nn::Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::string kind;
    nlohmann::json hparams = nlohmann::json::object();
    nlohmann::json extra = nlohmann::json::object();  // training config echo, metrics, etc.
    long step = 0;
    std::string config_hash;
    std::map<std::string, TensorEntry> tensors;

    template <typename T>
    void put(const nn::ParamList<T>& params) {
        for (const auto& p : params) {
            TensorEntry e{p.var.shape(), {}};
            e.values.assign(p.var.values().begin(), p.var.values().end());
            if (!tensors.emplace(p.name, std::move(e)).second)
                throw StateError("checkpoint: duplicate tensor '" + p.name + "'");
        }
    }

    // Fills every parameter by name; all must be present with matching shape.
    template <typename T>
    void get(const nn::ParamList<T>& params) const {
        for (const auto& p : params) {
            auto it = tensors.find(p.name);
            if (it == tensors.end()) throw StateError("checkpoint '" + kind + "' lacks tensor '" + p.name + "'");
            if (it->second.shape != p.var.shape())
                throw StateError("checkpoint tensor '" + p.name + "' has shape " + nn::to_string(it->second.shape) +
                                 ", model expects " + nn::to_string(p.var.shape()));
            auto v = p.var;
            for (std::size_t i = 0; i < v.size(); ++i) v.values()[i] = static_cast<T>(it->second.values[i]);
        }
    }

    bool has(const std::string& name) const { return tensors.count(name) > 0; }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::json header;
    header["kind"] = ck.kind;
    header["hparams"] = ck.hparams;
    header["extra"] = ck.extra;
    header["step"] = ck.step;
    header["config_hash"] = ck.config_hash;
    auto& table = header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, e] : ck.tensors) {
        table.push_back({{"name", name}, {"shape", e.shape}, {"offset", offset}, {"count", e.values.size()}});
        offset += e.values.size();
    }
    const std::string text = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    f.write(kCheckpointMagic, sizeof kCheckpointMagic);
    f.write(reinterpret_cast<const char*>(&version), sizeof version);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, e] : ck.tensors)
        f.write(reinterpret_cast<const char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * sizeof(float)));
    if (!f) throw IoError("failed writing checkpoint " + path);
}

// expected_kind empty accepts any kind.
inline Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind = "") {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw StateError("missing checkpoint: " + path);
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    f.read(magic, sizeof magic);
    f.read(reinterpret_cast<char*>(&version), sizeof version);
    f.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!f || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError(path + " is not a semsr checkpoint");
    if (version > kCheckpointVersion)
        throw IoError(path + " has format version " + std::to_string(version) + ", newer than supported " +
                      std::to_string(kCheckpointVersion));
    std::string text(len, '\0');
    f.read(text.data(), static_cast<std::streamsize>(len));
    if (!f) throw IoError("truncated checkpoint header in " + path);
    const auto header = nlohmann::json::parse(text);
    Checkpoint ck;
    ck.kind = header.at("kind").get<std::string>();
    if (!expected_kind.empty() && ck.kind != expected_kind)
        throw StateError(path + " holds a '" + ck.kind + "' checkpoint, expected '" + expected_kind + "'");
    ck.hparams = header.at("hparams");
    ck.extra = header.value("extra", nlohmann::json::object());
    ck.step = header.at("step").get<long>();
    ck.config_hash = header.at("config_hash").get<std::string>();
    const auto payload_start = f.tellg();
    for (const auto& t : header.at("tensors")) {
        TensorEntry e;
        e.shape = t.at("shape").get<nn::Shape>();
        const auto count = t.at("count").get<std::uint64_t>();
        if (count != nn::numel(e.shape)) throw IoError("corrupt tensor table in " + path);
        e.values.resize(count);
        f.seekg(payload_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>() * sizeof(float)));
        f.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
        if (!f) throw IoError("truncated checkpoint payload in " + path);
        ck.tensors.emplace(t.at("name").get<std::string>(), std::move(e));
    }
    return ck;
}

}  // namespace semsr
