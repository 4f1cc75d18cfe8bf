#pragma once

// Checkpoint file: one line of JSON header
//   {"version":"CKP1","model":{..},"train":{..},"step":..,"epoch":..,"rng":"..",
//    "arrays":[{"name":..,"shape":[..],"offset":..,"count":..}, ..]}
// then '\n', then all arrays as little-endian float32. Momentum buffers are
// stored as arrays named "velocity/<param>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "config.hpp"
#include "errors.hpp"
#include "model.hpp"

namespace composeae {

inline constexpr const char* kCheckpointVersion = "CKP1";

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> data;

    friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
    std::string version = kCheckpointVersion;
    ModelConfig model;
    nlohmann::json train = nlohmann::json::object();  // resolved TrainConfig, informational
    std::vector<NamedArray> params;
    std::vector<NamedArray> velocity;  // empty before the first step
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    std::string rng_state;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

template <class T>
std::vector<NamedArray> export_params(const Model<T>& model) {
    std::vector<NamedArray> out;
    for (const auto* p : model.all())
        out.push_back({p->name, p->value.shape, std::vector<float>(p->value.data.begin(), p->value.data.end())});
    return out;
}

/// Rebuilds a model from the checkpoint's config and arrays. Names and
/// shapes must match exactly; throws FormatError otherwise.
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
    Model<T> model(ck.model, 0);
    auto ps = model.all();
    if (ps.size() != ck.params.size())
        throw FormatError("checkpoint holds " + std::to_string(ck.params.size()) + " parameter arrays but model config " +
                          to_string(ck.model.variant) + " needs " + std::to_string(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& a = ck.params[i];
        if (a.name != ps[i]->name)
            throw FormatError("checkpoint array " + std::to_string(i) + " is '" + a.name + "', expected '" +
                              ps[i]->name + "'");
        if (a.shape != ps[i]->value.shape || a.data.size() != ps[i]->value.size())
            throw FormatError("checkpoint array '" + a.name + "' has shape " + to_string(a.shape) +
                              " but model config requires " + to_string(ps[i]->value.shape));
        std::copy(a.data.begin(), a.data.end(), ps[i]->value.data.begin());
    }
    return model;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    nlohmann::json header;
    header["version"] = ck.version;
    header["model"] = to_json(ck.model);
    header["train"] = ck.train;
    header["step"] = ck.step;
    header["epoch"] = ck.epoch;
    header["rng"] = ck.rng_state;
    nlohmann::json arrays = nlohmann::json::array();
    std::size_t offset = 0;
    auto add = [&](const NamedArray& a, const std::string& name) {
        arrays.push_back({{"name", name}, {"shape", a.shape}, {"offset", offset}, {"count", a.data.size()}});
        offset += a.data.size() * 4;
    };
    for (const auto& a : ck.params) add(a, a.name);
    for (const auto& a : ck.velocity) add(a, "velocity/" + a.name);
    header["arrays"] = arrays;

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out << header.dump() << '\n';
    auto write = [&](const NamedArray& a) {
        for (float f : a.data) {
            std::uint32_t w = std::bit_cast<std::uint32_t>(f);
            if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
            out.write(reinterpret_cast<const char*>(&w), 4);
        }
    };
    for (const auto& a : ck.params) write(a);
    for (const auto& a : ck.velocity) write(a);
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint not found: '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto nl = std::find(bytes.begin(), bytes.end(), '\n');
    if (nl == bytes.end()) throw FormatError("checkpoint '" + path.string() + "' has no header line");
    nlohmann::json header = nlohmann::json::parse(bytes.begin(), nl, nullptr, false);
    if (header.is_discarded() || !header.is_object()) throw FormatError("checkpoint header is not valid JSON");
    if (!header.contains("version") || !header["version"].is_string())
        throw FormatError("checkpoint header has no version");
    const auto version = header["version"].get<std::string>();
    if (version != kCheckpointVersion)
        throw UnsupportedVersionError("unsupported checkpoint version '" + version + "' (expected " +
                                      kCheckpointVersion + ")");

    Checkpoint ck;
    const char* blob = &*nl + 1;
    const std::size_t blob_bytes = static_cast<std::size_t>(bytes.end() - nl) - 1;
    try {
        ck.model = model_config_from_json(header.at("model"));
        ck.train = header.at("train");
        ck.step = header.at("step").get<std::uint64_t>();
        ck.epoch = header.at("epoch").get<std::size_t>();
        ck.rng_state = header.at("rng").get<std::string>();
        for (const auto& a : header.at("arrays")) {
            NamedArray arr;
            arr.name = a.at("name").get<std::string>();
            arr.shape = a.at("shape").get<Shape>();
            const auto offset = a.at("offset").get<std::size_t>();
            const auto count = a.at("count").get<std::size_t>();
            if (count != numel(arr.shape))
                throw FormatError("checkpoint array '" + arr.name + "' count does not match its shape");
            if (offset + count * 4 > blob_bytes)
                throw FormatError("checkpoint array '" + arr.name + "' extends past the end of the file");
            arr.data.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                std::uint32_t w;
                std::memcpy(&w, blob + offset + 4 * i, 4);
                if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
                arr.data[i] = std::bit_cast<float>(w);
            }
            if (arr.name.rfind("velocity/", 0) == 0) {
                arr.name = arr.name.substr(9);
                ck.velocity.push_back(std::move(arr));
            } else {
                ck.params.push_back(std::move(arr));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header malformed: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint model config invalid: ") + e.what());
    }
    // Validates names and shapes against the embedded config.
    (void)model_from_checkpoint<float>(ck);
    if (!ck.velocity.empty()) {
        if (ck.velocity.size() != ck.params.size())
            throw FormatError("checkpoint velocity count does not match parameter count");
        for (std::size_t i = 0; i < ck.params.size(); ++i)
            if (ck.velocity[i].name != ck.params[i].name || ck.velocity[i].shape != ck.params[i].shape)
                throw FormatError("checkpoint velocity '" + ck.velocity[i].name + "' does not match its parameter");
    }
    return ck;
}

}  // namespace composeae
