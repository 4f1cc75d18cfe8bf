#pragma once

// JSON round-tripping for the configuration structs. Parsing is strict:
// documents are merged onto the fully materialised defaults, and any key the
// defaults do not have is rejected.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "losses.hpp"
#include "model.hpp"

namespace composeae {

using nlohmann::json;

struct TrainConfig {
    ModelConfig model;
    LossWeights weights;
    std::optional<BaseLoss> base_loss;  // nullopt: take the dataset's hint, else SMAX
    double learning_rate = 1e-2;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    std::size_t repeats = 5;
    std::size_t eval_every = 1;
    std::vector<std::size_t> ks = {1, 5, 10};
    bool normalize = false;  // L2-normalise both sides at evaluation
    std::size_t threads = 1; // concurrent repeats

    void validate() const {
        model.validate();
        weights.validate();
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (repeats < 1) throw ConfigError("repeats must be >= 1");
        if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
        if (threads < 1) throw ConfigError("threads must be >= 1");
        if (ks.empty()) throw ConfigError("ks must not be empty");
        for (std::size_t i = 0; i < ks.size(); ++i) {
            if (ks[i] < 1) throw ConfigError("ks entries must be >= 1");
            if (i && ks[i] <= ks[i - 1]) throw ConfigError("ks must be strictly ascending");
        }
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Replaces values of `base` with those of `patch`, recursing into objects.
/// Throws ConfigError("unknown config key: a.b") for keys `base` lacks.
inline void merge_strict(json& base, const json& patch, const std::string& prefix = "") {
    if (!patch.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " key " + prefix) + " must be an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("unknown config key: " + path);
        json& slot = base[it.key()];
        if (slot.is_object() && it.value().is_object())
            merge_strict(slot, it.value(), path);
        else
            slot = it.value();
    }
}

/// Sets a dotted path that must already exist in `doc`. `raw` is parsed as
/// JSON when possible, otherwise taken as a string.
inline void apply_override(json& doc, const std::string& dotted, const std::string& raw) {
    json* cur = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!cur->is_object() || !cur->contains(key))
            throw ConfigError("unknown config key: " + dotted.substr(0, dot == std::string::npos ? dotted.size() : dot));
        cur = &(*cur)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    *cur = value;
}

namespace detail {
template <class V>
V field(const json& j, const std::string& path, const char* key) {
    try {
        return j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("config key " + (path.empty() ? std::string() : path + ".") + key + " has the wrong type");
    }
}
}  // namespace detail

inline json to_json(const ModelConfig& m) {
    return {{"d", m.d},
            {"h", m.h},
            {"k", m.k},
            {"gamma_hidden", m.gamma_hidden},
            {"eta_hidden", m.eta_hidden},
            {"rho_hidden", m.rho_hidden},
            {"dec_hidden", m.dec_hidden},
            {"rho_conv_hidden", m.rho_conv_hidden},
            {"rho_conv_length", m.rho_conv_length},
            {"rho_conv_channels", m.rho_conv_channels},
            {"rho_conv_kernel", m.rho_conv_kernel},
            {"baseline_hidden", m.baseline_hidden},
            {"variant", to_string(m.variant)}};
}

inline ModelConfig model_config_from_json(const json& patch) {
    json j = to_json(ModelConfig{});
    merge_strict(j, patch, "model");
    using detail::field;
    ModelConfig m;
    m.d = field<std::size_t>(j, "model", "d");
    m.h = field<std::size_t>(j, "model", "h");
    m.k = field<std::size_t>(j, "model", "k");
    m.gamma_hidden = field<std::size_t>(j, "model", "gamma_hidden");
    m.eta_hidden = field<std::size_t>(j, "model", "eta_hidden");
    m.rho_hidden = field<std::size_t>(j, "model", "rho_hidden");
    m.dec_hidden = field<std::size_t>(j, "model", "dec_hidden");
    m.rho_conv_hidden = field<std::size_t>(j, "model", "rho_conv_hidden");
    m.rho_conv_length = field<std::size_t>(j, "model", "rho_conv_length");
    m.rho_conv_channels = field<std::size_t>(j, "model", "rho_conv_channels");
    m.rho_conv_kernel = field<std::size_t>(j, "model", "rho_conv_kernel");
    m.baseline_hidden = field<std::size_t>(j, "model", "baseline_hidden");
    m.variant = parse_variant(field<std::string>(j, "model", "variant"));
    return m;
}

inline json to_json(const TrainConfig& c) {
    return {{"model", to_json(c.model)},
            {"weights",
             {{"lambda_sym", c.weights.lambda_sym},
              {"lambda_ri", c.weights.lambda_ri},
              {"lambda_rt", c.weights.lambda_rt},
              {"M", c.weights.M},
              {"base", c.base_loss ? to_string(*c.base_loss) : "auto"}}},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"repeats", c.repeats},
            {"eval_every", c.eval_every},
            {"ks", c.ks},
            {"normalize", c.normalize},
            {"threads", c.threads}};
}

/// Parses an already-merged document (all keys present).
inline TrainConfig train_config_from_resolved(const json& j) {
    using detail::field;
    TrainConfig c;
    c.model = model_config_from_json(j.at("model"));
    const json& w = j.at("weights");
    c.weights.lambda_sym = field<double>(w, "weights", "lambda_sym");
    c.weights.lambda_ri = field<double>(w, "weights", "lambda_ri");
    c.weights.lambda_rt = field<double>(w, "weights", "lambda_rt");
    c.weights.M = field<std::size_t>(w, "weights", "M");
    const auto base = field<std::string>(w, "weights", "base");
    if (base == "auto")
        c.base_loss.reset();
    else
        c.base_loss = parse_base_loss(base);
    c.learning_rate = field<double>(j, "", "learning_rate");
    c.momentum = field<double>(j, "", "momentum");
    c.batch_size = field<std::size_t>(j, "", "batch_size");
    c.epochs = field<std::size_t>(j, "", "epochs");
    c.seed = field<std::uint64_t>(j, "", "seed");
    c.repeats = field<std::size_t>(j, "", "repeats");
    c.eval_every = field<std::size_t>(j, "", "eval_every");
    c.ks = field<std::vector<std::size_t>>(j, "", "ks");
    c.normalize = field<bool>(j, "", "normalize");
    c.threads = field<std::size_t>(j, "", "threads");
    c.validate();
    return c;
}

inline TrainConfig train_config_from_json(const json& patch) {
    json j = to_json(TrainConfig{});
    merge_strict(j, patch);
    return train_config_from_resolved(j);
}

inline json to_json(const SynthConfig& s) {
    return {{"n", s.n},
            {"g", s.g},
            {"n_test", s.n_test},
            {"g_test", s.g_test},
            {"d", s.d},
            {"h", s.h},
            {"k_true", s.k_true},
            {"noise_sigma", s.noise_sigma},
            {"text_noise", s.text_noise},
            {"max_angle", s.max_angle},
            {"num_text_concepts", s.num_text_concepts},
            {"seed", s.seed}};
}

inline SynthConfig synth_config_from_json(const json& patch) {
    json j = to_json(SynthConfig{});
    merge_strict(j, patch, "synth");
    using detail::field;
    SynthConfig s;
    s.n = field<std::size_t>(j, "synth", "n");
    s.g = field<std::size_t>(j, "synth", "g");
    s.n_test = field<std::size_t>(j, "synth", "n_test");
    s.g_test = field<std::size_t>(j, "synth", "g_test");
    s.d = field<std::size_t>(j, "synth", "d");
    s.h = field<std::size_t>(j, "synth", "h");
    s.k_true = field<std::size_t>(j, "synth", "k_true");
    s.noise_sigma = field<double>(j, "synth", "noise_sigma");
    s.text_noise = field<double>(j, "synth", "text_noise");
    s.max_angle = field<double>(j, "synth", "max_angle");
    s.num_text_concepts = field<std::size_t>(j, "synth", "num_text_concepts");
    s.seed = field<std::uint64_t>(j, "synth", "seed");
    s.validate();
    return s;
}

}  // namespace composeae
