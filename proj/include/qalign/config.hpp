#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "qalign/jsonl.hpp"
#include "qalign/model.hpp"
#include "qalign/rng.hpp"
#include "qalign/trainer.hpp"

// Run configuration: a flat JSON object with dotted keys, merged from an
// optional config file plus command-line overrides. The fingerprint is a
// content hash of the effective settings and is embedded in every artifact a
// run produces. Environment variables are deliberately not consulted.

namespace qalign {

class RunConfig {
public:
    static RunConfig from_file(const std::string& path,
                               const std::vector<std::string>& overrides = {}) {
        RunConfig cfg;
        if (!path.empty()) {
            std::ifstream in(path);
            if (!in) throw IoError("RunConfig: cannot open '" + path + "'");
            try {
                in >> cfg.values_;
            } catch (const json::exception& e) {
                throw UsageError("RunConfig: '" + path + "' is not JSON: " + e.what());
            }
            if (!cfg.values_.is_object())
                throw UsageError("RunConfig: '" + path + "' must hold a JSON object");
            for (const auto& [key, value] : cfg.values_.items()) {
                if (value.is_object() || value.is_array())
                    throw UsageError("RunConfig: key '" + key +
                                     "' is nested; use flat dotted keys");
            }
        } else {
            cfg.values_ = json::object();
        }
        for (const auto& ov : overrides) cfg.apply_override(ov);
        return cfg;
    }

    // "key=value"; the value is parsed as JSON when possible, else taken as
    // a string.
    void apply_override(const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw UsageError("override '" + kv + "' is not of the form key=value");
        const std::string key = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        json parsed;
        try {
            parsed = json::parse(raw);
        } catch (const json::exception&) {
            parsed = raw;
        }
        values_[key] = parsed;
    }

    bool has(const std::string& key) const { return values_.contains(key); }

    template <typename T>
    T get(const std::string& key, T fallback) const {
        if (!values_.contains(key)) return fallback;
        try {
            return values_.at(key).get<T>();
        } catch (const json::exception&) {
            throw UsageError("config key '" + key + "' has the wrong type");
        }
    }

    std::uint64_t root_seed() const { return get<std::uint64_t>("seed", 42); }

    std::uint64_t subseed(const std::string& label) const {
        return derive_subseed(root_seed(), label);
    }

    // Content hash of the effective settings; changes iff any setting does.
    std::string fingerprint() const { return hex64(fnv1a64(values_.dump())); }

    const json& values() const { return values_; }

    // Meta block stamped into produced artifacts: the effective config plus
    // its own fingerprint, so verification can re-hash later.
    json artifact_meta() const {
        return json{{"config", values_}, {"config_fingerprint", fingerprint()}};
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.d_model = get<std::size_t>("model.d_model", 128);
        m.n_layers = get<std::size_t>("model.n_layers", 4);
        m.n_heads = get<std::size_t>("model.n_heads", 4);
        m.d_ff = get<std::size_t>("model.d_ff", 512);
        m.max_seq_len = get<std::size_t>("model.max_seq_len", 256);
        m.block_size = get<std::uint32_t>("model.block_size", 64);
        m.adapter.rank = get<int>("adapter.rank", 8);
        m.adapter.alpha = get<double>("adapter.alpha", 8.0);
        m.adapter.dropout_p = get<double>("adapter.dropout", 0.1);
        m.validate();
        return m;
    }

    TrainConfig train_config(const std::string& stage) const {
        TrainConfig t;
        t.stage = stage;
        t.seed = root_seed();
        const std::string p = "train." + stage + ".";
        if (stage == "sft") {
            t.steps = get<std::size_t>(p + "steps", 60);
            t.learning_rate = get<double>(p + "lr", 2e-4);
            t.batch_size = get<std::size_t>(p + "batch_size", 8);
        } else if (stage == "dpo") {
            t.epochs = get<std::size_t>(p + "epochs", 3);
            t.learning_rate = get<double>(p + "lr", 2e-4);
            t.batch_size = get<std::size_t>(p + "batch_size", 8);
            t.beta = get<double>(p + "beta", 0.1);
        } else if (stage == "base") {
            t.steps = get<std::size_t>(p + "steps", 600);
            t.learning_rate = get<double>(p + "lr", 1e-3);
            t.batch_size = get<std::size_t>(p + "batch_size", 16);
        } else {
            throw UsageError("unknown training stage '" + stage + "'");
        }
        t.adamw.beta1 = get<double>("adamw.beta1", 0.9);
        t.adamw.beta2 = get<double>("adamw.beta2", 0.999);
        t.adamw.eps = get<double>("adamw.eps", 1e-8);
        t.adamw.weight_decay = get<double>("adamw.weight_decay", 0.0);
        t.validate();
        return t;
    }

private:
    json values_;
};

// Recomputes the fingerprint stored next to an embedded config block.
inline bool verify_artifact_meta(const json& meta, std::string* detail = nullptr) {
    if (!meta.is_object() || !meta.contains("config") ||
        !meta.contains("config_fingerprint")) {
        if (detail) *detail = "artifact carries no embedded config/fingerprint";
        return false;
    }
    const std::string stored = meta.at("config_fingerprint").get<std::string>();
    const std::string recomputed = hex64(fnv1a64(meta.at("config").dump()));
    if (stored != recomputed) {
        if (detail)
            *detail = "fingerprint mismatch: stored " + stored + ", recomputed " + recomputed;
        return false;
    }
    if (detail) *detail = "fingerprint " + stored + " verified";
    return true;
}

}  // namespace qalign
