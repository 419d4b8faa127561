#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "qalign/jsonl.hpp"
#include "qalign/model.hpp"

// Versioned binary checkpoint container. Layout (all integers little-endian):
//
//   magic   "QALN"
//   u32     format version (currently 1)
//   u64     metadata length, followed by canonical JSON bytes
//   u32     record count
//   record: u16 name length + name bytes
//           u8  kind (0 = dense f32, 1 = quantized nf4)
//           u8  ndim, then u64 per dimension
//           dense:     f32 payload
//           quantized: u32 block_size; u16 codebook-id length + id;
//                      u64 scale count + f32 scales; u64 code bytes + codes
//
// save -> load -> save is byte-identical: iteration order is fixed by the
// model's parameter visitors and the metadata JSON is dumped canonically.

namespace qalign {

inline constexpr char kCheckpointMagic[4] = {'Q', 'A', 'L', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& out, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    put_bytes(out, buf, sizeof(T));
}

inline void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le(out, bits);
}

inline void get_bytes(std::istream& in, void* p, std::size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw IntegrityError(std::string("checkpoint: truncated while reading ") + what);
}

template <typename T>
T get_le(std::istream& in, const char* what) {
    unsigned char buf[sizeof(T)];
    get_bytes(in, buf, sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

inline float get_f32(std::istream& in, const char* what) {
    std::uint32_t bits = get_le<std::uint32_t>(in, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
    if (s.size() > 0xffff) throw IntegrityError("checkpoint: string too long");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
    put_bytes(out, s.data(), s.size());
}

inline std::string get_string(std::istream& in, const char* what) {
    const auto len = get_le<std::uint16_t>(in, what);
    std::string s(len, '\0');
    get_bytes(in, s.data(), len, what);
    return s;
}

}  // namespace ckpt_detail

inline json model_config_to_json(const ModelConfig& cfg) {
    return json{{"vocab_size", cfg.vocab_size},
                {"d_model", cfg.d_model},
                {"n_layers", cfg.n_layers},
                {"n_heads", cfg.n_heads},
                {"d_ff", cfg.d_ff},
                {"max_seq_len", cfg.max_seq_len},
                {"quantized", cfg.quantized},
                {"block_size", cfg.block_size},
                {"adapter",
                 {{"rank", cfg.adapter.rank},
                  {"alpha", cfg.adapter.alpha},
                  {"dropout_p", cfg.adapter.dropout_p}}}};
}

inline ModelConfig model_config_from_json(const json& j) {
    try {
        ModelConfig cfg;
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.d_ff = j.at("d_ff").get<std::size_t>();
        cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        cfg.quantized = j.at("quantized").get<bool>();
        cfg.block_size = j.at("block_size").get<std::uint32_t>();
        cfg.adapter.rank = j.at("adapter").at("rank").get<int>();
        cfg.adapter.alpha = j.at("adapter").at("alpha").get<double>();
        cfg.adapter.dropout_p = j.at("adapter").at("dropout_p").get<double>();
        cfg.validate();
        return cfg;
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("checkpoint: bad model config: ") + e.what());
    }
}

inline void save_checkpoint(const std::string& path, Model<float>& model,
                            json extra_meta = json::object()) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open '" + path + "' for writing");

    json meta = std::move(extra_meta);
    meta["model"] = model_config_to_json(model.config);
    const std::string meta_str = meta.dump();

    using namespace ckpt_detail;
    put_bytes(out, kCheckpointMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, meta_str.size());
    put_bytes(out, meta_str.data(), meta_str.size());

    std::uint32_t count = 0;
    model.for_each_param([&](const std::string&, Tensor<float>&) { ++count; });
    model.for_each_quantized([&](const std::string&, QuantizedTensor&) { ++count; });
    put_le<std::uint32_t>(out, count);

    auto put_shape = [&](const std::vector<std::size_t>& shape) {
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
        for (auto d : shape) put_le<std::uint64_t>(out, d);
    };
    model.for_each_param([&](const std::string& name, Tensor<float>& t) {
        put_string(out, name);
        put_le<std::uint8_t>(out, 0);
        put_shape(t.shape());
        for (float v : t.data()) put_f32(out, v);
    });
    model.for_each_quantized([&](const std::string& name, QuantizedTensor& q) {
        put_string(out, name);
        put_le<std::uint8_t>(out, 1);
        put_shape(q.shape);
        put_le<std::uint32_t>(out, q.block_size);
        put_string(out, q.codebook_id);
        put_le<std::uint64_t>(out, q.scales.size());
        for (float s : q.scales) put_f32(out, s);
        put_le<std::uint64_t>(out, q.codes.size());
        put_bytes(out, q.codes.data(), q.codes.size());
    });
    if (!out) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

// Rebuilds the model named by the checkpoint's own config. Every record must
// land on a matching slot and every slot must be filled; loading a dense
// checkpoint as quantized (or the reverse) is refused, conversion is a
// separate explicit step.
inline Model<float> load_checkpoint(const std::string& path, json* meta_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
    using namespace ckpt_detail;

    char magic[4];
    get_bytes(in, magic, 4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw UsageError("load_checkpoint: '" + path + "' is not a checkpoint (bad magic)");
    const auto version = get_le<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion)
        throw UsageError("load_checkpoint: unsupported format version " +
                         std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")");

    const auto meta_len = get_le<std::uint64_t>(in, "metadata length");
    std::string meta_str(meta_len, '\0');
    get_bytes(in, meta_str.data(), meta_len, "metadata");
    json meta;
    try {
        meta = json::parse(meta_str);
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("load_checkpoint: metadata is not JSON: ") +
                             e.what());
    }
    if (meta_out) *meta_out = meta;
    if (!meta.contains("model"))
        throw IntegrityError("load_checkpoint: metadata lacks a model config");
    const ModelConfig cfg = model_config_from_json(meta["model"]);

    // Skeleton with the right structure; every tensor is overwritten below.
    Model<float> model = make_model<float>(cfg, 0);
    if (cfg.adapter.rank > 0) {
        AdapterProfile profile = cfg.adapter;
        attach_adapters(model, profile, 0);
    }
    if (cfg.quantized) {
        model = quantize_model(model, cfg.block_size);
        model.config = cfg;
    }

    std::map<std::string, Tensor<float>*> dense_slots;
    std::map<std::string, QuantizedTensor*> quant_slots;
    model.for_each_param(
        [&](const std::string& name, Tensor<float>& t) { dense_slots[name] = &t; });
    model.for_each_quantized(
        [&](const std::string& name, QuantizedTensor& q) { quant_slots[name] = &q; });

    const auto count = get_le<std::uint32_t>(in, "record count");
    std::size_t filled = 0;
    for (std::uint32_t r = 0; r < count; ++r) {
        const std::string name = get_string(in, "record name");
        const auto kind = get_le<std::uint8_t>(in, "record kind");
        const auto ndim = get_le<std::uint8_t>(in, "record ndim");
        std::vector<std::size_t> shape(ndim);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(get_le<std::uint64_t>(in, "record dim"));
            numel *= d;
        }
        if (kind == 0) {
            auto it = dense_slots.find(name);
            if (it == dense_slots.end())
                throw IntegrityError("load_checkpoint: unexpected dense record '" + name +
                                     "' for this config");
            Tensor<float>& dst = *it->second;
            if (dst.shape() != shape)
                throw IntegrityError("load_checkpoint: shape mismatch for '" + name + "'");
            for (std::size_t i = 0; i < numel; ++i) dst[i] = get_f32(in, "dense payload");
            dense_slots.erase(it);
            ++filled;
        } else if (kind == 1) {
            auto it = quant_slots.find(name);
            if (it == quant_slots.end())
                throw IntegrityError("load_checkpoint: unexpected quantized record '" + name +
                                     "'; converting dense<->quantized requires an explicit "
                                     "quantize step");
            QuantizedTensor q;
            q.shape = shape;
            q.block_size = get_le<std::uint32_t>(in, "block size");
            q.codebook_id = get_string(in, "codebook id");
            const auto n_scales = get_le<std::uint64_t>(in, "scale count");
            q.scales.resize(n_scales);
            for (auto& s : q.scales) s = get_f32(in, "scales");
            const auto n_codes = get_le<std::uint64_t>(in, "code byte count");
            q.codes.resize(n_codes);
            get_bytes(in, q.codes.data(), n_codes, "codes");
            q.validate();
            *it->second = q;
            quant_slots.erase(it);
            ++filled;
        } else {
            throw IntegrityError("load_checkpoint: unknown record kind " +
                                 std::to_string(kind));
        }
    }
    if (!dense_slots.empty() || !quant_slots.empty()) {
        std::string missing = dense_slots.empty() ? quant_slots.begin()->first
                                                  : dense_slots.begin()->first;
        throw IntegrityError("load_checkpoint: record for '" + missing +
                             "' missing from file");
    }
    (void)filled;

    // Loaded models come back fully frozen; training stages re-enable what
    // they own.
    model.for_each_param(
        [](const std::string&, Tensor<float>& t) { t.set_requires_grad(false); });
    if (model.config.quantized) model.set_dequant_cache(true);
    return model;
}

// Adapter-only container (base + adapter distribution).
inline void save_adapters(const std::string& path, Model<float>& model,
                          json extra_meta = json::object()) {
    bool any = false;
    model.for_each_adapter([&](const std::string&, AdapterPair<float>&) { any = true; });
    if (!any) throw ConfigError("save_adapters: model has no adapters");

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_adapters: cannot open '" + path + "' for writing");
    using namespace ckpt_detail;

    json meta = std::move(extra_meta);
    meta["adapter_only"] = true;
    meta["adapter"] = {{"rank", model.config.adapter.rank},
                       {"alpha", model.config.adapter.alpha},
                       {"dropout_p", model.config.adapter.dropout_p}};
    const std::string meta_str = meta.dump();

    put_bytes(out, kCheckpointMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, meta_str.size());
    put_bytes(out, meta_str.data(), meta_str.size());

    std::uint32_t count = 0;
    model.for_each_adapter([&](const std::string&, AdapterPair<float>&) { count += 2; });
    put_le<std::uint32_t>(out, count);
    model.for_each_adapter([&](const std::string& name, AdapterPair<float>& ad) {
        for (auto [suffix, tensor] : {std::pair<const char*, Tensor<float>*>{".a", &ad.a},
                                      {".b", &ad.b}}) {
            put_string(out, name + suffix);
            put_le<std::uint8_t>(out, 0);
            put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor->shape().size()));
            for (auto d : tensor->shape()) put_le<std::uint64_t>(out, d);
            for (float v : tensor->data()) put_f32(out, v);
        }
    });
    if (!out) throw IoError("save_adapters: write failed for '" + path + "'");
}

}  // namespace qalign
