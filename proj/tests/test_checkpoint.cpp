#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qalign/checkpoint.hpp"

using namespace qalign;

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

ModelConfig desk_config() {
    ModelConfig cfg;
    cfg.d_model = 128;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_ff = 512;
    cfg.max_seq_len = 256;
    return cfg;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("qalign_ckpt_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("round trip restores every parameter exactly") {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq_len = 64;
    auto model = make_model<float>(cfg, 77);

    TempFile f("dense.ckpt");
    save_checkpoint(f.path, model, {{"stage", "base"}, {"seed", 77}});
    json meta;
    auto loaded = load_checkpoint(f.path, &meta);
    REQUIRE(meta["stage"] == "base");
    REQUIRE(meta["seed"] == 77);

    bool all_equal = true;
    std::vector<std::pair<std::string, Tensor<float>*>> orig, back;
    model.for_each_param([&](const std::string& n, Tensor<float>& t) {
        orig.push_back({n, &t});
    });
    loaded.for_each_param([&](const std::string& n, Tensor<float>& t) {
        back.push_back({n, &t});
    });
    REQUIRE(orig.size() == back.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        REQUIRE(orig[i].first == back[i].first);
        if (orig[i].second->data() != back[i].second->data()) all_equal = false;
    }
    REQUIRE(all_equal);
}

TEST_CASE("quantized+adapter round trip preserves codes, scales, and adapters") {
    auto model = make_model<float>(desk_config(), 5);
    auto quant = quantize_model(model, 64);
    AdapterProfile profile{8, 8.0, 0.1};
    attach_adapters(quant, profile, 6);

    TempFile f("quant.ckpt");
    save_checkpoint(f.path, quant);
    auto loaded = load_checkpoint(f.path);
    REQUIRE(loaded.config.quantized);
    REQUIRE(loaded.config.adapter.rank == 8);

    std::vector<QuantizedTensor*> qs_orig, qs_back;
    quant.for_each_quantized([&](const std::string&, QuantizedTensor& q) {
        qs_orig.push_back(&q);
    });
    loaded.for_each_quantized([&](const std::string&, QuantizedTensor& q) {
        qs_back.push_back(&q);
    });
    REQUIRE(qs_orig.size() == qs_back.size());
    for (std::size_t i = 0; i < qs_orig.size(); ++i) {
        REQUIRE(qs_orig[i]->codes == qs_back[i]->codes);
        REQUIRE(qs_orig[i]->scales == qs_back[i]->scales);
        REQUIRE(qs_orig[i]->block_size == qs_back[i]->block_size);
    }

    // Forward equivalence after reload.
    auto seq = tokenize("checkpoint check");
    REQUIRE(forward_logits(quant, seq.ids).data() ==
            forward_logits(loaded, seq.ids).data());
}

TEST_CASE("save -> load -> save is byte-identical") {
    auto model = make_model<float>(desk_config(), 9);
    auto quant = quantize_model(model, 64);
    AdapterProfile profile{8, 8.0, 0.1};
    attach_adapters(quant, profile, 10);

    TempFile f1("bytes1.ckpt"), f2("bytes2.ckpt");
    save_checkpoint(f1.path, quant, {{"stage", "sft"}});
    auto loaded = load_checkpoint(f1.path);
    save_checkpoint(f2.path, loaded, {{"stage", "sft"}});
    REQUIRE(read_file(f1.path) == read_file(f2.path));
}

TEST_CASE("quantized checkpoint is under 0.35x the dense 32-bit size") {
    auto dense = make_model<float>(desk_config(), 123);
    TempFile fd("size_dense.ckpt");
    save_checkpoint(fd.path, dense);

    auto quant = quantize_model(dense, 64);
    TempFile fq("size_quant.ckpt");
    save_checkpoint(fq.path, quant);

    const auto dense_size = fs::file_size(fd.path);
    const auto quant_size = fs::file_size(fq.path);
    CAPTURE(dense_size, quant_size);
    REQUIRE(static_cast<double>(quant_size) < 0.35 * static_cast<double>(dense_size));
}

TEST_CASE("bad magic and unsupported version are refused with a message") {
    TempFile f("garbage.ckpt");
    {
        std::ofstream out(f.path, std::ios::binary);
        out << "NOPEnonsense";
    }
    REQUIRE_THROWS_WITH(load_checkpoint(f.path),
                        Catch::Matchers::ContainsSubstring("bad magic"));

    // Correct magic, wrong version.
    {
        std::ofstream out(f.path, std::ios::binary);
        out.write("QALN", 4);
        const std::uint32_t v = 999;
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
    REQUIRE_THROWS_WITH(load_checkpoint(f.path),
                        Catch::Matchers::ContainsSubstring("version"));
}

TEST_CASE("truncated files raise an integrity error") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 32;
    auto model = make_model<float>(cfg, 3);
    TempFile f("trunc.ckpt");
    save_checkpoint(f.path, model);

    const std::string full = read_file(f.path);
    {
        std::ofstream out(f.path, std::ios::binary);
        out.write(full.data(), static_cast<std::streamsize>(full.size() / 2));
    }
    REQUIRE_THROWS_AS(load_checkpoint(f.path), IntegrityError);
}

TEST_CASE("dense records cannot masquerade as a quantized model") {
    // Flipping the metadata flag without converting the records must be
    // refused; dense -> quantized is an explicit conversion step.
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 32;
    auto model = make_model<float>(cfg, 4);
    TempFile f("flip.ckpt");
    save_checkpoint(f.path, model);

    std::string bytes = read_file(f.path);
    const std::string needle = "\"quantized\":false";
    const auto at = bytes.find(needle);
    REQUIRE(at != std::string::npos);
    bytes.replace(at, needle.size(), "\"quantized\":true ");
    {
        std::ofstream out(f.path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    REQUIRE_THROWS_AS(load_checkpoint(f.path), Error);
}

TEST_CASE("adapter-only export holds exactly the adapter factors") {
    auto model = make_model<float>(desk_config(), 15);
    auto quant = quantize_model(model, 64);
    REQUIRE_THROWS_AS(save_adapters("nope.ckpt", quant), ConfigError);

    AdapterProfile profile{8, 8.0, 0.1};
    attach_adapters(quant, profile, 16);
    TempFile fa("adapters.ckpt");
    TempFile ff("full.ckpt");
    save_adapters(fa.path, quant);
    save_checkpoint(ff.path, quant);
    REQUIRE(fs::file_size(fa.path) < fs::file_size(ff.path) / 2);

    // The export is itself a valid container: magic + version + meta.
    std::ifstream in(fa.path, std::ios::binary);
    char magic[4];
    in.read(magic, 4);
    REQUIRE(std::string(magic, 4) == "QALN");
}
