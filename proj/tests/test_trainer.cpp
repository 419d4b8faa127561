#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "qalign/trainer.hpp"

using namespace qalign;

namespace {

constexpr double kLn2 = 0.6931471805599453;

Model<float> small_quantized_model(std::uint64_t seed, int rank = 4) {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq_len = 256;
    auto dense = make_model<float>(cfg, seed);
    auto quant = quantize_model(dense, 64);
    AdapterProfile profile{rank, 8.0, 0.1};
    attach_adapters(quant, profile, seed + 1);
    quant.freeze_base();
    return quant;
}

std::uint64_t quantized_checksum(Model<float>& m) {
    std::uint64_t h = 14695981039346656037ull;
    m.for_each_quantized([&](const std::string& name, QuantizedTensor& q) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(q.codes.data(), q.codes.size(), h);
        h = fnv1a64(q.scales.data(), q.scales.size() * sizeof(float), h);
    });
    return h;
}

std::vector<PreferenceExample> synthetic_preferences(std::size_t n) {
    auto bank = TemplateBank::builtin();
    auto scenarios = generate_scenarios(11, n, Split::train, bank);
    std::vector<PreferenceExample> out;
    for (std::size_t i = 0; i < scenarios.size(); ++i) {
        const auto& sc = scenarios[i];
        out.push_back({sc.adversarial, sc.benign_answer, kLeakResponse, "marker-v1", sc.id,
                       "train"});
    }
    return out;
}

std::vector<float> adapter_bytes(Model<float>& m) {
    std::vector<float> out;
    m.for_each_adapter([&](const std::string&, AdapterPair<float>& ad) {
        out.insert(out.end(), ad.a.data().begin(), ad.a.data().end());
        out.insert(out.end(), ad.b.data().begin(), ad.b.data().end());
    });
    return out;
}

}  // namespace

TEST_CASE("dpo_loss at adapter init is exactly ln 2 for any batch and beta") {
    auto policy = small_quantized_model(3);
    ReferenceModel<float> reference(policy);
    auto prefs = synthetic_preferences(8);

    for (double beta : {0.01, 0.1, 1.0}) {
        auto res = dpo_loss(policy, reference, prefs, beta);
        CAPTURE(beta);
        REQUIRE(std::abs(static_cast<double>(res.loss.scalar_value()) - kLn2) < 1e-5);
        for (double m : res.margins) REQUIRE(std::abs(m) < 1e-6);
    }
}

TEST_CASE("beta -> 0 drives dpo_loss to ln 2 regardless of the models") {
    auto policy = small_quantized_model(5);
    // Perturb adapters so policy != reference.
    auto reference_model = small_quantized_model(1299);
    ReferenceModel<float> reference(reference_model);
    Rng rng(4);
    policy.for_each_adapter([&](const std::string&, AdapterPair<float>& ad) {
        for (auto& v : ad.b.data()) v = static_cast<float>(rng.next_normal() * 0.05);
    });

    auto prefs = synthetic_preferences(4);
    auto res = dpo_loss(policy, reference, prefs, 1e-9);
    REQUIRE(std::abs(static_cast<double>(res.loss.scalar_value()) - kLn2) < 1e-6);

    // At beta = 0.5 they genuinely differ.
    auto res2 = dpo_loss(policy, reference, prefs, 0.5);
    REQUIRE(std::abs(static_cast<double>(res2.loss.scalar_value()) - kLn2) > 1e-6);
}

TEST_CASE("loss equals -log sigmoid(margin) recomputably") {
    auto policy = small_quantized_model(7);
    Rng rng(9);
    policy.for_each_adapter([&](const std::string&, AdapterPair<float>& ad) {
        for (auto& v : ad.b.data()) v = static_cast<float>(rng.next_normal() * 0.1);
    });
    ReferenceModel<float> reference(small_quantized_model(7));

    auto prefs = synthetic_preferences(6);
    auto res = dpo_loss(policy, reference, prefs, 0.1);
    double recomputed = 0.0;
    for (double m : res.margins) recomputed += -std::log(1.0 / (1.0 + std::exp(-m)));
    recomputed /= static_cast<double>(res.margins.size());
    REQUIRE(static_cast<double>(res.loss.scalar_value()) ==
            Catch::Approx(recomputed).margin(1e-6));
}

TEST_CASE("micro-model dpo_loss matches the exhaustive enumeration oracle") {
    // vocab-4, length-2 responses; probabilities computed by hand from raw
    // logits, completely bypassing gather_log_probs.
    ModelConfig cfg;
    cfg.vocab_size = 4;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_seq_len = 8;
    auto policy = make_model<float>(cfg, 21);
    auto ref_base = make_model<float>(cfg, 22);
    policy.for_each_param([](const std::string&, Tensor<float>& t) {
        t.set_requires_grad(false);
    });
    ReferenceModel<float> reference(ref_base);

    auto logprob_by_hand = [](const Model<float>& m, int prompt, int r0, int r1) {
        auto row_logprob = [&](const std::vector<int>& ctx, int next) {
            auto logits = forward_logits(m, ctx);
            const std::size_t last = ctx.size() - 1;
            double mx = -HUGE_VAL;
            for (std::size_t j = 0; j < 4; ++j)
                mx = std::max(mx, static_cast<double>(logits.at(last, j)));
            double z = 0.0;
            for (std::size_t j = 0; j < 4; ++j)
                z += std::exp(static_cast<double>(logits.at(last, j)) - mx);
            return static_cast<double>(logits.at(last, static_cast<std::size_t>(next))) -
                   mx - std::log(z);
        };
        return row_logprob({prompt}, r0) + row_logprob({prompt, r0}, r1);
    };

    const int prompt = 2;
    auto make_seq = [&](int r0, int r1) {
        TokenSequence seq;
        seq.ids = {prompt, r0, r1};
        seq.response = {1, 3};
        return seq;
    };

    // sequence_logprob against the oracle over all 16 responses.
    for (int r0 = 0; r0 < 4; ++r0) {
        for (int r1 = 0; r1 < 4; ++r1) {
            const double lib =
                static_cast<double>(sequence_logprob(policy, make_seq(r0, r1)).scalar_value());
            const double oracle = logprob_by_hand(policy, prompt, r0, r1);
            REQUIRE(lib == Catch::Approx(oracle).margin(1e-6));
        }
    }

    // dpo_loss against the same oracle for specific pairs and betas.
    for (double beta : {0.1, 0.7}) {
        std::vector<PreferencePair> batch = {{make_seq(0, 1), make_seq(3, 2), "micro-a"},
                                             {make_seq(2, 2), make_seq(1, 0), "micro-b"}};
        auto res = dpo_loss_on_pairs(policy, reference, batch, beta);

        double oracle_loss = 0.0;
        std::vector<double> oracle_margins;
        for (const auto& pair : batch) {
            const int cs0 = pair.chosen.ids[1], cs1 = pair.chosen.ids[2];
            const int cu0 = pair.rejected.ids[1], cu1 = pair.rejected.ids[2];
            const double margin =
                beta * ((logprob_by_hand(policy, prompt, cs0, cs1) -
                         logprob_by_hand(reference.model(), prompt, cs0, cs1)) -
                        (logprob_by_hand(policy, prompt, cu0, cu1) -
                         logprob_by_hand(reference.model(), prompt, cu0, cu1)));
            oracle_margins.push_back(margin);
            oracle_loss += -std::log(1.0 / (1.0 + std::exp(-margin)));
        }
        oracle_loss /= static_cast<double>(batch.size());

        CAPTURE(beta);
        REQUIRE(static_cast<double>(res.loss.scalar_value()) ==
                Catch::Approx(oracle_loss).margin(1e-6));
        for (std::size_t i = 0; i < batch.size(); ++i)
            REQUIRE(res.margins[i] == Catch::Approx(oracle_margins[i]).margin(1e-6));
    }
}

TEST_CASE("sft: loss on a single repeated example is monotone non-increasing") {
    auto model = small_quantized_model(13);
    std::vector<SftExample> data = {
        {PromptParts{kSystemInstruction, "What does a firewall do?", ""},
         "It filters network traffic by rule."}};
    TrainConfig cfg;
    cfg.stage = "sft";
    cfg.learning_rate = 2e-4;
    cfg.steps = 20;
    cfg.batch_size = 1;
    cfg.seed = 3;
    auto metrics = run_sft(model, data, cfg);
    REQUIRE(metrics.size() == 20);
    for (std::size_t i = 1; i < metrics.size(); ++i) {
        CAPTURE(i);
        REQUIRE(metrics[i].loss <= metrics[i - 1].loss + 1e-6);
    }
}

TEST_CASE("frozen base: quantized codes and scales identical after training") {
    auto model = small_quantized_model(17);
    const std::uint64_t before = quantized_checksum(model);

    auto sft_data = build_sft_examples(Split::train);
    sft_data.resize(8);
    TrainConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 4;
    cfg.seed = 5;
    run_sft(model, sft_data, cfg);

    ReferenceModel<float> reference(model);
    auto prefs = synthetic_preferences(8);
    TrainConfig dcfg;
    dcfg.stage = "dpo";
    dcfg.epochs = 1;
    dcfg.batch_size = 4;
    dcfg.seed = 6;
    run_dpo(model, reference, prefs, dcfg);

    REQUIRE(quantized_checksum(model) == before);
}

TEST_CASE("dpo training: margin goes positive and loss drops below ln 2") {
    auto model = small_quantized_model(23);
    // Warm the task head slightly so sequences are in-distribution.
    auto sft_data = build_sft_examples(Split::train);
    TrainConfig scfg;
    scfg.steps = 6;
    scfg.batch_size = 8;
    scfg.seed = 7;
    run_sft(model, sft_data, scfg);

    ReferenceModel<float> reference(model);
    auto prefs = synthetic_preferences(64);
    TrainConfig cfg;
    cfg.stage = "dpo";
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.beta = 0.1;
    cfg.learning_rate = 2e-4;
    cfg.seed = 8;
    auto metrics = run_dpo(model, reference, prefs, cfg);

    double mean_loss = 0.0, mean_margin = 0.0;
    for (const auto& m : metrics) {
        mean_loss += m.loss;
        mean_margin += m.margin;
    }
    mean_loss /= static_cast<double>(metrics.size());
    mean_margin /= static_cast<double>(metrics.size());
    REQUIRE(mean_margin > 0.0);
    REQUIRE(mean_loss < kLn2);
    // Final batch should show clear preference movement.
    REQUIRE(metrics.back().margin > 0.0);
}

TEST_CASE("fixed seed gives identical final adapter bytes across two runs") {
    auto prefs = synthetic_preferences(16);
    TrainConfig cfg;
    cfg.stage = "dpo";
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 99;

    auto run_once = [&]() {
        auto model = small_quantized_model(31);
        ReferenceModel<float> reference(model);
        run_dpo(model, reference, prefs, cfg);
        return adapter_bytes(model);
    };
    auto b1 = run_once();
    auto b2 = run_once();
    REQUIRE(b1 == b2);
}

TEST_CASE("reference model rejects mutation") {
    auto model = small_quantized_model(37);
    ReferenceModel<float> reference(model);
    reference.verify_unchanged();
    auto& mutable_model = const_cast<Model<float>&>(reference.model());
    mutable_model.tok_embed[0] += 1.0f;
    REQUIRE_THROWS_AS(reference.verify_unchanged(), IntegrityError);
}

TEST_CASE("gradient masking check catches a leak") {
    auto model = small_quantized_model(41);
    // Deliberately un-freeze a base parameter and push gradient through it.
    model.tok_embed.set_requires_grad(true);
    std::vector<SftExample> data = {
        {PromptParts{kSystemInstruction, "What is malware?", ""}, "Bad software."}};
    Tape<float> tape;
    {
        TapeScope<float> scope(tape);
        auto seq = with_response(data[0].x.render(), data[0].y);
        auto logits = forward_logits(model, seq.ids);
        std::vector<int> targets(seq.ids.size(), 0);
        std::vector<bool> mask(seq.ids.size(), false);
        for (std::size_t i = seq.response.begin; i < seq.response.end; ++i) {
            targets[i - 1] = seq.ids[i];
            mask[i - 1] = true;
        }
        tape.backward(softmax_cross_entropy(logits, targets, mask));
    }
    REQUIRE_THROWS_AS(check_gradient_masking(model), IntegrityError);
}

TEST_CASE("training config validation") {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.beta = -1.0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    REQUIRE_NOTHROW(cfg.validate());
    // Defaults carry the documented training budget.
    REQUIRE(cfg.steps == 60);
    REQUIRE(cfg.epochs == 3);
    REQUIRE(cfg.learning_rate == 2e-4);
    REQUIRE(cfg.beta == 0.1);
    REQUIRE(cfg.adamw.beta1 == 0.9);
    REQUIRE(cfg.adamw.beta2 == 0.999);
    REQUIRE(cfg.adamw.eps == 1e-8);
    REQUIRE(cfg.adamw.weight_decay == 0.0);
}
