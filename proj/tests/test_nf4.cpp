#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "qalign/nf4.hpp"
#include "qalign/rng.hpp"

using namespace qalign;

// Golden codebook, computed offline from the quantile construction at 40
// digits of precision and frozen here.
static const double kGoldenLevels[16] = {
    -1.0,
    -0.69619280563234337,
    -0.52507295944650091,
    -0.39491742591990728,
    -0.28444130892108227,
    -0.18477340280045575,
    -0.091049975985780497,
    0.0,
    0.079580314958409123,
    0.16093014438029081,
    0.24611225134745955,
    0.33791513671312802,
    0.44070973186421645,
    0.56261688796998518,
    0.72295664415947376,
    1.0,
};

TEST_CASE("codebook matches the frozen quantile golden vector") {
    const Nf4Codebook& cb = build_codebook();
    REQUIRE(cb.levels.size() == 16);
    for (std::size_t i = 0; i < 16; ++i) {
        CAPTURE(i);
        REQUIRE(cb.levels[i] == Catch::Approx(kGoldenLevels[i]).margin(1e-12));
    }
}

TEST_CASE("codebook structural invariants") {
    const Nf4Codebook& cb = build_codebook();
    REQUIRE(cb.levels.front() == -1.0);
    REQUIRE(cb.levels.back() == 1.0);
    int zeros = 0;
    for (double v : cb.levels)
        if (v == 0.0) ++zeros;
    REQUIRE(zeros == 1);
    for (std::size_t i = 0; i + 1 < 16; ++i) REQUIRE(cb.levels[i] < cb.levels[i + 1]);
    REQUIRE(cb.nearest(0.0) == cb.zero_index());
}

TEST_CASE("nearest-level mapping is monotone with lower-index ties") {
    const Nf4Codebook& cb = build_codebook();
    std::size_t prev = 0;
    for (int i = 0; i <= 4000; ++i) {
        const double v = -1.0 + 2.0 * i / 4000.0;
        const std::size_t idx = cb.nearest(v);
        REQUIRE(idx >= prev);
        prev = idx;
    }
    // An exactly representable midpoint resolves to the lower index.
    Nf4Codebook toy;
    toy.levels = {-1.0, -0.5, 0.0, 0.25, 0.75, 1.0};
    REQUIRE(toy.nearest(0.5) == 3);
    REQUIRE(toy.nearest(-0.75) == 0);
}

TEST_CASE("quantize: all-zero block") {
    auto w = Tensor<float>::zeros({8, 8});
    QuantizedTensor q = quantize(w, 64);
    REQUIRE(q.scales.size() == 1);
    REQUIRE(q.scales[0] == 0.0f);
    auto idx = unpack_codes(q.codes, 64);
    for (auto c : idx) REQUIRE(c == build_codebook().zero_index());
    auto back = dequantize(q);
    for (float v : back.data()) REQUIRE(v == 0.0f);
}

TEST_CASE("quantize: endpoint block {-3, 3}") {
    auto w = Tensor<float>::from_data({1, 2}, {-3.0f, 3.0f});
    QuantizedTensor q = quantize(w, 2);
    REQUIRE(q.scales == std::vector<float>{3.0f});
    auto idx = unpack_codes(q.codes, 2);
    REQUIRE(idx[0] == 0);   // level -1
    REQUIRE(idx[1] == 15);  // level +1
}

TEST_CASE("quantize rejects non-finite input") {
    auto w = Tensor<float>::from_data({1, 2}, {1.0f, std::nanf("")});
    REQUIRE_THROWS_AS(quantize(w, 2), DataError);
    auto w2 = Tensor<float>::from_data({1, 2}, {1.0f, HUGE_VALF});
    REQUIRE_THROWS_AS(quantize(w2, 2), DataError);
}

TEST_CASE("1024 Gaussian values match the exhaustive nearest-level oracle") {
    Rng rng(2024);
    auto w = Tensor<float>::randn({32, 32}, rng, 1.0);
    QuantizedTensor q = quantize(w, 64);
    auto idx = unpack_codes(q.codes, w.numel());
    const Nf4Codebook& cb = build_codebook();

    for (std::size_t i = 0; i < w.numel(); ++i) {
        const float scale = q.scales[i / 64];
        REQUIRE(scale > 0.0f);
        const double norm = static_cast<double>(w[i]) / static_cast<double>(scale);
        // Brute-force scan over all 16 levels, lower index on ties.
        std::size_t best = 0;
        double best_d = std::abs(norm - cb.levels[0]);
        for (std::size_t j = 1; j < 16; ++j) {
            const double d = std::abs(norm - cb.levels[j]);
            if (d < best_d) {
                best = j;
                best_d = d;
            }
        }
        CAPTURE(i, w[i], scale);
        REQUIRE(idx[i] == best);
    }

    // Elementwise error bound: |w - deq| <= scale * max_gap / 2 per block.
    auto deq = dequantize(q);
    const double half_gap = cb.max_gap() / 2.0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
        const double bound = static_cast<double>(q.scales[i / 64]) * half_gap + 1e-7;
        REQUIRE(std::abs(static_cast<double>(w[i]) - static_cast<double>(deq[i])) <= bound);
    }
}

TEST_CASE("error bound holds for many random blocks and block sizes") {
    const Nf4Codebook& cb = build_codebook();
    const double half_gap = cb.max_gap() / 2.0;
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
        Rng rng(seed);
        const std::uint32_t bs = static_cast<std::uint32_t>(2 + rng.next_below(100));
        auto w = Tensor<float>::randn({7, 31}, rng, 0.1 + rng.next_unit() * 3.0);
        QuantizedTensor q = quantize(w, bs);
        auto deq = dequantize(q);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double bound = static_cast<double>(q.scales[i / bs]) * half_gap + 1e-7;
            CAPTURE(seed, bs, i);
            REQUIRE(std::abs(static_cast<double>(w[i]) - static_cast<double>(deq[i])) <= bound);
        }
    }
}

TEST_CASE("quantize-dequantize-quantize is bit-identical") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 77);
        auto w = Tensor<float>::randn({16, 48}, rng, 1.0);
        QuantizedTensor q1 = quantize(w, 64);
        auto deq = dequantize(q1);
        QuantizedTensor q2 = quantize(deq, 64);
        REQUIRE(q1.codes == q2.codes);
        REQUIRE(q1.scales == q2.scales);
    }
}

TEST_CASE("round-trip mean relative error stays under the frozen bound") {
    // Measured once on Gaussian matrices at block 64 (aggregate
    // mean(|w-deq|)/mean(|w|) lands near 0.092 across seeds); frozen with
    // headroom.
    Rng rng(31337);
    auto w = Tensor<float>::randn({64, 64}, rng, 1.0);
    auto deq = dequantize(quantize(w, 64));
    double err_sum = 0.0, mag_sum = 0.0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
        err_sum += std::abs(static_cast<double>(w[i]) - static_cast<double>(deq[i]));
        mag_sum += std::abs(static_cast<double>(w[i]));
    }
    REQUIRE(err_sum / mag_sum < 0.10);
}

TEST_CASE("pack/unpack is a bijection on 4-bit indices") {
    Rng rng(9);
    for (std::size_t n : {1u, 2u, 7u, 64u, 129u}) {
        std::vector<std::uint8_t> idx(n);
        for (auto& v : idx) v = static_cast<std::uint8_t>(rng.next_below(16));
        REQUIRE(unpack_codes(pack_codes(idx), n) == idx);
    }
    REQUIRE_THROWS_AS(pack_codes({16}), IntegrityError);
}

TEST_CASE("validate rejects corrupted containers") {
    Rng rng(4);
    auto w = Tensor<float>::randn({4, 4}, rng, 1.0);
    QuantizedTensor q = quantize(w, 8);

    QuantizedTensor bad = q;
    bad.codes.pop_back();
    REQUIRE_THROWS_AS(dequantize(bad), IntegrityError);

    bad = q;
    bad.scales[0] = -1.0f;
    REQUIRE_THROWS_AS(dequantize(bad), IntegrityError);

    bad = q;
    bad.codebook_id = "mystery";
    REQUIRE_THROWS_AS(dequantize(bad), IntegrityError);
}
