#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "qalign/ops.hpp"
#include "qalign/rng.hpp"
#include "qalign/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace qalign;

namespace {

Tensor<double> rand_tensor(std::vector<std::size_t> shape, Rng& rng, bool rg = true,
                           double scale = 1.0) {
    return Tensor<double>::randn(std::move(shape), rng, scale, rg);
}

// Weighted sum with fixed random weights; turns any tensor into a scalar
// loss that is sensitive to element order (catches transposition bugs).
Tensor<double> weighted_sum(const Tensor<double>& t, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> w = Tensor<double>::randn(t.shape(), rng, 1.0, false);
    return sum(mul(t, w));
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
    auto eye = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
    auto b = Tensor<float>::from_data({2, 2}, {3, 4, 5, 6});
    auto out = matmul(eye, b);
    REQUIRE(out.data() == std::vector<float>({3, 4, 5, 6}));

    auto r = matmul(Tensor<float>::from_data({1, 2}, {1, 2}),
                    Tensor<float>::from_data({2, 1}, {3, 4}));
    REQUIRE(r.numel() == 1);
    REQUIRE(r[0] == Catch::Approx(11.0f));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({4, 2});
    REQUIRE_THROWS_WITH(matmul(a, b),
                        Catch::Matchers::ContainsSubstring("[2x3]") &&
                            Catch::Matchers::ContainsSubstring("[4x2]"));
}

TEST_CASE("matmul gradient vs central finite differences") {
    Rng rng(7);
    auto a = rand_tensor({4, 3}, rng);
    auto b = rand_tensor({3, 5}, rng);
    bool ok = gradcheck::check({a, b}, [&]() { return weighted_sum(matmul(a, b), 99); });
    REQUIRE(ok);
}

TEST_CASE("softmax_cross_entropy examples") {
    SECTION("uniform logits give ln v") {
        auto logits = Tensor<float>::full({1, 4}, 0.25f);
        auto loss = softmax_cross_entropy(logits, {2}, {true});
        REQUIRE(loss.scalar_value() == Catch::Approx(std::log(4.0)).epsilon(1e-6));
    }
    SECTION("saturated one-hot logits give ~0") {
        auto logits = Tensor<float>::from_data({1, 4}, {0, 0, 1000, 0});
        auto loss = softmax_cross_entropy(logits, {2}, {true});
        REQUIRE(std::abs(loss.scalar_value()) < 1e-6);
    }
    SECTION("random case matches brute-force log-sum-exp") {
        Rng rng(123);
        auto logits = rand_tensor({3, 7}, rng, false, 2.0);
        std::vector<int> targets = {1, 6, 0};
        std::vector<bool> mask = {true, false, true};
        auto loss = softmax_cross_entropy(logits, targets, mask);

        double expected = 0.0;
        int active = 0;
        for (std::size_t i = 0; i < 3; ++i) {
            if (!mask[i]) continue;
            double z = 0.0;
            for (std::size_t j = 0; j < 7; ++j) z += std::exp(logits.at(i, j));
            expected += -(logits.at(i, static_cast<std::size_t>(targets[i])) - std::log(z));
            ++active;
        }
        expected /= active;
        REQUIRE(loss.scalar_value() == Catch::Approx(expected).epsilon(1e-6));
    }
    SECTION("all-masked input is an error") {
        auto logits = Tensor<float>::zeros({2, 4});
        REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {0, 0}, {false, false}), DataError);
    }
}

TEST_CASE("log_sigmoid tails") {
    REQUIRE(log_sigmoid(Tensor<double>::scalar(0.0)).scalar_value() ==
            Catch::Approx(-std::log(2.0)).epsilon(1e-12));
    double hi = log_sigmoid(Tensor<double>::scalar(50.0)).scalar_value();
    REQUIRE(hi < 0.0);
    REQUIRE(hi > -1e-20);
    double lo = log_sigmoid(Tensor<double>::scalar(-50.0)).scalar_value();
    REQUIRE(std::isfinite(lo));
    REQUIRE(lo == Catch::Approx(-50.0).margin(1e-9));
}

TEST_CASE("backward fills exactly the reachable gradients") {
    Tape<float> tape;
    auto x = Tensor<float>::full({2, 2}, 3.0f, true);
    auto y = Tensor<float>::full({2, 2}, 5.0f, true);  // recorded but unused
    {
        TapeScope<float> scope(tape);
        auto loss = sum(x);
        (void)add(y, y);  // y participates in an op whose result is dropped
        tape.backward(loss);
    }
    REQUIRE(x.has_grad());
    for (float g : x.grad()) REQUIRE(g == 1.0f);
    if (y.has_grad()) {
        for (float g : y.grad()) REQUIRE(g == 0.0f);
    }
}

TEST_CASE("backward rejects non-scalar loss and double reverse") {
    Tape<float> tape;
    auto x = Tensor<float>::full({2, 2}, 1.0f, true);
    Tensor<float> loss;
    {
        TapeScope<float> scope(tape);
        auto y = scale(x, 2.0f);
        REQUIRE_THROWS_AS(tape.backward(y), DimensionError);
        loss = sum(y);
    }
    tape.backward(loss);
    REQUIRE_THROWS(tape.backward(loss));
}

TEST_CASE("tensor with requires_grad=false never accumulates gradient") {
    Tape<float> tape;
    auto x = Tensor<float>::full({2, 2}, 1.0f, true);
    auto w = Tensor<float>::full({2, 2}, 2.0f, false);
    {
        TapeScope<float> scope(tape);
        auto loss = sum(matmul(x, w));
        tape.backward(loss);
    }
    REQUIRE(x.has_grad());
    REQUIRE_FALSE(w.has_grad());
}

TEST_CASE("disabling recording changes no forward value") {
    Rng rng(11);
    auto a32 = Tensor<float>::randn({5, 4}, rng, 1.0, true);
    Rng rng2(11);
    auto a32b = Tensor<float>::randn({5, 4}, rng2, 1.0, true);
    REQUIRE(a32.data() == a32b.data());

    auto g = Tensor<float>::full({4}, 1.0f);
    Tape<float> tape;
    Tensor<float> with_tape, without_tape;
    {
        TapeScope<float> scope(tape);
        with_tape = rms_norm(a32, g);
    }
    without_tape = rms_norm(a32b, g);
    REQUIRE(with_tape.data() == without_tape.data());
    REQUIRE(tape.size() == 1);
}

TEST_CASE("forward results are bit-identical across repeat runs") {
    Rng rng(42);
    auto a = Tensor<float>::randn({8, 16}, rng, 1.0);
    auto b = Tensor<float>::randn({16, 12}, rng, 1.0);
    auto r1 = matmul(a, b);
    auto r2 = matmul(a, b);
    REQUIRE(r1.data() == r2.data());
}

TEST_CASE("every differentiable primitive passes finite differences on 20 seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        DYNAMIC_SECTION("seed " << seed) {
            Rng rng(seed);
            gradcheck::Failure f;

            auto a = rand_tensor({3, 4}, rng);
            auto b = rand_tensor({3, 4}, rng);
            auto sq = rand_tensor({4, 4}, rng);
            auto m1 = rand_tensor({3, 4}, rng);
            auto m2 = rand_tensor({4, 5}, rng);
            auto mt = rand_tensor({5, 4}, rng);
            auto gain = rand_tensor({4}, rng, true, 0.5);
            auto bias = rand_tensor({4}, rng);
            auto table = rand_tensor({6, 3}, rng);
            auto logits = rand_tensor({3, 5}, rng, true, 2.0);
            std::vector<int> ids = {1, 4, 0, 4};
            std::vector<int> targets = {2, 0, 4};
            std::vector<bool> mask = {true, false, true};

            auto run = [&](const char* name, std::vector<Tensor<double>> params,
                           std::function<Tensor<double>()> fn) {
                INFO(name << ": " << f.where << " analytic=" << f.analytic
                          << " numeric=" << f.numeric << " err=" << f.err);
                REQUIRE(gradcheck::check(std::move(params), fn, 1e-5, 1e-6, 1e-4, &f));
            };

            run("add", {a, b}, [&] { return weighted_sum(add(a, b), seed); });
            run("sub", {a, b}, [&] { return weighted_sum(sub(a, b), seed); });
            run("mul", {a, b}, [&] { return weighted_sum(mul(a, b), seed); });
            run("scale", {a}, [&] { return weighted_sum(scale(a, 1.7), seed); });
            run("add_scalar", {a}, [&] { return weighted_sum(add_scalar(a, 0.3), seed); });
            run("add_bias", {a, bias}, [&] { return weighted_sum(add_bias(a, bias), seed); });
            run("sum", {a}, [&] { return sum(a); });
            run("row_softmax", {a}, [&] { return weighted_sum(row_softmax(a), seed); });
            run("causal_row_softmax", {sq},
                [&] { return weighted_sum(causal_row_softmax(sq), seed); });
            run("rms_norm", {a, gain}, [&] { return weighted_sum(rms_norm(a, gain), seed); });
            run("silu", {a}, [&] { return weighted_sum(silu(a), seed); });
            run("matmul", {m1, m2}, [&] { return weighted_sum(matmul(m1, m2), seed); });
            run("matmul_nt", {m1, mt}, [&] { return weighted_sum(matmul_nt(m1, mt), seed); });
            run("embedding", {table},
                [&] { return weighted_sum(embedding(table, ids), seed); });
            run("slice_cols", {a}, [&] { return weighted_sum(slice_cols(a, 1, 3), seed); });
            run("concat_cols", {a, b}, [&] {
                return weighted_sum(concat_cols<double>({a, b}), seed);
            });
            run("gather_log_probs", {logits},
                [&] { return gather_log_probs(logits, targets, mask); });
            run("softmax_cross_entropy", {logits},
                [&] { return softmax_cross_entropy(logits, targets, mask); });
            run("log_sigmoid", {a}, [&] { return log_sigmoid(sum(a)); });
            run("dropout", {a}, [&] {
                Rng drop_rng(seed * 31 + 5);
                return weighted_sum(dropout(a, 0.25, drop_rng), seed);
            });
        }
    }
}

TEST_CASE("causal softmax rows sum to one over the allowed prefix") {
    Rng rng(5);
    auto sq = rand_tensor({6, 6}, rng, false, 3.0);
    auto sm = causal_row_softmax(sq);
    for (std::size_t i = 0; i < 6; ++i) {
        double rowsum = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            if (j > i) REQUIRE(sm.at(i, j) == 0.0);
            rowsum += sm.at(i, j);
        }
        REQUIRE(rowsum == Catch::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("dropout in eval paths is simply not applied") {
    // Inverted dropout: the training mask rescales survivors; there is no
    // eval-time rescaling because eval never calls dropout at all.
    Rng rng(3);
    auto x = rand_tensor({4, 4}, rng, false);
    Rng mask_rng(17);
    auto y = dropout(x, 0.5, mask_rng);
    int zeros = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) {
        if (y[i] == 0.0) {
            ++zeros;
        } else {
            REQUIRE(y[i] == Catch::Approx(x[i] * 2.0));
        }
    }
    REQUIRE(zeros > 0);
}
