#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "qalign/lora.hpp"
#include "qalign/ops.hpp"
#include "qalign/tokenizer.hpp"

// A miniature decoder-only transformer: byte-level vocabulary, learned
// positional embeddings, RMS-normalized pre-norm blocks with causal
// multi-head attention and a SiLU MLP. The same architecture runs with dense
// or NF4-quantized linear weights; only the weight representation differs.

namespace qalign {

struct AdapterProfile {
    int rank = 0;  // 0 = no adapters
    double alpha = 8.0;
    double dropout_p = 0.1;
};

struct ModelConfig {
    std::size_t vocab_size = kVocabSize;
    std::size_t d_model = 128;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t max_seq_len = 256;
    bool quantized = false;
    std::uint32_t block_size = 64;
    AdapterProfile adapter;

    void validate() const {
        if (d_model == 0 || n_layers == 0 || n_heads == 0 || vocab_size == 0)
            throw ConfigError("ModelConfig: zero-sized dimension");
        if (d_model % n_heads != 0)
            throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
    }

    std::size_t d_head() const { return d_model / n_heads; }
};

template <typename S>
struct TransformerBlock {
    Tensor<S> attn_norm_gain;
    Tensor<S> mlp_norm_gain;
    QuantLinear<S> wq, wk, wv, wo;
    QuantLinear<S> w_up, w_down;
};

template <typename S>
struct Model {
    ModelConfig config;
    Tensor<S> tok_embed;  // [vocab x d_model]
    Tensor<S> pos_embed;  // [max_seq_len x d_model]
    Tensor<S> final_norm_gain;
    QuantLinear<S> lm_head;  // [vocab x d_model]
    std::vector<TransformerBlock<S>> blocks;

    // Visits every parameter tensor with a stable name; quantized layers are
    // skipped (they carry no Tensor parameters).
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        auto visit_linear = [&](QuantLinear<S>& lin, const std::string& name) {
            if (!lin.is_quantized()) fn(name + ".weight", lin.dense);
            if (lin.bias.defined()) fn(name + ".bias", lin.bias);
            if (lin.adapter) {
                fn(name + ".adapter.a", lin.adapter->a);
                fn(name + ".adapter.b", lin.adapter->b);
            }
        };
        fn("tok_embed", tok_embed);
        fn("pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            fn(p + ".attn_norm", blocks[i].attn_norm_gain);
            fn(p + ".mlp_norm", blocks[i].mlp_norm_gain);
            visit_linear(blocks[i].wq, p + ".wq");
            visit_linear(blocks[i].wk, p + ".wk");
            visit_linear(blocks[i].wv, p + ".wv");
            visit_linear(blocks[i].wo, p + ".wo");
            visit_linear(blocks[i].w_up, p + ".w_up");
            visit_linear(blocks[i].w_down, p + ".w_down");
        }
        fn("final_norm", final_norm_gain);
        visit_linear(lm_head, "lm_head");
    }

    template <typename Fn>
    void for_each_adapter(Fn&& fn) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            auto visit = [&](QuantLinear<S>& lin, const std::string& name) {
                if (lin.adapter) fn(name, *lin.adapter);
            };
            visit(blocks[i].wq, p + ".wq");
            visit(blocks[i].wk, p + ".wk");
            visit(blocks[i].wv, p + ".wv");
            visit(blocks[i].wo, p + ".wo");
        }
    }

    template <typename Fn>
    void for_each_quantized(Fn&& fn) {
        auto visit = [&](QuantLinear<S>& lin, const std::string& name) {
            if (lin.is_quantized()) fn(name + ".weight", *lin.quant);
        };
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            visit(blocks[i].wq, p + ".wq");
            visit(blocks[i].wk, p + ".wk");
            visit(blocks[i].wv, p + ".wv");
            visit(blocks[i].wo, p + ".wo");
            visit(blocks[i].w_up, p + ".w_up");
            visit(blocks[i].w_down, p + ".w_down");
        }
        visit(lm_head, "lm_head");
    }

    void set_dequant_cache(bool enabled) {
        auto each = [&](QuantLinear<S>& lin) {
            lin.cache_dequant = enabled;
            if (enabled)
                lin.prepare_cache();
            else
                lin.drop_cache();
        };
        for (auto& b : blocks) {
            each(b.wq);
            each(b.wk);
            each(b.wv);
            each(b.wo);
            each(b.w_up);
            each(b.w_down);
        }
        each(lm_head);
    }

    // Only adapters train; everything else is a frozen base parameter.
    void freeze_base() {
        for_each_param([](const std::string&, Tensor<S>& t) { t.set_requires_grad(false); });
        for_each_adapter([](const std::string&, AdapterPair<S>& ad) {
            ad.a.set_requires_grad(true);
            ad.b.set_requires_grad(true);
        });
    }

    std::uint64_t param_checksum() {
        std::uint64_t h = 14695981039346656037ull;
        for_each_param([&](const std::string& name, Tensor<S>& t) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(t.data().data(), t.data().size() * sizeof(S), h);
        });
        for_each_quantized([&](const std::string& name, QuantizedTensor& q) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(q.codes.data(), q.codes.size(), h);
            h = fnv1a64(q.scales.data(), q.scales.size() * sizeof(float), h);
        });
        return h;
    }
};

// Dense model with Gaussian-initialized weights; the starting point of the
// pipeline before any base-model training or quantization.
template <typename S>
Model<S> make_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    Model<S> m;
    m.config = config;
    const std::size_t d = config.d_model, v = config.vocab_size, ff = config.d_ff;
    const double std0 = 0.02;

    auto dense_linear = [&](std::size_t rows, std::size_t cols) {
        QuantLinear<S> lin;
        lin.dense = Tensor<S>::randn({rows, cols}, rng, std0, true);
        return lin;
    };

    m.tok_embed = Tensor<S>::randn({v, d}, rng, std0, true);
    m.pos_embed = Tensor<S>::randn({config.max_seq_len, d}, rng, std0, true);
    m.blocks.resize(config.n_layers);
    for (auto& b : m.blocks) {
        b.attn_norm_gain = Tensor<S>::full({d}, S(1), true);
        b.mlp_norm_gain = Tensor<S>::full({d}, S(1), true);
        b.wq = dense_linear(d, d);
        b.wk = dense_linear(d, d);
        b.wv = dense_linear(d, d);
        b.wo = dense_linear(d, d);
        b.w_up = dense_linear(ff, d);
        b.w_down = dense_linear(d, ff);
    }
    m.final_norm_gain = Tensor<S>::full({d}, S(1), true);
    m.lm_head = dense_linear(v, d);
    return m;
}

// Attaches fresh adapters to the attention projections of every block; MLP
// layers stay bare.
template <typename S>
void attach_adapters(Model<S>& model, const AdapterProfile& profile, std::uint64_t seed) {
    if (profile.rank < 1) throw ConfigError("attach_adapters: rank must be >= 1");
    model.config.adapter = profile;
    const std::size_t d = model.config.d_model;
    std::size_t layer_idx = 0;
    for (auto& b : model.blocks) {
        QuantLinear<S>* projs[4] = {&b.wq, &b.wk, &b.wv, &b.wo};
        for (std::size_t j = 0; j < 4; ++j) {
            projs[j]->adapter = init_adapter<S>(
                d, d, profile.rank, profile.alpha, profile.dropout_p,
                derive_subseed(seed, "adapter." + std::to_string(layer_idx) + "." +
                                         std::to_string(j)));
        }
        ++layer_idx;
    }
}

// Converts every linear weight to NF4; embeddings and norm gains stay dense
// but frozen. Adapters, if any, are preserved untouched.
template <typename S>
Model<S> quantize_model(const Model<S>& src_in, std::uint32_t block_size) {
    Model<S> m = src_in;  // shallow tensor handles; replaced below
    auto q = [&](QuantLinear<S>& lin) {
        if (lin.is_quantized()) throw ConfigError("quantize_model: layer already quantized");
        Tensor<float> w32 = Tensor<float>::zeros(lin.dense.shape());
        for (std::size_t i = 0; i < w32.numel(); ++i)
            w32[i] = static_cast<float>(lin.dense[i]);
        lin.quant = quantize(w32, block_size);
        lin.dense = Tensor<S>();
        lin.drop_cache();
    };
    m.config.quantized = true;
    m.config.block_size = block_size;
    m.tok_embed = m.tok_embed.clone();
    m.pos_embed = m.pos_embed.clone();
    m.final_norm_gain = m.final_norm_gain.clone();
    for (auto& b : m.blocks) {
        b.attn_norm_gain = b.attn_norm_gain.clone();
        b.mlp_norm_gain = b.mlp_norm_gain.clone();
        for (QuantLinear<S>* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down}) q(*lin);
    }
    q(m.lm_head);
    m.freeze_base();
    return m;
}

// Full deep copy (parameters duplicated, adapters included). Used to snapshot
// reference models.
template <typename S>
Model<S> deep_copy(const Model<S>& src) {
    Model<S> m = src;
    auto dup = [](QuantLinear<S>& lin) {
        if (!lin.is_quantized()) lin.dense = lin.dense.clone();
        if (lin.bias.defined()) lin.bias = lin.bias.clone();
        if (lin.adapter) {
            lin.adapter->a = lin.adapter->a.clone();
            lin.adapter->b = lin.adapter->b.clone();
        }
        lin.drop_cache();
        lin.prepare_cache();
    };
    m.tok_embed = m.tok_embed.clone();
    m.pos_embed = m.pos_embed.clone();
    m.final_norm_gain = m.final_norm_gain.clone();
    for (auto& b : m.blocks) {
        b.attn_norm_gain = b.attn_norm_gain.clone();
        b.mlp_norm_gain = b.mlp_norm_gain.clone();
        for (QuantLinear<S>* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down})
            dup(*lin);
    }
    dup(m.lm_head);
    return m;
}

// Causal logits over the whole sequence: row t predicts token t+1 and sees
// only positions <= t.
template <typename S>
Tensor<S> forward_logits(const Model<S>& model, const std::vector<int>& ids,
                         bool training = false, Rng* dropout_rng = nullptr) {
    const ModelConfig& cfg = model.config;
    if (ids.empty()) throw DataError("forward_logits: empty sequence");
    if (ids.size() > cfg.max_seq_len) {
        throw DataError("forward_logits: sequence of " + std::to_string(ids.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len) +
                        "; refusing to truncate silently");
    }
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw DataError("forward_logits: token id " + std::to_string(id) +
                            " outside vocab");
    }
    const std::size_t t = ids.size();
    std::vector<int> pos(t);
    std::iota(pos.begin(), pos.end(), 0);

    Tensor<S> x = add(embedding(model.tok_embed, ids), embedding(model.pos_embed, pos));
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.d_head())));

    for (const auto& b : model.blocks) {
        Tensor<S> xn = rms_norm(x, b.attn_norm_gain);
        Tensor<S> q = adapted_forward(b.wq, xn, training, dropout_rng);
        Tensor<S> k = adapted_forward(b.wk, xn, training, dropout_rng);
        Tensor<S> v = adapted_forward(b.wv, xn, training, dropout_rng);

        std::vector<Tensor<S>> heads;
        heads.reserve(cfg.n_heads);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t c0 = h * cfg.d_head(), c1 = c0 + cfg.d_head();
            Tensor<S> qh = slice_cols(q, c0, c1);
            Tensor<S> kh = slice_cols(k, c0, c1);
            Tensor<S> vh = slice_cols(v, c0, c1);
            Tensor<S> scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
            Tensor<S> attn = causal_row_softmax(scores);
            heads.push_back(matmul(attn, vh));
        }
        Tensor<S> cat = cfg.n_heads == 1 ? heads[0] : concat_cols(heads);
        x = add(x, adapted_forward(b.wo, cat, training, dropout_rng));

        Tensor<S> mn = rms_norm(x, b.mlp_norm_gain);
        Tensor<S> up = silu(adapted_forward(b.w_up, mn, training, dropout_rng));
        x = add(x, adapted_forward(b.w_down, up, training, dropout_rng));
    }
    Tensor<S> xf = rms_norm(x, model.final_norm_gain);
    return adapted_forward(model.lm_head, xf, training, dropout_rng);
}

template <typename S>
Tensor<S> forward_logits(const Model<S>& model, const TokenSequence& seq,
                         bool training = false, Rng* dropout_rng = nullptr) {
    return forward_logits(model, seq.ids, training, dropout_rng);
}

// Conditional response log-likelihood: sum of log softmax(logits)[next]
// over response positions only. Prompt positions are never scored.
template <typename S>
Tensor<S> sequence_logprob(const Model<S>& model, const TokenSequence& seq,
                           bool training = false, Rng* dropout_rng = nullptr) {
    if (seq.response.empty())
        throw DataError("sequence_logprob: response span is empty");
    if (seq.response.begin == 0 || seq.response.end > seq.ids.size())
        throw DataError("sequence_logprob: response span out of range");
    Tensor<S> logits = forward_logits(model, seq.ids, training, dropout_rng);
    const std::size_t t = seq.ids.size();
    std::vector<int> targets(t, 0);
    std::vector<bool> mask(t, false);
    for (std::size_t i = seq.response.begin; i < seq.response.end; ++i) {
        targets[i - 1] = seq.ids[i];
        mask[i - 1] = true;
    }
    return gather_log_probs(logits, targets, mask);
}

// Argmax decoding with lowest-id tie break; stops at EOS (unless told not
// to), max_new_tokens, or a full context window.
template <typename S>
TokenSequence greedy_decode(const Model<S>& model, const TokenSequence& prompt,
                            std::size_t max_new_tokens, bool stop_at_eos = true) {
    if (prompt.ids.size() > model.config.max_seq_len)
        throw DataError("greedy_decode: prompt does not fit in the context window");
    NoGradScope<S> no_grad;
    TokenSequence out = prompt;
    out.response.begin = out.ids.size();
    for (std::size_t step = 0; step < max_new_tokens; ++step) {
        if (out.ids.size() >= model.config.max_seq_len) break;
        Tensor<S> logits = forward_logits(model, out.ids);
        const std::size_t last = out.ids.size() - 1;
        int best = 0;
        S best_v = logits.at(last, 0);
        for (std::size_t j = 1; j < model.config.vocab_size; ++j) {
            if (logits.at(last, j) > best_v) {
                best_v = logits.at(last, j);
                best = static_cast<int>(j);
            }
        }
        out.ids.push_back(best);
        if (stop_at_eos && best == kEos) break;
    }
    out.response.end = out.ids.size();
    return out;
}

}  // namespace qalign
