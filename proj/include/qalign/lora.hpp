#pragma once

#include <optional>
#include <string>

#include "qalign/nf4.hpp"
#include "qalign/ops.hpp"
#include "qalign/rng.hpp"
#include "qalign/tensor.hpp"

// Low-rank adapters over frozen linear layers. The effective weight of an
// adapted layer is W + (alpha/r) * A * B^T with only A and B trainable; B is
// zero at init so an adapted model is exactly the base model at step 0.

namespace qalign {

template <typename S>
struct AdapterPair {
    Tensor<S> a;  // [d_out x r], Gaussian init
    Tensor<S> b;  // [d_in x r], zero init
    int rank = 0;
    double alpha = 0.0;
    double dropout_p = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

template <typename S>
AdapterPair<S> init_adapter(std::size_t d_out, std::size_t d_in, int r, double alpha,
                            double dropout_p, std::uint64_t seed) {
    if (r < 1) throw ConfigError("init_adapter: rank must be >= 1");
    const std::size_t lim = std::min(d_out, d_in) / 2;
    if (static_cast<std::size_t>(r) > lim) {
        throw ConfigError("init_adapter: rank " + std::to_string(r) +
                          " exceeds min(d_out,d_in)/2 = " + std::to_string(lim));
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw ConfigError("init_adapter: dropout_p must be in [0, 1)");
    Rng rng(seed);
    AdapterPair<S> ad;
    ad.a = Tensor<S>::randn({d_out, static_cast<std::size_t>(r)}, rng, 0.02, true);
    ad.b = Tensor<S>::zeros({d_in, static_cast<std::size_t>(r)}, true);
    ad.rank = r;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    return ad;
}

// A linear layer y = x . W^T (+ bias) whose base weight is either a frozen
// NF4-quantized matrix or a dense matrix (the pre-quantization / verification
// form), with an optional adapter on top.
template <typename S>
struct QuantLinear {
    std::optional<QuantizedTensor> quant;  // engaged => frozen 4-bit base
    Tensor<S> dense;                       // engaged => dense base (trainable in pretraining)
    std::optional<AdapterPair<S>> adapter;
    Tensor<S> bias;  // optional; undefined when absent
    bool cache_dequant = false;

    std::size_t d_out() const {
        return quant ? quant->shape[0] : dense.dim(0);
    }
    std::size_t d_in() const {
        return quant ? quant->shape[1] : dense.dim(1);
    }
    bool is_quantized() const { return quant.has_value(); }

    // Dequantizes once and reuses the dense copy; call before read-only
    // parallel evaluation, never mid-step.
    void prepare_cache() {
        if (quant && cache_dequant && !cache_.defined()) cache_ = dequantize<S>(*quant);
    }

    void drop_cache() { cache_ = Tensor<S>(); }

    Tensor<S> base_weight() const {
        if (!quant) return dense;
        if (cache_dequant && cache_.defined()) return cache_;
        return dequantize<S>(*quant);
    }

private:
    Tensor<S> cache_;
};

// Forward through a (possibly adapted) linear layer. Dropout is applied to
// the adapter input only, only when training; the base path never sees it.
template <typename S>
Tensor<S> adapted_forward(const QuantLinear<S>& layer, const Tensor<S>& x, bool training,
                          Rng* dropout_rng = nullptr) {
    if (x.rank() != 2 || x.dim(1) != layer.d_in()) {
        throw DimensionError("adapted_forward: input columns " +
                             std::to_string(x.rank() == 2 ? x.dim(1) : 0) +
                             " do not match layer d_in " + std::to_string(layer.d_in()));
    }
    Tensor<S> out = matmul_nt(x, layer.base_weight());
    if (layer.adapter) {
        const AdapterPair<S>& ad = *layer.adapter;
        Tensor<S> ad_in = x;
        if (training && ad.dropout_p > 0.0) {
            if (!dropout_rng)
                throw ConfigError("adapted_forward: training with dropout needs an Rng");
            ad_in = dropout(x, ad.dropout_p, *dropout_rng);
        }
        Tensor<S> low = matmul(ad_in, ad.b);         // [t x r]
        Tensor<S> delta = matmul_nt(low, ad.a);      // [t x d_out]
        out = add(out, scale(delta, static_cast<S>(ad.scaling())));
    }
    if (layer.bias.defined()) out = add_bias(out, layer.bias);
    return out;
}

// Dense materialization of the effective weight, diagnostics and export only.
template <typename S>
Tensor<S> merge_delta(const QuantLinear<S>& layer) {
    if (!layer.adapter) throw ConfigError("merge_delta: layer has no adapter");
    const AdapterPair<S>& ad = *layer.adapter;
    Tensor<S> base = layer.base_weight();
    Tensor<S> delta = matmul_nt(ad.a, ad.b);  // [d_out x d_in]
    return add(base, scale(delta, static_cast<S>(ad.scaling())));
}

}  // namespace qalign
