#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qalign/common.hpp"
#include "qalign/tensor.hpp"

// Blockwise 4-bit NormalFloat quantization. A weight matrix is split into
// fixed-size blocks; each block stores one absmax scale and a 4-bit code per
// element, where codes index a 16-level codebook built from standard-normal
// quantiles normalized to [-1, 1] with an exact zero level.

namespace qalign {

namespace detail {

// Inverse standard-normal CDF: Acklam's rational approximation refined with
// one Halley step against erfc, accurate to ~1e-15 over (0, 1).
inline double probit(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("probit: p must lie in (0, 1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1.0 - plow;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= phigh) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // Halley refinement.
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * 3.14159265358979323846) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

}  // namespace detail

struct Nf4Codebook {
    std::vector<double> levels;  // 16 strictly increasing values in [-1, 1]
    std::string id;

    std::size_t zero_index() const {
        for (std::size_t i = 0; i < levels.size(); ++i)
            if (levels[i] == 0.0) return i;
        throw IntegrityError("Nf4Codebook: no exact zero level");
    }

    double max_gap() const {
        double g = 0.0;
        for (std::size_t i = 0; i + 1 < levels.size(); ++i)
            g = std::max(g, levels[i + 1] - levels[i]);
        return g;
    }

    // Nearest level to a value in [-1, 1]; exact midpoints resolve to the
    // lower index, so quantization is a pure function.
    std::size_t nearest(double v) const {
        std::size_t best = 0;
        double best_d = std::abs(v - levels[0]);
        for (std::size_t i = 1; i < levels.size(); ++i) {
            const double d = std::abs(v - levels[i]);
            if (d < best_d) {
                best = i;
                best_d = d;
            }
        }
        return best;
    }
};

// 16 levels as normalized standard-normal quantiles: the positive half takes
// 8 evenly spaced quantiles of (0.5, offset], the negative half 7, both
// normalized by the extreme quantile, plus an exact zero. The offset is the
// midpoint of the tail probabilities of 32- and 30-level symmetric grids.
inline const Nf4Codebook& build_codebook() {
    static const Nf4Codebook book = [] {
        Nf4Codebook cb;
        cb.id = "nf4-v1";
        const double offset = 1.0 - 0.5 * (1.0 / 32.0 + 1.0 / 30.0);
        const double norm = detail::probit(offset);
        std::vector<double> levels;
        for (int i = 0; i < 7; ++i) {
            const double p = offset + (0.5 - offset) * static_cast<double>(i) / 7.0;
            levels.push_back(-detail::probit(p) / norm);
        }
        levels.push_back(0.0);
        for (int i = 7; i >= 0; --i) {
            const double p = offset + (0.5 - offset) * static_cast<double>(i) / 8.0;
            levels.push_back(detail::probit(p) / norm);
        }
        std::sort(levels.begin(), levels.end());
        // The extremes are the normalizer divided by itself; pin them to
        // their exact values rather than trusting the division's rounding.
        levels.front() = -1.0;
        levels.back() = 1.0;
        cb.levels = levels;
        return cb;
    }();
    return book;
}

// Frozen base weight matrix in packed 4-bit form. Immutable after creation.
struct QuantizedTensor {
    std::vector<std::uint8_t> codes;  // two 4-bit indices per byte, low nibble = even element
    std::vector<float> scales;        // absmax per block
    std::uint32_t block_size = 0;
    std::vector<std::size_t> shape;
    std::string codebook_id;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

    void validate() const {
        const std::size_t n = numel();
        if (block_size < 2) throw IntegrityError("QuantizedTensor: block_size < 2");
        if (codes.size() != (n + 1) / 2)
            throw IntegrityError("QuantizedTensor: code bytes do not match shape");
        if (scales.size() != (n + block_size - 1) / block_size)
            throw IntegrityError("QuantizedTensor: scale count does not match shape");
        for (float s : scales) {
            if (!(s >= 0.0f) || !std::isfinite(s))
                throw IntegrityError("QuantizedTensor: negative or non-finite scale");
        }
    }
};

inline std::vector<std::uint8_t> pack_codes(const std::vector<std::uint8_t>& idx) {
    std::vector<std::uint8_t> out((idx.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] > 15)
            throw IntegrityError("pack_codes: code index " + std::to_string(idx[i]) +
                                 " exceeds 4 bits");
        if (i % 2 == 0)
            out[i / 2] |= idx[i];
        else
            out[i / 2] |= static_cast<std::uint8_t>(idx[i] << 4);
    }
    return out;
}

inline std::vector<std::uint8_t> unpack_codes(const std::vector<std::uint8_t>& packed,
                                              std::size_t n) {
    if (packed.size() != (n + 1) / 2)
        throw IntegrityError("unpack_codes: byte count does not match element count");
    std::vector<std::uint8_t> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (i % 2 == 0) ? (packed[i / 2] & 0x0f) : (packed[i / 2] >> 4);
    return out;
}

inline QuantizedTensor quantize(const Tensor<float>& w, std::uint32_t block_size = 64) {
    if (block_size < 2) throw ConfigError("quantize: block_size must be >= 2");
    const auto& data = w.data();
    for (float v : data) {
        if (!std::isfinite(v)) throw DataError("quantize: input contains NaN or Inf");
    }
    const Nf4Codebook& cb = build_codebook();
    const std::size_t n = data.size();
    const std::size_t n_blocks = (n + block_size - 1) / block_size;
    const std::uint8_t zero_idx = static_cast<std::uint8_t>(cb.zero_index());

    QuantizedTensor q;
    q.block_size = block_size;
    q.shape = w.shape();
    q.codebook_id = cb.id;
    q.scales.resize(n_blocks);
    std::vector<std::uint8_t> idx(n);
    for (std::size_t blk = 0; blk < n_blocks; ++blk) {
        const std::size_t lo = blk * block_size;
        const std::size_t hi = std::min(n, lo + block_size);
        float absmax = 0.0f;
        for (std::size_t i = lo; i < hi; ++i) absmax = std::max(absmax, std::abs(data[i]));
        q.scales[blk] = absmax;
        if (absmax == 0.0f) {
            for (std::size_t i = lo; i < hi; ++i) idx[i] = zero_idx;
            continue;
        }
        for (std::size_t i = lo; i < hi; ++i) {
            const double norm = static_cast<double>(data[i]) / static_cast<double>(absmax);
            idx[i] = static_cast<std::uint8_t>(cb.nearest(norm));
        }
    }
    q.codes = pack_codes(idx);
    return q;
}

template <typename S = float>
Tensor<S> dequantize(const QuantizedTensor& q) {
    q.validate();
    if (q.codebook_id != build_codebook().id)
        throw IntegrityError("dequantize: unknown codebook '" + q.codebook_id + "'");
    const Nf4Codebook& cb = build_codebook();
    const std::size_t n = q.numel();
    std::vector<std::uint8_t> idx = unpack_codes(q.codes, n);
    Tensor<S> out = Tensor<S>::zeros(q.shape);
    for (std::size_t i = 0; i < n; ++i) {
        const double scale = static_cast<double>(q.scales[i / q.block_size]);
        out[i] = static_cast<S>(scale * cb.levels[idx[i]]);
    }
    return out;
}

}  // namespace qalign
