#pragma once

#include <algorithm>
#include <cmath>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "qalign/rng.hpp"
#include "qalign/tensor.hpp"

// Differentiable primitives over Tensor<S>. Every op:
//   - computes its forward value identically with or without an active tape,
//   - records exactly one reverse step when any input requires grad,
//   - accumulates, never overwrites, input gradients.
// Reductions accumulate in double regardless of S, in a fixed sequential
// order, so forward results are bit-identical across runs.

namespace qalign {

namespace detail {

template <typename S>
inline bool recording(const Tensor<S>& a) {
    return active_tape<S>() != nullptr && a.requires_grad();
}

template <typename S>
inline void require_2d(const Tensor<S>& t, const char* who) {
    if (t.rank() != 2) {
        std::ostringstream os;
        os << who << ": expected a 2-D tensor, got rank " << t.rank();
        throw DimensionError(os.str());
    }
}

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// C[m x n] = A[m x k] . B[k x n], optionally accumulating into C. Per-column
// double accumulators in a fixed sequential order: vectorizes without any
// reassociation license, and the summation order never depends on shape
// tiling or thread count.
template <typename S>
void gemm_rowmajor(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                   std::size_t n, bool add_into) {
    thread_local std::vector<double> acc;
    acc.assign(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = static_cast<double>(a[i * k + kk]);
            const S* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) acc[j] += aik * static_cast<double>(brow[j]);
        }
        S* crow = c + i * n;
        if (add_into) {
            for (std::size_t j = 0; j < n; ++j) crow[j] += static_cast<S>(acc[j]);
        } else {
            for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<S>(acc[j]);
        }
    }
}

template <typename S>
std::vector<S> transposed(const S* src, std::size_t rows, std::size_t cols) {
    std::vector<S> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
    return out;
}

}  // namespace detail

// out[m x n] = a[m x k] . b[k x n]
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions differ: " +
                             detail::shape_str(a.shape()) + " vs " +
                             detail::shape_str(b.shape()));
    }
    Tensor<S> out = Tensor<S>::zeros({m, n});
    detail::gemm_rowmajor(a.data().data(), b.data().data(), out.data().data(), m, k, n,
                          false);

    Tape<S>* tape = active_tape<S>();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            const std::vector<S>& g = out.grad();
            if (a.requires_grad()) {
                // dL/da = g . b^T
                std::vector<S> bt = detail::transposed(b.data().data(), k, n);
                detail::gemm_rowmajor(g.data(), bt.data(),
                                      const_cast<Tensor<S>&>(a).grad().data(), m, n, k,
                                      true);
            }
            if (b.requires_grad()) {
                // dL/db = a^T . g
                std::vector<S> at = detail::transposed(a.data().data(), m, k);
                detail::gemm_rowmajor(at.data(), g.data(),
                                      const_cast<Tensor<S>&>(b).grad().data(), k, m, n,
                                      true);
            }
        });
    }
    return out;
}

// out[m x n] = a[m x k] . b[n x k]^T  (rows of b are output features)
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (k != b.dim(1)) {
        throw DimensionError("matmul_nt: inner dimensions differ: " +
                             detail::shape_str(a.shape()) + " vs " +
                             detail::shape_str(b.shape()));
    }
    Tensor<S> out = Tensor<S>::zeros({m, n});
    {
        std::vector<S> bt = detail::transposed(b.data().data(), n, k);  // [k x n]
        detail::gemm_rowmajor(a.data().data(), bt.data(), out.data().data(), m, k, n,
                              false);
    }

    Tape<S>* tape = active_tape<S>();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
            const std::vector<S>& g = out.grad();
            if (a.requires_grad()) {
                // dL/da = g . b
                detail::gemm_rowmajor(g.data(), b.data().data(),
                                      const_cast<Tensor<S>&>(a).grad().data(), m, n, k,
                                      true);
            }
            if (b.requires_grad()) {
                // dL/db = g^T . a
                std::vector<S> gt = detail::transposed(g.data(), m, n);  // [n x m]
                detail::gemm_rowmajor(gt.data(), a.data().data(),
                                      const_cast<Tensor<S>&>(b).grad().data(), n, m, k,
                                      true);
            }
        });
    }
    return out;
}

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> elementwise_binary(const Tensor<S>& a, const Tensor<S>& b, const char* who,
                             Fwd fwd, Bwd bwd) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a[i], b[i]);
    Tape<S>* tape = active_tape<S>();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out, bwd]() mutable {
            if (!out.has_grad()) return;
            bwd(const_cast<Tensor<S>&>(a), const_cast<Tensor<S>&>(b), out);
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary(
        a, b, "add", [](S x, S y) { return x + y; },
        [](Tensor<S>& a, Tensor<S>& b, Tensor<S>& out) {
            const std::vector<S>& g = out.grad();
            if (a.requires_grad()) {
                std::vector<S>& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                std::vector<S>& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary(
        a, b, "sub", [](S x, S y) { return x - y; },
        [](Tensor<S>& a, Tensor<S>& b, Tensor<S>& out) {
            const std::vector<S>& g = out.grad();
            if (a.requires_grad()) {
                std::vector<S>& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                std::vector<S>& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary(
        a, b, "mul", [](S x, S y) { return x * y; },
        [](Tensor<S>& a, Tensor<S>& b, Tensor<S>& out) {
            const std::vector<S>& g = out.grad();
            if (a.requires_grad()) {
                std::vector<S>& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (b.requires_grad()) {
                std::vector<S>& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
        });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    Tape<S>* tape = active_tape<S>();
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([a, out, c]() mutable {
            if (!out.has_grad()) return;
            std::vector<S>& ga = const_cast<Tensor<S>&>(a).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + c;
    Tape<S>* tape = active_tape<S>();
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([a, out]() mutable {
            if (!out.has_grad()) return;
            std::vector<S>& ga = const_cast<Tensor<S>&>(a).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

// Row-broadcast bias add: x[m x n] + b[n]
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    detail::require_2d(x, "add_bias");
    if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
        throw DimensionError("add_bias: bias shape " + detail::shape_str(b.shape()) +
                             " does not match columns of " + detail::shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + b[j];
    Tape<S>* tape = active_tape<S>();
    if (tape && (x.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, b, out]() mutable {
            if (!out.has_grad()) return;
            const std::size_t m = x.dim(0), n = x.dim(1);
            const std::vector<S>& g = out.grad();
            if (x.requires_grad()) {
                std::vector<S>& gx = const_cast<Tensor<S>&>(x).grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.requires_grad()) {
                std::vector<S>& gb = const_cast<Tensor<S>&>(b).grad();
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i)
                        s += static_cast<double>(g[i * n + j]);
                    gb[j] += static_cast<S>(s);
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(s));
    Tape<S>* tape = active_tape<S>();
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([a, out]() mutable {
            if (!out.has_grad()) return;
            const S g = out.grad()[0];
            std::vector<S>& ga = const_cast<Tensor<S>&>(a).grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

// Row-wise softmax, numerically stabilized by max subtraction. Exponentials
// run in the scalar type; the normalizer accumulates in double.
template <typename S>
Tensor<S> row_softmax(const Tensor<S>& a) {
    detail::require_2d(a, "row_softmax");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    const S* pa = a.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = pa + i * n;
        S* orow = po + i * n;
        S mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += static_cast<double>(orow[j]);
        }
        const S inv = static_cast<S>(1.0 / z);
        for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    Tape<S>* tape = active_tape<S>();
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([a, out]() mutable {
            if (!out.has_grad()) return;
            const std::size_t m = a.dim(0), n = a.dim(1);
            std::vector<S>& ga = const_cast<Tensor<S>&>(a).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += static_cast<double>(g[i * n + j]) *
                           static_cast<double>(out.at(i, j));
                for (std::size_t j = 0; j < n; ++j) {
                    const double yj = static_cast<double>(out.at(i, j));
                    ga[i * n + j] +=
                        static_cast<S>(yj * (static_cast<double>(g[i * n + j]) - dot));
                }
            }
        });
    }
    return out;
}

// Softmax over a square score matrix where row t may attend to columns <= t.
// Masked-out entries are exactly zero in the output and receive no gradient.
template <typename S>
Tensor<S> causal_row_softmax(const Tensor<S>& a) {
    detail::require_2d(a, "causal_row_softmax");
    if (a.dim(0) != a.dim(1)) {
        throw DimensionError("causal_row_softmax: matrix must be square, got " +
                             detail::shape_str(a.shape()));
    }
    const std::size_t t = a.dim(0);
    Tensor<S> out = Tensor<S>::zeros({t, t});
    const S* pa = a.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < t; ++i) {
        const S* row = pa + i * t;
        S* orow = po + i * t;
        S mx = row[0];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += static_cast<double>(orow[j]);
        }
        const S inv = static_cast<S>(1.0 / z);
        for (std::size_t j = 0; j <= i; ++j) orow[j] *= inv;
    }
    Tape<S>* tape = active_tape<S>();
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([a, out]() mutable {
            if (!out.has_grad()) return;
            const std::size_t t = a.dim(0);
            std::vector<S>& ga = const_cast<Tensor<S>&>(a).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < t; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j)
                    dot += static_cast<double>(g[i * t + j]) *
                           static_cast<double>(out.at(i, j));
                for (std::size_t j = 0; j <= i; ++j) {
                    const double yj = static_cast<double>(out.at(i, j));
                    ga[i * t + j] +=
                        static_cast<S>(yj * (static_cast<double>(g[i * t + j]) - dot));
                }
            }
        });
    }
    return out;
}

// RMS normalization with learned per-column gain:
//   y[i,j] = gain[j] * x[i,j] / sqrt(mean_j(x[i,:]^2) + eps)
template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain, double eps = 1e-6) {
    detail::require_2d(x, "rms_norm");
    if (gain.rank() != 1 || gain.dim(0) != x.dim(1)) {
        throw DimensionError("rms_norm: gain shape " + detail::shape_str(gain.shape()) +
                             " does not match columns of " + detail::shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    std::vector<double> rinv(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = static_cast<double>(x.at(i, j));
            ss += v * v;
        }
        rinv[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = static_cast<S>(static_cast<double>(gain[j]) *
                                          static_cast<double>(x.at(i, j)) * rinv[i]);
    }
    Tape<S>* tape = active_tape<S>();
    if (tape && (x.requires_grad() || gain.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, gain, out, rinv]() mutable {
            if (!out.has_grad()) return;
            const std::size_t m = x.dim(0), n = x.dim(1);
            const std::vector<S>& g = out.grad();
            std::vector<S>* gx =
                x.requires_grad() ? &const_cast<Tensor<S>&>(x).grad() : nullptr;
            std::vector<S>* gg =
                gain.requires_grad() ? &const_cast<Tensor<S>&>(gain).grad() : nullptr;
            for (std::size_t i = 0; i < m; ++i) {
                const double r = rinv[i];
                if (gx) {
                    // gy_j = g_j * gain_j; dx_j = r*gy_j - (r^3/n) x_j sum_i(gy_i x_i)
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        dot += static_cast<double>(g[i * n + j]) *
                               static_cast<double>(gain[j]) *
                               static_cast<double>(x.at(i, j));
                    const double c = r * r * r * dot / static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gy = static_cast<double>(g[i * n + j]) *
                                          static_cast<double>(gain[j]);
                        (*gx)[i * n + j] +=
                            static_cast<S>(r * gy - c * static_cast<double>(x.at(i, j)));
                    }
                }
                if (gg) {
                    for (std::size_t j = 0; j < n; ++j)
                        (*gg)[j] += static_cast<S>(static_cast<double>(g[i * n + j]) *
                                                   static_cast<double>(x.at(i, j)) * r);
                }
            }
        });
    }
    return out;
}

// SiLU activation x * sigmoid(x); the MLP nonlinearity.
template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* px = x.data().data();
    S* po = out.data().data();
    const std::size_t total = x.numel();
    for (std::size_t i = 0; i < total; ++i) {
        const S v = px[i];
        po[i] = v / (S(1) + std::exp(-v));
    }
    Tape<S>* tape = active_tape<S>();
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            std::vector<S>& gx = const_cast<Tensor<S>&>(x).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>(x[i]);
                const double sig = 1.0 / (1.0 + std::exp(-v));
                gx[i] += static_cast<S>(static_cast<double>(g[i]) *
                                        (sig * (1.0 + v * (1.0 - sig))));
            }
        });
    }
    return out;
}

// Embedding lookup: rows of table selected by ids.
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
    detail::require_2d(table, "embedding");
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw DimensionError("embedding: id " + std::to_string(id) +
                                 " outside table of " + std::to_string(v) + " rows");
        }
    }
    Tensor<S> out = Tensor<S>::zeros({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const S* src = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data().data() + i * d);
    }
    Tape<S>* tape = active_tape<S>();
    if (tape && table.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([table, out, ids]() mutable {
            if (!out.has_grad()) return;
            const std::size_t d = table.dim(1);
            std::vector<S>& gt = const_cast<Tensor<S>&>(table).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                S* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
                const S* src = g.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Column slice [c0, c1) of a 2-D tensor.
template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, std::size_t c0, std::size_t c1) {
    detail::require_2d(a, "slice_cols");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (c0 >= c1 || c1 > n) {
        throw DimensionError("slice_cols: range [" + std::to_string(c0) + ", " +
                             std::to_string(c1) + ") invalid for " +
                             detail::shape_str(a.shape()));
    }
    const std::size_t w = c1 - c0;
    Tensor<S> out = Tensor<S>::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i)
        std::copy(a.data().data() + i * n + c0, a.data().data() + i * n + c1,
                  out.data().data() + i * w);
    Tape<S>* tape = active_tape<S>();
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([a, out, c0, w]() mutable {
            if (!out.has_grad()) return;
            const std::size_t m = a.dim(0), n = a.dim(1);
            std::vector<S>& ga = const_cast<Tensor<S>&>(a).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) ga[i * n + c0 + j] += g[i * w + j];
        });
    }
    return out;
}

// Concatenate 2-D tensors along columns.
template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0].dim(0);
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.dim(0) != m)
            throw DimensionError("concat_cols: row counts differ");
        n += p.dim(1);
    }
    Tensor<S> out = Tensor<S>::zeros({m, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            std::copy(p.data().data() + i * w, p.data().data() + (i + 1) * w,
                      out.data().data() + i * n + off);
        off += w;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    Tape<S>* tape = active_tape<S>();
    if (tape && any_grad) {
        out.set_requires_grad(true);
        tape->record([parts, out]() mutable {
            if (!out.has_grad()) return;
            const std::size_t m = out.dim(0), n = out.dim(1);
            const std::vector<S>& g = out.grad();
            std::size_t off = 0;
            for (const auto& p : parts) {
                const std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    std::vector<S>& gp = const_cast<Tensor<S>&>(p).grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            gp[i * w + j] += g[i * n + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

// Sum over selected rows of log softmax(logits)[target]. The workhorse of
// sequence log-likelihood: rows with mask[i]=false contribute nothing.
template <typename S>
Tensor<S> gather_log_probs(const Tensor<S>& logits, const std::vector<int>& targets,
                           const std::vector<bool>& mask) {
    detail::require_2d(logits, "gather_log_probs");
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    if (targets.size() != n || mask.size() != n) {
        throw DimensionError("gather_log_probs: targets/mask length must equal rows");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] && (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)) {
            throw DimensionError("gather_log_probs: target " + std::to_string(targets[i]) +
                                 " outside vocab of " + std::to_string(v));
        }
    }
    // Softmax rows are kept for the backward pass.
    std::vector<S> probs(n * v, S(0));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const S* row = logits.data().data() + i * v;
        double mx = -HUGE_VAL;
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        const double logz = std::log(z) + mx;
        for (std::size_t j = 0; j < v; ++j)
            probs[i * v + j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - logz));
        total += static_cast<double>(row[static_cast<std::size_t>(targets[i])]) - logz;
    }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total));
    Tape<S>* tape = active_tape<S>();
    if (tape && logits.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([logits, out, targets, mask, probs = std::move(probs)]() mutable {
            if (!out.has_grad()) return;
            const std::size_t n = logits.dim(0), v = logits.dim(1);
            const double g = static_cast<double>(out.grad()[0]);
            std::vector<S>& gl = const_cast<Tensor<S>&>(logits).grad();
            for (std::size_t i = 0; i < n; ++i) {
                if (!mask[i]) continue;
                const std::size_t tgt = static_cast<std::size_t>(targets[i]);
                for (std::size_t j = 0; j < v; ++j) {
                    const double p = static_cast<double>(probs[i * v + j]);
                    const double ind = (j == tgt) ? 1.0 : 0.0;
                    gl[i * v + j] += static_cast<S>(g * (ind - p));
                }
            }
        });
    }
    return out;
}

// Mean over unmasked rows of -log softmax(logits)[target].
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                                const std::vector<bool>& mask) {
    std::size_t n_active = 0;
    for (bool m : mask)
        if (m) ++n_active;
    if (n_active == 0) {
        throw DataError("softmax_cross_entropy: all positions masked, mean undefined");
    }
    Tensor<S> lp = gather_log_probs(logits, targets, mask);
    return scale(lp, static_cast<S>(-1.0 / static_cast<double>(n_active)));
}

// log(sigmoid(x)) on a scalar, computed as -softplus(-x); saturates cleanly
// at both tails. Gradient is sigmoid(-x).
template <typename S>
Tensor<S> log_sigmoid(const Tensor<S>& x) {
    if (!x.is_scalar()) throw DimensionError("log_sigmoid: expected a scalar tensor");
    const double v = static_cast<double>(x[0]);
    const double y = (v >= 0.0) ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(y));
    Tape<S>* tape = active_tape<S>();
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double v = static_cast<double>(x[0]);
            const double sig_neg = 1.0 / (1.0 + std::exp(v));
            const_cast<Tensor<S>&>(x).grad()[0] +=
                static_cast<S>(static_cast<double>(out.grad()[0]) * sig_neg);
        });
    }
    return out;
}

// Inverted dropout on the adapter input. Mask is drawn from the provided
// Rng, so a fixed seed fixes the mask. No-op shape-wise; eval paths simply
// never call it.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1)");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> mask(x.numel());
    const double keep = 1.0 - p;
    const double inv_keep = 1.0 / keep;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        mask[i] = (rng.next_unit() < keep) ? static_cast<S>(inv_keep) : S(0);
        out[i] = x[i] * mask[i];
    }
    Tape<S>* tape = active_tape<S>();
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([x, out, mask = std::move(mask)]() mutable {
            if (!out.has_grad()) return;
            std::vector<S>& gx = const_cast<Tensor<S>&>(x).grad();
            const std::vector<S>& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
        });
    }
    return out;
}

}  // namespace qalign
