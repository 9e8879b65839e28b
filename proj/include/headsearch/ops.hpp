#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "headsearch/errors.hpp"
#include "headsearch/pooling.hpp"
#include "headsearch/tensor.hpp"

namespace headsearch::nn {

// Sequence batches are stored flat as [B*T, D]; ops that care about sequence
// structure take the per-sequence length T. A RowMask marks valid (non-PAD)
// rows with 1; an empty mask means every row is valid.
using RowMask = std::vector<std::uint8_t>;

namespace detail {

inline std::vector<double> transposed(const double* a, std::size_t r, std::size_t c) {
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = a[i * c + j];
        }
    }
    return out;
}

inline void add_into(double* dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] += src[i];
    }
}

[[noreturn]] inline void dim_error(const std::string& op, const Tensor& a, const Tensor& b) {
    throw DimensionError(op + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

inline bool row_valid(const RowMask& mask, std::size_t row) {
    return mask.empty() || mask[row] != 0;
}

inline std::size_t check_seq(const std::string& op, const Tensor& x, std::size_t seq_len, const RowMask& mask) {
    if (seq_len == 0) {
        throw DimensionError(op + ": empty sequence (T = 0)");
    }
    if (x.rank() != 2 || x.rows() % seq_len != 0) {
        throw DimensionError(op + ": expected [B*T, D] with T = " + std::to_string(seq_len) + ", got " +
                             shape_str(x.shape()));
    }
    if (!mask.empty() && mask.size() != x.rows()) {
        throw DimensionError(op + ": mask length " + std::to_string(mask.size()) + " does not match " +
                             std::to_string(x.rows()) + " rows");
    }
    return x.rows() / seq_len;
}

// C[m, n] = A[m, k] * B[k, n], all row-major. Every output element is one
// multiply-add chain over k in order, so a row's result never depends on how
// many other rows are in the batch. Blocked BLAS kernels do not promise that.
#if defined(__GNUC__)
typedef double v8d __attribute__((vector_size(64)));

// R rows of A times a packed 16-column panel of B (row stride 16).
template <std::size_t R>
inline void gemm_tile(const double* A, std::size_t k, const double* panel, double* C, std::size_t ldc) {
    v8d acc[R][2] = {};
    for (std::size_t p = 0; p < k; ++p) {
        v8d b0, b1;
        __builtin_memcpy(&b0, panel + p * 16, sizeof b0);
        __builtin_memcpy(&b1, panel + p * 16 + 8, sizeof b1);
        for (std::size_t r = 0; r < R; ++r) {
            const double a = A[r * k + p];
            acc[r][0] = a * b0 + acc[r][0];
            acc[r][1] = a * b1 + acc[r][1];
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        __builtin_memcpy(C + r * ldc, &acc[r][0], sizeof acc[r][0]);
        __builtin_memcpy(C + r * ldc + 8, &acc[r][1], sizeof acc[r][1]);
    }
}
#endif

inline void gemm_cols(const double* A, const double* B, double* C, std::size_t r0, std::size_t r1, std::size_t k,
                      std::size_t n, std::size_t j0) {
    for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t j = j0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc = A[r * k + p] * B[p * n + j] + acc;
            }
            C[r * n + j] = acc;
        }
    }
}

inline void gemm_rows(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
#if defined(__GNUC__)
    // B is copied one 16-column panel at a time, zero-padded on the right; a
    // narrow last panel writes through a scratch buffer.
    std::vector<double> panel(k * 16), scratch;
    for (std::size_t j = 0; j < n; j += 16) {
        const std::size_t w = std::min<std::size_t>(16, n - j);
        for (std::size_t p = 0; p < k; ++p) {
            std::copy_n(B + p * n + j, w, panel.data() + p * 16);
            std::fill(panel.data() + p * 16 + w, panel.data() + p * 16 + 16, 0.0);
        }
        double* out = C + j;
        std::size_t ldc = n;
        if (w < 16) {
            scratch.assign(m * 16, 0.0);
            out = scratch.data();
            ldc = 16;
        }
        std::size_t i = 0;
        for (; i + 8 <= m; i += 8) {
            gemm_tile<8>(A + i * k, k, panel.data(), out + i * ldc, ldc);
        }
        for (; i < m; ++i) {
            gemm_tile<1>(A + i * k, k, panel.data(), out + i * ldc, ldc);
        }
        if (w < 16) {
            for (std::size_t r = 0; r < m; ++r) {
                std::copy_n(scratch.data() + r * 16, w, C + r * n + j);
            }
        }
    }
#else
    gemm_cols(A, B, C, 0, m, k, n, 0);
#endif
}

// g_times_bt: G[m, n] * B[k, n]^T; at_times_g: A[m, k]^T * G[m, n].
inline std::vector<double> g_times_bt(const double* G, const double* B, std::size_t m, std::size_t n, std::size_t k) {
    const std::vector<double> bt = transposed(B, k, n);
    std::vector<double> out(m * k);
    gemm_rows(G, bt.data(), out.data(), m, n, k);
    return out;
}
inline std::vector<double> at_times_g(const double* A, const double* G, std::size_t m, std::size_t k, std::size_t n) {
    const std::vector<double> at = transposed(A, m, k);
    std::vector<double> out(k * n);
    gemm_rows(at.data(), G, out.data(), k, m, n);
    return out;
}

} // namespace detail

// ─── Dense algebra ───────────────────────────────────────────────────────────

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        detail::dim_error("matmul", a, b);
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    detail::gemm_rows(a.data().data(), b.data().data(), out.data(), m, k, n);
    Tensor result = Tensor::make_result({m, n}, std::move(out), {a, b});
    result.set_backward([a, b, m, k, n](std::span<const double> g) mutable {
        if (a.requires_grad()) {
            detail::add_into(a.mutable_grad().data(), detail::g_times_bt(g.data(), b.data().data(), m, n, k));
        }
        if (b.requires_grad()) {
            detail::add_into(b.mutable_grad().data(), detail::at_times_g(a.data().data(), g.data(), m, k, n));
        }
    });
    return result;
}

// x[N, in] * w[in, out] + bias[out]; bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
        detail::dim_error("linear", x, w);
    }
    const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
    const bool has_bias = bias.defined();
    if (has_bias && bias.size() != out_dim) {
        detail::dim_error("linear(bias)", w, bias);
    }
    std::vector<double> out(n * out_dim);
    detail::gemm_rows(x.data().data(), w.data().data(), out.data(), n, in, out_dim);
    if (has_bias) {
        const auto bv = bias.data();
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < out_dim; ++c) {
                out[r * out_dim + c] += bv[c];
            }
        }
    }
    std::vector<Tensor> parents{x, w};
    if (has_bias) {
        parents.push_back(bias);
    }
    Tensor result = Tensor::make_result({n, out_dim}, std::move(out), std::move(parents));
    result.set_backward([x, w, bias, n, in, out_dim](std::span<const double> g) mutable {
        if (x.requires_grad()) {
            detail::add_into(x.mutable_grad().data(), detail::g_times_bt(g.data(), w.data().data(), n, out_dim, in));
        }
        if (w.requires_grad()) {
            detail::add_into(w.mutable_grad().data(), detail::at_times_g(x.data().data(), g.data(), n, in, out_dim));
        }
        if (bias.defined() && bias.requires_grad()) {
            auto db = bias.mutable_grad();
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < out_dim; ++c) {
                    db[c] += g[r * out_dim + c];
                }
            }
        }
    });
    return result;
}

// x[N, D] + bias[D] broadcast over rows.
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.size() != x.cols()) {
        detail::dim_error("bias_add", x, bias);
    }
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            out[r * d + c] += bias[c];
        }
    }
    Tensor result = Tensor::make_result(x.shape(), std::move(out), {x, bias});
    result.set_backward([x, bias, n, d](std::span<const double> g) mutable {
        if (x.requires_grad()) {
            auto dx = x.mutable_grad();
            for (std::size_t i = 0; i < n * d; ++i) {
                dx[i] += g[i];
            }
        }
        if (bias.requires_grad()) {
            auto db = bias.mutable_grad();
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    db[c] += g[r * d + c];
                }
            }
        }
    });
    return result;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        detail::dim_error("add", a, b);
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    Tensor result = Tensor::make_result(a.shape(), std::move(out), {a, b});
    result.set_backward([a, b](std::span<const double> g) mutable {
        for (const Tensor* t : {&a, &b}) {
            if (t->requires_grad()) {
                auto dst = t->mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    dst[i] += g[i];
                }
            }
        }
    });
    return result;
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        detail::dim_error("mul", a, b);
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * b[i];
    }
    Tensor result = Tensor::make_result(a.shape(), std::move(out), {a, b});
    result.set_backward([a, b](std::span<const double> g) mutable {
        if (a.requires_grad()) {
            auto dst = a.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                dst[i] += g[i] * b[i];
            }
        }
        if (b.requires_grad()) {
            auto dst = b.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                dst[i] += g[i] * a[i];
            }
        }
    });
    return result;
}

inline Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) {
        total += v;
    }
    Tensor result = Tensor::make_result({1}, {total}, {x});
    result.set_backward([x](std::span<const double> g) mutable {
        auto dst = x.mutable_grad();
        for (double& d : dst) {
            d += g[0];
        }
    });
    return result;
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] > 0.0 ? x[i] : 0.0;
    }
    Tensor result = Tensor::make_result(x.shape(), std::move(out), {x});
    result.set_backward([x](std::span<const double> g) mutable {
        auto dst = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] > 0.0) {
                dst[i] += g[i];
            }
        }
    });
    return result;
}

// Multiplies each row by its mask entry (0 zeroes the row).
inline Tensor mask_rows(const Tensor& x, const RowMask& mask) {
    if (mask.empty()) {
        return x;
    }
    if (x.rank() != 2 || mask.size() != x.rows()) {
        throw DimensionError("mask_rows: mask length " + std::to_string(mask.size()) + " vs shape " +
                             shape_str(x.shape()));
    }
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < n; ++r) {
        if (!mask[r]) {
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * d), d, 0.0);
        }
    }
    Tensor result = Tensor::make_result(x.shape(), std::move(out), {x});
    result.set_backward([x, mask, n, d](std::span<const double> g) mutable {
        auto dst = x.mutable_grad();
        for (std::size_t r = 0; r < n; ++r) {
            if (mask[r]) {
                for (std::size_t c = 0; c < d; ++c) {
                    dst[r * d + c] += g[r * d + c];
                }
            }
        }
    });
    return result;
}

// Normalizes the last axis: gain * (x - mean) / sqrt(var + eps) + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (x.rank() != 2 || gain.size() != x.cols() || bias.size() != x.cols()) {
        detail::dim_error("layer_norm", x, gain);
    }
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> xhat(n * d), inv_std(n), out(n * d);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = x.data().data() + r * d;
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            mean += row[c];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            var += (row[c] - mean) * (row[c] - mean);
        }
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (row[c] - mean) * inv_std[r];
            out[r * d + c] = gain[c] * xhat[r * d + c] + bias[c];
        }
    }
    Tensor result = Tensor::make_result(x.shape(), std::move(out), {x, gain, bias});
    result.set_backward(
        [x, gain, bias, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) mutable {
            if (gain.requires_grad() || bias.requires_grad()) {
                auto dg = gain.mutable_grad();
                auto db = bias.mutable_grad();
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < d; ++c) {
                        dg[c] += g[r * d + c] * xhat[r * d + c];
                        db[c] += g[r * d + c];
                    }
                }
            }
            if (x.requires_grad()) {
                auto dx = x.mutable_grad();
                std::vector<double> dxhat(d);
                for (std::size_t r = 0; r < n; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                        dxhat[c] = g[r * d + c] * gain[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[r * d + c];
                    }
                    mean_d /= static_cast<double>(d);
                    mean_dx /= static_cast<double>(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        dx[r * d + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                    }
                }
            }
        });
    return result;
}

// Rows of table[V, E] selected by ids; gradient scatter-adds back.
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) {
        throw DimensionError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
    }
    const std::size_t v = table.rows(), e = table.cols();
    std::vector<int> index(ids.begin(), ids.end());
    std::vector<double> out(index.size() * e);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= v) {
            throw DimensionError("gather_rows: id " + std::to_string(index[r]) + " outside table of " +
                                 std::to_string(v) + " rows");
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(index[r] * e), e,
                    out.begin() + static_cast<std::ptrdiff_t>(r * e));
    }
    Tensor result = Tensor::make_result({index.size(), e}, std::move(out), {table});
    result.set_backward([table, e, index = std::move(index)](std::span<const double> g) mutable {
        auto dst = table.mutable_grad();
        for (std::size_t r = 0; r < index.size(); ++r) {
            for (std::size_t c = 0; c < e; ++c) {
                dst[static_cast<std::size_t>(index[r]) * e + c] += g[r * e + c];
            }
        }
    });
    return result;
}

// ─── Losses ──────────────────────────────────────────────────────────────────

// Row-wise softmax of a [N, C] value array (no graph).
inline std::vector<double> softmax_rows(std::span<const double> logits, std::size_t n, std::size_t c) {
    std::vector<double> p(n * c);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            p[r * c + j] = std::exp(row[j] - mx);
            z += p[r * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            p[r * c + j] /= z;
        }
    }
    return p;
}

// Mean cross-entropy of softmax(logits[N, C]) against integer labels.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    // a rank-1 logits vector is treated as a single row
    const bool single = logits.rank() == 1;
    if ((!single && logits.rank() != 2) || labels.size() != (single ? 1 : logits.rows())) {
        throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = single ? 1 : logits.rows(), c = single ? logits.size() : logits.cols();
    std::vector<int> y(labels.begin(), labels.end());
    for (int label : y) {
        if (label < 0 || static_cast<std::size_t>(label) >= c) {
            throw DimensionError("softmax_cross_entropy: label " + std::to_string(label) + " outside " +
                                 std::to_string(c) + " classes");
        }
    }
    std::vector<double> p = softmax_rows(logits.data(), n, c);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.data().data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            z += std::exp(row[j] - mx);
        }
        loss += std::log(z) + mx - row[static_cast<std::size_t>(y[r])];
    }
    loss /= static_cast<double>(n);
    Tensor result = Tensor::make_result({1}, {loss}, {logits});
    result.set_backward([logits, n, c, y = std::move(y), p = std::move(p)](std::span<const double> g) mutable {
        auto dst = logits.mutable_grad();
        const double scale = g[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
                const double target = static_cast<std::size_t>(y[r]) == j ? 1.0 : 0.0;
                dst[r * c + j] += scale * (p[r * c + j] - target);
            }
        }
    });
    return result;
}

// ─── Sequence ops ────────────────────────────────────────────────────────────

// "Same" 1-D convolution over each length-T sequence of x[B*T, Cin] with
// kernels[Cout, Cin, k]. Positions outside [0, T) read as zero, so the output
// keeps the sequence length. k must be odd.
inline Tensor conv1d_same(const Tensor& x, const Tensor& kernels, std::size_t seq_len) {
    if (kernels.rank() != 3) {
        throw DimensionError("conv1d_same: kernels must be [Cout, Cin, k], got " + shape_str(kernels.shape()));
    }
    const std::size_t cout = kernels.dim(0), cin = kernels.dim(1), k = kernels.dim(2);
    if (k % 2 == 0) {
        throw PreconditionError("conv1d_same: kernel width " + std::to_string(k) + " must be odd");
    }
    const std::size_t batch = detail::check_seq("conv1d_same", x, seq_len, {});
    if (x.cols() != cin) {
        detail::dim_error("conv1d_same", x, kernels);
    }
    const std::size_t n = batch * seq_len, width = k * cin;
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto t_len = static_cast<std::ptrdiff_t>(seq_len);

    // im2col: column (j*Cin + c) of row (b, t) holds x[b, t + j - pad, c]
    std::vector<double> cols(n * width, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::ptrdiff_t t = 0; t < t_len; ++t) {
            double* dst = cols.data() + (b * seq_len + static_cast<std::size_t>(t)) * width;
            for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(j) - pad;
                if (src >= 0 && src < t_len) {
                    std::copy_n(x.data().data() + (b * seq_len + static_cast<std::size_t>(src)) * cin, cin,
                                dst + j * cin);
                }
            }
        }
    }
    std::vector<double> wmat(width * cout);
    for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t j = 0; j < k; ++j) {
                wmat[(j * cin + c) * cout + o] = kernels[(o * cin + c) * k + j];
            }
        }
    }
    std::vector<double> out(n * cout);
    detail::gemm_rows(cols.data(), wmat.data(), out.data(), n, width, cout);

    Tensor result = Tensor::make_result({n, cout}, std::move(out), {x, kernels});
    result.set_backward([x, kernels, batch, seq_len, n, cin, cout, k, width, pad, t_len, cols = std::move(cols),
                         wmat = std::move(wmat)](std::span<const double> g) mutable {
        if (kernels.requires_grad()) {
            const std::vector<double> dw = detail::at_times_g(cols.data(), g.data(), n, width, cout);
            auto dst = kernels.mutable_grad();
            for (std::size_t o = 0; o < cout; ++o) {
                for (std::size_t c = 0; c < cin; ++c) {
                    for (std::size_t j = 0; j < k; ++j) {
                        dst[(o * cin + c) * k + j] += dw[(j * cin + c) * cout + o];
                    }
                }
            }
        }
        if (x.requires_grad()) {
            const std::vector<double> dcols = detail::g_times_bt(g.data(), wmat.data(), n, cout, width);
            auto dx = x.mutable_grad();
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::ptrdiff_t t = 0; t < t_len; ++t) {
                    const double* src_row = dcols.data() + (b * seq_len + static_cast<std::size_t>(t)) * width;
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(j) - pad;
                        if (src >= 0 && src < t_len) {
                            double* d = dx.data() + (b * seq_len + static_cast<std::size_t>(src)) * cin;
                            for (std::size_t c = 0; c < cin; ++c) {
                                d[c] += src_row[j * cin + c];
                            }
                        }
                    }
                }
            }
        }
    });
    return result;
}

// Scaled dot-product attention per sequence and head over projected q, k, v
// (each [B*T, D]). Keys whose mask entry is 0 receive exactly zero weight.
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, std::size_t seq_len,
                             const RowMask& key_mask = {}) {
    if (q.shape() != k.shape() || q.shape() != v.shape()) {
        detail::dim_error("attention", q, k.shape() != q.shape() ? k : v);
    }
    const std::size_t batch = detail::check_seq("attention", q, seq_len, key_mask);
    const std::size_t d = q.cols();
    if (heads == 0 || d % heads != 0) {
        throw PreconditionError("attention: " + std::to_string(heads) + " heads do not divide model dim " +
                                std::to_string(d));
    }
    const std::size_t dh = d / heads, t_len = seq_len;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    // probs laid out [B, H, T, T]
    std::vector<double> probs(batch * heads * t_len * t_len, 0.0);
    std::vector<double> out(q.size(), 0.0);
    const double* Q = q.data().data();
    const double* K = k.data().data();
    const double* V = v.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * t_len;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < t_len; ++i) {
                double* p = probs.data() + ((b * heads + h) * t_len + i) * t_len;
                const double* qi = Q + (base + i) * d + off;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < t_len; ++j) {
                    if (!detail::row_valid(key_mask, base + j)) {
                        continue;
                    }
                    const double* kj = K + (base + j) * d + off;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += qi[c] * kj[c];
                    }
                    p[j] = s * scale;
                    mx = std::max(mx, p[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < t_len; ++j) {
                    if (detail::row_valid(key_mask, base + j)) {
                        p[j] = std::exp(p[j] - mx);
                        z += p[j];
                    }
                }
                double* oi = out.data() + (base + i) * d + off;
                for (std::size_t j = 0; j < t_len; ++j) {
                    if (!detail::row_valid(key_mask, base + j)) {
                        continue;
                    }
                    p[j] /= z;
                    const double* vj = V + (base + j) * d + off;
                    for (std::size_t c = 0; c < dh; ++c) {
                        oi[c] += p[j] * vj[c];
                    }
                }
            }
        }
    }
    Tensor result = Tensor::make_result(q.shape(), std::move(out), {q, k, v});
    result.set_backward([q, k, v, batch, heads, t_len, d, dh, scale, key_mask,
                         probs = std::move(probs)](std::span<const double> g) mutable {
        std::vector<double> dq(q.size(), 0.0), dk(k.size(), 0.0), dv(v.size(), 0.0);
        std::vector<double> dp(t_len);
        const double* Q = q.data().data();
        const double* K = k.data().data();
        const double* V = v.data().data();
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = b * t_len;
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * dh;
                for (std::size_t i = 0; i < t_len; ++i) {
                    const double* p = probs.data() + ((b * heads + h) * t_len + i) * t_len;
                    const double* gi = g.data() + (base + i) * d + off;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < t_len; ++j) {
                        if (!detail::row_valid(key_mask, base + j)) {
                            dp[j] = 0.0;
                            continue;
                        }
                        const double* vj = V + (base + j) * d + off;
                        double* dvj = dv.data() + (base + j) * d + off;
                        double s = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            s += gi[c] * vj[c];
                            dvj[c] += p[j] * gi[c];
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    const double* qi = Q + (base + i) * d + off;
                    double* dqi = dq.data() + (base + i) * d + off;
                    for (std::size_t j = 0; j < t_len; ++j) {
                        if (!detail::row_valid(key_mask, base + j)) {
                            continue;
                        }
                        const double ds = p[j] * (dp[j] - dot) * scale;
                        const double* kj = K + (base + j) * d + off;
                        double* dkj = dk.data() + (base + j) * d + off;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
        auto acc = [](const Tensor& t, const std::vector<double>& src) {
            if (t.requires_grad()) {
                auto dst = t.mutable_grad();
                for (std::size_t i = 0; i < src.size(); ++i) {
                    dst[i] += src[i];
                }
            }
        };
        acc(q, dq);
        acc(k, dk);
        acc(v, dv);
    });
    return result;
}

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Multi-head self-attention sub-layer over x[B*T, D]. No positional signal is
// added here, so the op is permutation-equivariant over positions.
inline Tensor multi_head_attention(const Tensor& x, std::size_t heads, const AttentionParams& p, std::size_t seq_len,
                                   const RowMask& key_mask = {}) {
    detail::check_seq("multi_head_attention", x, seq_len, key_mask);
    if (heads == 0 || x.cols() % heads != 0) {
        throw PreconditionError("multi_head_attention: " + std::to_string(heads) + " heads do not divide model dim " +
                                std::to_string(x.cols()));
    }
    Tensor q = linear(x, p.wq, p.bq);
    Tensor k = linear(x, p.wk, p.bk);
    Tensor v = linear(x, p.wv, p.bv);
    return linear(attention_core(q, k, v, heads, seq_len, key_mask), p.wo, p.bo);
}

// Reduces each sequence of x[B*T, D] to one row: [B, D]. Masked rows are
// excluded from mean and max; cls takes position 0. Max ties go to the lowest
// position.
inline Tensor pool(const Tensor& x, PoolingKind kind, std::size_t seq_len, const RowMask& mask = {}) {
    const std::size_t batch = detail::check_seq("pool", x, seq_len, mask);
    const std::size_t d = x.cols();
    std::vector<double> out(batch * d, 0.0);
    // source row (or count for mean) per output element
    std::vector<std::size_t> route(batch * d, 0);
    std::vector<double> inv_count(batch, 0.0);
    const double* X = x.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * seq_len;
        switch (kind) {
        case PoolingKind::cls:
            for (std::size_t c = 0; c < d; ++c) {
                out[b * d + c] = X[base * d + c];
                route[b * d + c] = base;
            }
            break;
        case PoolingKind::mean: {
            std::size_t count = 0;
            for (std::size_t t = 0; t < seq_len; ++t) {
                if (!detail::row_valid(mask, base + t)) {
                    continue;
                }
                ++count;
                for (std::size_t c = 0; c < d; ++c) {
                    out[b * d + c] += X[(base + t) * d + c];
                }
            }
            if (count == 0) {
                throw DimensionError("pool: sequence " + std::to_string(b) + " has no valid positions");
            }
            inv_count[b] = 1.0 / static_cast<double>(count);
            for (std::size_t c = 0; c < d; ++c) {
                out[b * d + c] *= inv_count[b];
            }
            break;
        }
        case PoolingKind::max:
            for (std::size_t c = 0; c < d; ++c) {
                bool found = false;
                for (std::size_t t = 0; t < seq_len; ++t) {
                    if (!detail::row_valid(mask, base + t)) {
                        continue;
                    }
                    const double val = X[(base + t) * d + c];
                    if (!found || val > out[b * d + c]) {
                        out[b * d + c] = val;
                        route[b * d + c] = base + t;
                        found = true;
                    }
                }
                if (!found) {
                    throw DimensionError("pool: sequence " + std::to_string(b) + " has no valid positions");
                }
            }
            break;
        }
    }
    Tensor result = Tensor::make_result({batch, d}, std::move(out), {x});
    result.set_backward([x, kind, seq_len, mask, batch, d, route = std::move(route),
                         inv_count = std::move(inv_count)](std::span<const double> g) mutable {
        auto dx = x.mutable_grad();
        for (std::size_t b = 0; b < batch; ++b) {
            if (kind == PoolingKind::mean) {
                for (std::size_t t = 0; t < seq_len; ++t) {
                    const std::size_t row = b * seq_len + t;
                    if (!detail::row_valid(mask, row)) {
                        continue;
                    }
                    for (std::size_t c = 0; c < d; ++c) {
                        dx[row * d + c] += g[b * d + c] * inv_count[b];
                    }
                }
            } else {
                for (std::size_t c = 0; c < d; ++c) {
                    dx[route[b * d + c] * d + c] += g[b * d + c];
                }
            }
        }
    });
    return result;
}

} // namespace headsearch::nn
