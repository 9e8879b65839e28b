#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "headsearch/ops.hpp"
#include "headsearch/rng.hpp"

namespace headsearch::nn {

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) {
        v = rng.uniform(-limit, limit);
    }
    return Tensor(std::move(shape), std::move(data), true);
}

inline Tensor filled(Shape shape, double value) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), true);
}

struct LinearLayer {
    Tensor w; // [in, out]
    Tensor b; // [out], may be undefined

    static LinearLayer make(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
        LinearLayer l;
        l.w = xavier_uniform({in, out}, in, out, rng);
        if (bias) {
            l.b = filled({out}, 0.0);
        }
        return l;
    }

    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }

    void append_params(std::vector<Tensor>& out) const {
        out.push_back(w);
        if (b.defined()) {
            out.push_back(b);
        }
    }
};

// Pre-norm encoder block: x + MHA(LN(x)), then x + FFN(LN(x)) with a 2*D
// ReLU hidden layer.
struct TransformerBlock {
    std::size_t heads = 1;
    Tensor ln1_g, ln1_b;
    AttentionParams attn;
    Tensor ln2_g, ln2_b;
    LinearLayer ffn1, ffn2;

    static TransformerBlock make(std::size_t dim, std::size_t heads, Rng& rng) {
        TransformerBlock blk;
        blk.heads = heads;
        blk.ln1_g = filled({dim}, 1.0);
        blk.ln1_b = filled({dim}, 0.0);
        auto proj = [&](Tensor& w, Tensor& b) {
            w = xavier_uniform({dim, dim}, dim, dim, rng);
            b = filled({dim}, 0.0);
        };
        proj(blk.attn.wq, blk.attn.bq);
        proj(blk.attn.wk, blk.attn.bk);
        proj(blk.attn.wv, blk.attn.bv);
        proj(blk.attn.wo, blk.attn.bo);
        blk.ln2_g = filled({dim}, 1.0);
        blk.ln2_b = filled({dim}, 0.0);
        blk.ffn1 = LinearLayer::make(dim, 2 * dim, rng);
        blk.ffn2 = LinearLayer::make(2 * dim, dim, rng);
        return blk;
    }

    Tensor forward(const Tensor& x, std::size_t seq_len, const RowMask& mask) const {
        Tensor h = add(x, multi_head_attention(layer_norm(x, ln1_g, ln1_b), heads, attn, seq_len, mask));
        return add(h, ffn2(relu(ffn1(layer_norm(h, ln2_g, ln2_b)))));
    }

    // Declaration order, also the serialization order.
    void append_params(std::vector<Tensor>& out) const {
        for (const Tensor& t :
             {ln1_g, ln1_b, attn.wq, attn.bq, attn.wk, attn.bk, attn.wv, attn.bv, attn.wo, attn.bo, ln2_g, ln2_b}) {
            out.push_back(t);
        }
        ffn1.append_params(out);
        ffn2.append_params(out);
    }
};

inline std::size_t count_params(const std::vector<Tensor>& params) {
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.size();
    }
    return n;
}

} // namespace headsearch::nn
