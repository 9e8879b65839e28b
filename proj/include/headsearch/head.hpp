#pragma once

#include <cstddef>
#include <vector>

#include "headsearch/base_encoder.hpp"
#include "headsearch/layers.hpp"
#include "headsearch/searchspace.hpp"

namespace headsearch {

struct ConvLayer {
    nn::Tensor kernels;   // [Cout, Cin, k]
    nn::Tensor bias;      // [Cout]
    nn::Tensor skip_proj; // [Cin, Cout] width-1 projection, only when skip and Cin != Cout
    bool skip = false;
};

// A HeadConfig realized over base outputs of width base_dim, in the fixed
// order conv stack -> encoder stack -> pooling -> MLP -> class logits.
class HeadModel {
  public:
    static HeadModel build(const HeadConfig& config, int base_dim, int num_classes, Rng& rng) {
        require_valid(config, base_dim);
        if (num_classes < 2) {
            throw PreconditionError("build_head: num_classes must be >= 2");
        }
        HeadModel h;
        h.config_ = config;
        h.base_dim_ = static_cast<std::size_t>(base_dim);
        h.num_classes_ = static_cast<std::size_t>(num_classes);
        std::size_t width = h.base_dim_;
        if (config.conv.enabled) {
            const auto out = static_cast<std::size_t>(*config.conv.heads);
            const auto k = static_cast<std::size_t>(*config.conv.kernel);
            for (int i = 0; i < *config.conv.layers; ++i) {
                ConvLayer layer;
                layer.kernels = nn::xavier_uniform({out, width, k}, width * k, out * k, rng);
                layer.bias = nn::filled({out}, 0.0);
                layer.skip = *config.conv.skip;
                if (layer.skip && width != out) {
                    layer.skip_proj = nn::xavier_uniform({width, out}, width, out, rng);
                }
                h.conv_.push_back(std::move(layer));
                width = out;
            }
        }
        if (config.encoder.enabled) {
            for (int i = 0; i < *config.encoder.layers; ++i) {
                h.blocks_.push_back(
                    nn::TransformerBlock::make(width, static_cast<std::size_t>(*config.encoder.heads), rng));
            }
        }
        for (int i = 1; i < config.mlp.layers; ++i) {
            const auto hidden = static_cast<std::size_t>(*config.mlp.hidden);
            h.mlp_.push_back(nn::LinearLayer::make(width, hidden, rng));
            width = hidden;
        }
        h.mlp_.push_back(nn::LinearLayer::make(width, h.num_classes_, rng));
        return h;
    }

    // base_out is [B*T, base_dim]; returns logits [B, num_classes]. Masked
    // (PAD) rows are treated as outside the sequence: zeroed before each
    // convolution, excluded as attention keys and from pooling.
    nn::Tensor forward(const nn::Tensor& base_out, std::size_t seq_len, const nn::RowMask& mask = {}) const {
        if (base_out.rank() != 2 || base_out.cols() != base_dim_) {
            throw DimensionError("head forward: expected [B*T, " + std::to_string(base_dim_) + "], got " +
                                 nn::shape_str(base_out.shape()));
        }
        nn::Tensor x = base_out;
        if (!conv_.empty()) {
            x = nn::mask_rows(x, mask);
        }
        for (const auto& layer : conv_) {
            nn::Tensor y = nn::relu(nn::bias_add(nn::conv1d_same(x, layer.kernels, seq_len), layer.bias));
            if (layer.skip) {
                y = nn::add(y, layer.skip_proj.defined() ? nn::matmul(x, layer.skip_proj) : x);
            }
            x = nn::mask_rows(y, mask);
        }
        for (const auto& blk : blocks_) {
            x = blk.forward(x, seq_len, mask);
        }
        x = nn::pool(x, config_.pooling, seq_len, mask);
        for (std::size_t i = 0; i < mlp_.size(); ++i) {
            x = mlp_[i](x);
            if (i + 1 < mlp_.size()) {
                x = nn::relu(x);
            }
        }
        return x;
    }

    // Single sequence [T, base_dim] -> logits [1, num_classes].
    nn::Tensor forward(const nn::Tensor& base_out) const { return forward(base_out, base_out.rows()); }

    // Registry order: conv layers, encoder blocks, MLP layers.
    std::vector<nn::Tensor> params() const {
        std::vector<nn::Tensor> out;
        for (const auto& layer : conv_) {
            out.push_back(layer.kernels);
            out.push_back(layer.bias);
            if (layer.skip_proj.defined()) {
                out.push_back(layer.skip_proj);
            }
        }
        for (const auto& blk : blocks_) {
            blk.append_params(out);
        }
        for (const auto& l : mlp_) {
            l.append_params(out);
        }
        return out;
    }

    std::size_t param_count() const { return nn::count_params(params()); }

    const HeadConfig& config() const { return config_; }
    std::size_t num_classes() const { return num_classes_; }
    std::size_t base_dim() const { return base_dim_; }
    const std::vector<ConvLayer>& conv_layers() const { return conv_; }
    const std::vector<nn::TransformerBlock>& encoder_blocks() const { return blocks_; }
    const std::vector<nn::LinearLayer>& mlp_layers() const { return mlp_; }

  private:
    HeadConfig config_;
    std::size_t base_dim_ = 0;
    std::size_t num_classes_ = 0;
    std::vector<ConvLayer> conv_;
    std::vector<nn::TransformerBlock> blocks_;
    std::vector<nn::LinearLayer> mlp_;
};

inline HeadModel build_head(const HeadConfig& config, int base_dim, int num_classes, Rng& rng) {
    return HeadModel::build(config, base_dim, num_classes, rng);
}

// Head size relative to the fine-tuned encoder body (pretraining heads excluded).
inline double budget_ratio(const HeadModel& head, const EncoderWeights& base) {
    return static_cast<double>(head.param_count()) / static_cast<double>(base.body_param_count());
}

} // namespace headsearch
