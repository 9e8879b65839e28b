#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "headsearch/errors.hpp"
#include "headsearch/layers.hpp"
#include "headsearch/optim.hpp"
#include "headsearch/rng.hpp"
#include "headsearch/tokenizer.hpp"

namespace headsearch {

struct EncoderDims {
    std::uint32_t vocab = 256;
    std::uint32_t dim = 32;
    std::uint32_t max_len = 32;
    std::uint32_t blocks = 2;
    std::uint32_t heads = 4;

    bool operator==(const EncoderDims&) const = default;
};

// Small bidirectional encoder standing in for a large pretrained model:
// token + learned position embeddings, pre-norm blocks, final layer norm, and
// the two pretraining heads (masked token, intact-vs-shuffled on [CLS]).
struct EncoderWeights {
    EncoderDims dims;
    nn::Tensor token_emb; // [V, E]
    nn::Tensor pos_emb;   // [max_len, E]
    std::vector<nn::TransformerBlock> blocks;
    nn::Tensor final_g, final_b;
    nn::LinearLayer mlm_head; // E -> V
    nn::LinearLayer seq_head; // E -> 2

    static EncoderWeights random(const EncoderDims& dims, Rng& rng) {
        if (dims.heads == 0 || dims.dim % dims.heads != 0) {
            throw PreconditionError("EncoderWeights: heads must divide the model dim");
        }
        EncoderWeights w;
        w.dims = dims;
        w.token_emb = nn::xavier_uniform({dims.vocab, dims.dim}, dims.vocab, dims.dim, rng);
        w.pos_emb = nn::xavier_uniform({dims.max_len, dims.dim}, dims.max_len, dims.dim, rng);
        for (std::uint32_t i = 0; i < dims.blocks; ++i) {
            w.blocks.push_back(nn::TransformerBlock::make(dims.dim, dims.heads, rng));
        }
        w.final_g = nn::filled({dims.dim}, 1.0);
        w.final_b = nn::filled({dims.dim}, 0.0);
        w.mlm_head = nn::LinearLayer::make(dims.dim, dims.vocab, rng);
        w.seq_head = nn::LinearLayer::make(dims.dim, 2, rng);
        return w;
    }

    // Parameters used by fine-tuning, in declaration order.
    std::vector<nn::Tensor> body_params() const {
        std::vector<nn::Tensor> out{token_emb, pos_emb};
        for (const auto& blk : blocks) {
            blk.append_params(out);
        }
        out.push_back(final_g);
        out.push_back(final_b);
        return out;
    }

    // Everything, in serialization order.
    std::vector<nn::Tensor> all_params() const {
        auto out = body_params();
        mlm_head.append_params(out);
        seq_head.append_params(out);
        return out;
    }

    // Independent copy: same values, separate storage.
    EncoderWeights clone() const {
        EncoderWeights w = *this;
        auto src = all_params();
        auto dst_refs = w.param_refs();
        for (std::size_t i = 0; i < src.size(); ++i) {
            *dst_refs[i] = src[i].clone();
        }
        return w;
    }

    // When frozen, no gradient reaches any body parameter.
    void set_frozen(bool frozen) {
        for (auto& p : body_params()) {
            p.set_requires_grad(!frozen);
        }
    }

    bool frozen() const { return !token_emb.requires_grad(); }

    std::size_t body_param_count() const { return nn::count_params(body_params()); }

    // Flat copy of every body value, for bitwise comparisons.
    std::vector<double> body_snapshot() const {
        std::vector<double> out;
        for (const auto& p : body_params()) {
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
        return out;
    }

    std::vector<nn::Tensor*> param_refs() {
        std::vector<nn::Tensor*> out{&token_emb, &pos_emb};
        for (auto& blk : blocks) {
            for (nn::Tensor* t : {&blk.ln1_g, &blk.ln1_b, &blk.attn.wq, &blk.attn.bq, &blk.attn.wk, &blk.attn.bk,
                                  &blk.attn.wv, &blk.attn.bv, &blk.attn.wo, &blk.attn.bo, &blk.ln2_g, &blk.ln2_b,
                                  &blk.ffn1.w, &blk.ffn1.b, &blk.ffn2.w, &blk.ffn2.b}) {
                out.push_back(t);
            }
        }
        for (nn::Tensor* t : {&final_g, &final_b, &mlm_head.w, &mlm_head.b, &seq_head.w, &seq_head.b}) {
            out.push_back(t);
        }
        return out;
    }
};

// Contextual embeddings [B*T, E] for a batch whose rows start with CLS.
// PAD keys are masked out of attention, so padding never changes the
// embeddings of real tokens.
inline nn::Tensor encode_batch(const EncoderWeights& w, const TokenBatch& batch) {
    const std::size_t t_len = batch.seq_len;
    if (t_len == 0 || t_len > w.dims.max_len) {
        throw PreconditionError("encode: sequence length " + std::to_string(t_len) + " outside [1, " +
                                std::to_string(w.dims.max_len) + "]");
    }
    if (batch.ids.size() != batch.batch * t_len) {
        throw DimensionError("encode: ids length does not match batch * seq_len");
    }
    std::vector<int> positions(batch.ids.size());
    for (std::size_t b = 0; b < batch.batch; ++b) {
        if (batch.ids[b * t_len] != kClsId) {
            throw PreconditionError("encode: sequence " + std::to_string(b) + " does not start with CLS");
        }
        for (std::size_t t = 0; t < t_len; ++t) {
            positions[b * t_len + t] = static_cast<int>(t);
        }
    }
    const nn::RowMask mask = batch.mask();
    nn::Tensor x = nn::add(nn::gather_rows(w.token_emb, batch.ids), nn::gather_rows(w.pos_emb, positions));
    for (const auto& blk : w.blocks) {
        x = blk.forward(x, t_len, mask);
    }
    return nn::layer_norm(x, w.final_g, w.final_b);
}

inline nn::Tensor encode_sequence(const EncoderWeights& w, std::span<const int> ids) {
    if (ids.empty()) {
        throw PreconditionError("encode_sequence: empty id list");
    }
    return encode_batch(w, TokenBatch{{ids.begin(), ids.end()}, 1, ids.size()});
}

// ─── Pretraining ─────────────────────────────────────────────────────────────

// Sequences from a sparse first-order Markov chain over content ids
// [3, 3 + content_vocab): each token has three favoured successors.
class MarkovCorpus {
  public:
    explicit MarkovCorpus(std::uint64_t structure_seed = 7, int content_vocab = 64, int length = 30)
        : content_vocab_(content_vocab), length_(length) {
        Rng rng(structure_seed);
        successors_.resize(static_cast<std::size_t>(content_vocab));
        for (auto& s : successors_) {
            for (int& next : s) {
                next = static_cast<int>(rng.index(static_cast<std::size_t>(content_vocab)));
            }
        }
    }

    int length() const { return length_; }

    // Content ids only (no CLS).
    std::vector<int> sample(Rng& rng) const {
        std::vector<int> seq(static_cast<std::size_t>(length_));
        int cur = static_cast<int>(rng.index(static_cast<std::size_t>(content_vocab_)));
        for (auto& tok : seq) {
            tok = kFirstContentId + cur;
            if (rng.coin(0.9)) {
                cur = successors_[static_cast<std::size_t>(cur)][rng.index(3)];
            } else {
                cur = static_cast<int>(rng.index(static_cast<std::size_t>(content_vocab_)));
            }
        }
        return seq;
    }

  private:
    int content_vocab_;
    int length_;
    std::vector<std::array<int, 3>> successors_;
};

struct PretrainSettings {
    int batch_size = 32;
    double lr = 3e-3;
    double warmup_frac = 0.1;
    double mask_frac = 0.15;
};

// A pretraining batch: half intact, half shuffled sequences, with masked
// positions recorded for the token objective.
struct PretrainBatch {
    TokenBatch tokens;
    std::vector<int> shuffled; // per sequence, 1 if shuffled
    std::vector<int> masked_rows;
    std::vector<int> masked_targets;
};

inline PretrainBatch make_pretrain_batch(const MarkovCorpus& corpus, int batch_size, double mask_frac,
                                         std::uint32_t max_len, Rng& rng) {
    const std::size_t t_len = std::min<std::size_t>(max_len, static_cast<std::size_t>(corpus.length()) + 1);
    PretrainBatch out;
    out.tokens.batch = static_cast<std::size_t>(batch_size);
    out.tokens.seq_len = t_len;
    const auto n_mask =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(mask_frac * static_cast<double>(t_len - 1))));
    for (int b = 0; b < batch_size; ++b) {
        auto content = corpus.sample(rng);
        content.resize(t_len - 1);
        const int shuffle = b % 2;
        if (shuffle) {
            rng.shuffle(std::span<int>(content));
        }
        out.shuffled.push_back(shuffle);
        std::vector<std::size_t> positions(t_len - 1);
        std::iota(positions.begin(), positions.end(), std::size_t{1});
        rng.shuffle(std::span<std::size_t>(positions));
        positions.resize(n_mask);
        std::sort(positions.begin(), positions.end());
        std::vector<int> seq{kClsId};
        seq.insert(seq.end(), content.begin(), content.end());
        for (std::size_t p : positions) {
            out.masked_rows.push_back(static_cast<int>(static_cast<std::size_t>(b) * t_len + p));
            out.masked_targets.push_back(seq[p]);
            seq[p] = kMaskId;
        }
        out.tokens.ids.insert(out.tokens.ids.end(), seq.begin(), seq.end());
    }
    return out;
}

struct PretrainLosses {
    double masked_token = 0.0;
    double sequence = 0.0;
};

// Joint pretraining loss on one batch; the returned tensor is their sum.
inline nn::Tensor pretrain_loss(const EncoderWeights& w, const PretrainBatch& batch, PretrainLosses* parts = nullptr) {
    nn::Tensor hidden = encode_batch(w, batch.tokens);
    nn::Tensor mlm_logits = w.mlm_head(nn::gather_rows(hidden, batch.masked_rows));
    nn::Tensor mlm = nn::softmax_cross_entropy(mlm_logits, batch.masked_targets);
    nn::Tensor seq_logits = w.seq_head(nn::pool(hidden, PoolingKind::cls, batch.tokens.seq_len));
    nn::Tensor seq = nn::softmax_cross_entropy(seq_logits, batch.shuffled);
    if (parts) {
        parts->masked_token = mlm.item();
        parts->sequence = seq.item();
    }
    return nn::add(mlm, seq);
}

// Fraction of sequences whose intact/shuffled status the [CLS] head predicts.
inline double sequence_objective_accuracy(const EncoderWeights& w, const PretrainBatch& batch) {
    nn::Tensor hidden = encode_batch(w, batch.tokens);
    nn::Tensor logits = w.seq_head(nn::pool(hidden, PoolingKind::cls, batch.tokens.seq_len));
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batch.shuffled.size(); ++b) {
        const int pred = logits[b * 2 + 1] > logits[b * 2] ? 1 : 0;
        correct += pred == batch.shuffled[b] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(batch.shuffled.size());
}

struct PretrainResult {
    EncoderWeights weights;
    PretrainLosses first_step;
    PretrainLosses last_step;
};

inline PretrainResult pretrain(const MarkovCorpus& corpus, int steps, Rng& rng, const EncoderDims& dims = {},
                               const PretrainSettings& settings = {}) {
    if (steps < 1) {
        throw PreconditionError("pretrain: steps must be >= 1");
    }
    PretrainResult result{EncoderWeights::random(dims, rng), {}, {}};
    auto params = result.weights.all_params();
    nn::AdamState adam;
    const nn::ScheduleSpec schedule{settings.lr, steps,
                                    static_cast<std::int64_t>(settings.warmup_frac * static_cast<double>(steps))};
    for (int step = 0; step < steps; ++step) {
        const auto batch = make_pretrain_batch(corpus, settings.batch_size, settings.mask_frac, dims.max_len, rng);
        PretrainLosses parts;
        nn::Tensor loss = pretrain_loss(result.weights, batch, &parts);
        if (step == 0) {
            result.first_step = parts;
        }
        result.last_step = parts;
        for (auto& p : params) {
            p.zero_grad();
        }
        loss.backward();
        nn::adam_step(params, adam, nn::lr_at(step, schedule));
    }
    for (auto& p : params) {
        p.zero_grad();
    }
    return result;
}

// ─── Weights file ────────────────────────────────────────────────────────────
//
// "HSW1", five little-endian u32 (vocab, dim, max_len, blocks, heads), then
// every parameter array of all_params() as little-endian IEEE-754 doubles.

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}
inline void put_f64(std::ostream& os, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) {
        os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
}
inline std::uint64_t get_le(std::istream& is, int bytes, const std::string& path) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) {
            throw IoError("weights file " + path + ": truncated");
        }
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}
} // namespace detail

inline void save_weights(const std::string& path, const EncoderWeights& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open weights file for writing: " + path);
    }
    os.write("HSW1", 4);
    for (std::uint32_t v : {w.dims.vocab, w.dims.dim, w.dims.max_len, w.dims.blocks, w.dims.heads}) {
        detail::put_u32(os, v);
    }
    for (const auto& p : w.all_params()) {
        for (double d : p.data()) {
            detail::put_f64(os, d);
        }
    }
    if (!os) {
        throw IoError("write failed: " + path);
    }
}

inline EncoderWeights load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open weights file: " + path);
    }
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "HSW1") {
        throw IoError("weights file " + path + ": bad magic (expected HSW1)");
    }
    EncoderDims dims;
    dims.vocab = static_cast<std::uint32_t>(detail::get_le(is, 4, path));
    dims.dim = static_cast<std::uint32_t>(detail::get_le(is, 4, path));
    dims.max_len = static_cast<std::uint32_t>(detail::get_le(is, 4, path));
    dims.blocks = static_cast<std::uint32_t>(detail::get_le(is, 4, path));
    dims.heads = static_cast<std::uint32_t>(detail::get_le(is, 4, path));
    if (dims.vocab == 0 || dims.dim == 0 || dims.max_len == 0 || dims.heads == 0 || dims.dim % dims.heads != 0 ||
        dims.vocab > (1u << 20) || dims.dim > 4096 || dims.max_len > 4096 || dims.blocks > 64) {
        throw IoError("weights file " + path + ": implausible header");
    }
    Rng scratch(0);
    EncoderWeights w = EncoderWeights::random(dims, scratch);
    for (nn::Tensor* t : w.param_refs()) {
        for (double& d : t->mutable_data()) {
            d = std::bit_cast<double>(detail::get_le(is, 8, path));
        }
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw IoError("weights file " + path + ": trailing bytes");
    }
    return w;
}

// HEADSEARCH_WEIGHTS if set, else weights/base.hsw relative to the working dir.
inline std::string default_weights_path() {
    if (const char* env = std::getenv("HEADSEARCH_WEIGHTS"); env && *env) {
        return env;
    }
    return "weights/base.hsw";
}

} // namespace headsearch
