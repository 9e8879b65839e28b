#pragma once

#include <cctype>
#include <cstdint>
#include <string_view>
#include <vector>

#include "headsearch/ops.hpp"

namespace headsearch {

inline constexpr int kClsId = 0;
inline constexpr int kPadId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kFirstContentId = 3;

// Hashing tokenizer: lowercased whitespace-separated words map to ids in
// [3, vocab_size) by FNV-1a. Output is CLS-prefixed and PAD-padded to max_len.
struct Tokenizer {
    int vocab_size = 256;
    int max_len = 32;

    int word_id(std::string_view word) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (char ch : word) {
            h ^= static_cast<unsigned char>(std::tolower(static_cast<unsigned char>(ch)));
            h *= 0x100000001b3ULL;
        }
        return kFirstContentId + static_cast<int>(h % static_cast<std::uint64_t>(vocab_size - kFirstContentId));
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids{kClsId};
        std::size_t i = 0;
        while (i < text.size() && static_cast<int>(ids.size()) < max_len) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
                ++i;
            }
            const std::size_t start = i;
            while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
                ++i;
            }
            if (i > start) {
                ids.push_back(word_id(text.substr(start, i - start)));
            }
        }
        ids.resize(static_cast<std::size_t>(max_len), kPadId);
        return ids;
    }
};

// B sequences of equal length T, flattened row-major.
struct TokenBatch {
    std::vector<int> ids;
    std::size_t batch = 0;
    std::size_t seq_len = 0;

    nn::RowMask mask() const {
        nn::RowMask m(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            m[i] = ids[i] != kPadId ? 1 : 0;
        }
        return m;
    }
};

} // namespace headsearch
