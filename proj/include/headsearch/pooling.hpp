#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace headsearch {

// Order matters: the index is the categorical bin used by the config encoding.
enum class PoolingKind { max = 0, mean = 1, cls = 2 };

inline constexpr std::array<PoolingKind, 3> kAllPoolings{PoolingKind::max, PoolingKind::mean, PoolingKind::cls};

constexpr std::string_view to_string(PoolingKind kind) {
    switch (kind) {
    case PoolingKind::max:
        return "max";
    case PoolingKind::mean:
        return "mean";
    case PoolingKind::cls:
        return "cls";
    }
    return "?";
}

inline std::optional<PoolingKind> parse_pooling(std::string_view s) {
    for (auto kind : kAllPoolings) {
        if (to_string(kind) == s) {
            return kind;
        }
    }
    return std::nullopt;
}

} // namespace headsearch
