#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsearch/errors.hpp"
#include "headsearch/pooling.hpp"
#include "headsearch/rng.hpp"

namespace headsearch {

// ─── Ranges ──────────────────────────────────────────────────────────────────

namespace space {
inline constexpr int kMinLayers = 1;
inline constexpr int kMaxLayers = 5;
inline constexpr int kMinWidth = 5;
inline constexpr int kMaxWidth = 200;
inline constexpr std::array<int, 5> kKernels{3, 5, 7, 9, 11};
inline constexpr int kMinAttentionHeads = 1;
inline constexpr int kMaxAttentionHeads = 16;
inline constexpr int kWidthBins = 10;
inline constexpr std::size_t kDims = 12;
} // namespace space

// ─── Config types ────────────────────────────────────────────────────────────

struct MlpSpec {
    int layers = 1;
    std::optional<int> hidden; // absent when layers == 1

    bool operator==(const MlpSpec&) const = default;
};

struct ConvSpec {
    bool enabled = false;
    std::optional<int> heads; // output channels (filters)
    std::optional<int> kernel;
    std::optional<int> layers;
    std::optional<bool> skip;

    bool operator==(const ConvSpec&) const = default;
};

struct EncoderSpec {
    bool enabled = false;
    std::optional<int> heads;
    std::optional<int> layers;

    bool operator==(const EncoderSpec&) const = default;
};

struct HeadConfig {
    PoolingKind pooling = PoolingKind::cls;
    bool freeze_base = false;
    MlpSpec mlp;
    ConvSpec conv;
    EncoderSpec encoder;

    bool operator==(const HeadConfig&) const = default;

    // Channel count seen by the encoder stack and pooling.
    int model_dim(int base_dim) const { return conv.enabled && conv.heads ? *conv.heads : base_dim; }
};

// Single dense layer on the [CLS] row, base not frozen.
inline HeadConfig baseline_config() {
    return HeadConfig{};
}

struct Violation {
    std::string field;
    std::string message;
};

inline std::string describe(const std::vector<Violation>& violations) {
    std::string out;
    for (const auto& v : violations) {
        if (!out.empty()) {
            out += "; ";
        }
        out += v.field + ": " + v.message;
    }
    return out;
}

// Every violated constraint; empty means the config is valid for a base
// encoder of width base_dim.
inline std::vector<Violation> validate(const HeadConfig& c, int base_dim) {
    if (base_dim <= 0) {
        throw PreconditionError("validate: base_dim must be positive");
    }
    std::vector<Violation> out;
    auto range = [&out](const std::string& field, const std::optional<int>& value, int lo, int hi) {
        if (!value) {
            out.push_back({field, "required when parent is enabled"});
        } else if (*value < lo || *value > hi) {
            out.push_back(
                {field, std::to_string(*value) + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]"});
        }
    };
    auto absent = [&out](const std::string& field, bool present) {
        if (present) {
            out.push_back({field, "set while inactive"});
        }
    };

    if (c.mlp.layers < space::kMinLayers || c.mlp.layers > space::kMaxLayers) {
        out.push_back({"mlp.layers", std::to_string(c.mlp.layers) + " outside [1, 5]"});
    }
    if (c.mlp.layers > 1) {
        range("mlp.hidden", c.mlp.hidden, space::kMinWidth, space::kMaxWidth);
    } else {
        absent("mlp.hidden", c.mlp.hidden.has_value());
    }

    if (c.conv.enabled) {
        range("conv.heads", c.conv.heads, space::kMinWidth, space::kMaxWidth);
        if (!c.conv.kernel) {
            out.push_back({"conv.kernel", "required when parent is enabled"});
        } else if (std::find(space::kKernels.begin(), space::kKernels.end(), *c.conv.kernel) == space::kKernels.end()) {
            out.push_back({"conv.kernel", std::to_string(*c.conv.kernel) + " not in {3, 5, 7, 9, 11}"});
        }
        range("conv.layers", c.conv.layers, space::kMinLayers, space::kMaxLayers);
        if (!c.conv.skip) {
            out.push_back({"conv.skip", "required when parent is enabled"});
        }
    } else {
        absent("conv.heads", c.conv.heads.has_value());
        absent("conv.kernel", c.conv.kernel.has_value());
        absent("conv.layers", c.conv.layers.has_value());
        absent("conv.skip", c.conv.skip.has_value());
    }

    if (c.encoder.enabled) {
        range("encoder.heads", c.encoder.heads, space::kMinAttentionHeads, space::kMaxAttentionHeads);
        range("encoder.layers", c.encoder.layers, space::kMinLayers, space::kMaxLayers);
        if (c.encoder.heads && *c.encoder.heads >= 1) {
            const int dim = c.model_dim(base_dim);
            if (dim > 0 && dim % *c.encoder.heads != 0) {
                out.push_back({"encoder.heads",
                               std::to_string(*c.encoder.heads) + " does not divide model dim " + std::to_string(dim)});
            }
        }
    } else {
        absent("encoder.heads", c.encoder.heads.has_value());
        absent("encoder.layers", c.encoder.layers.has_value());
    }
    return out;
}

inline void require_valid(const HeadConfig& c, int base_dim) {
    if (auto v = validate(c, base_dim); !v.empty()) {
        throw ValidationError("invalid head config: " + describe(v));
    }
}

// Attention-head counts in [1, 16] that divide dim.
inline std::vector<int> head_divisors(int dim) {
    std::vector<int> out;
    for (int h = space::kMinAttentionHeads; h <= space::kMaxAttentionHeads; ++h) {
        if (dim % h == 0) {
            out.push_back(h);
        }
    }
    return out;
}

// Snaps encoder heads to the closest divisor of the model dim (ties to the
// smaller count). Other fields are left untouched.
inline HeadConfig repair_heads(HeadConfig c, int base_dim) {
    if (!c.encoder.enabled || !c.encoder.heads) {
        return c;
    }
    const int want = *c.encoder.heads;
    int best = 1;
    for (int h : head_divisors(c.model_dim(base_dim))) {
        if (std::abs(h - want) < std::abs(best - want)) {
            best = h;
        }
    }
    c.encoder.heads = best;
    return c;
}

// ─── Sampling ────────────────────────────────────────────────────────────────

// Uniform prior over every listed option; conditional fields are drawn only
// when their parent flag is drawn true.
inline HeadConfig sample_uniform(Rng& rng, int base_dim = 32) {
    HeadConfig c;
    c.pooling = kAllPoolings[rng.index(kAllPoolings.size())];
    c.freeze_base = rng.coin();
    c.mlp.layers = static_cast<int>(rng.uniform_int(space::kMinLayers, space::kMaxLayers));
    if (c.mlp.layers > 1) {
        c.mlp.hidden = static_cast<int>(rng.uniform_int(space::kMinWidth, space::kMaxWidth));
    }
    c.conv.enabled = rng.coin();
    if (c.conv.enabled) {
        c.conv.heads = static_cast<int>(rng.uniform_int(space::kMinWidth, space::kMaxWidth));
        c.conv.kernel = space::kKernels[rng.index(space::kKernels.size())];
        c.conv.layers = static_cast<int>(rng.uniform_int(space::kMinLayers, space::kMaxLayers));
        c.conv.skip = rng.coin();
    }
    c.encoder.enabled = rng.coin();
    if (c.encoder.enabled) {
        const auto divisors = head_divisors(c.model_dim(base_dim));
        c.encoder.heads = divisors[rng.index(divisors.size())];
        c.encoder.layers = static_cast<int>(rng.uniform_int(space::kMinLayers, space::kMaxLayers));
    }
    return c;
}

// ─── Vector encoding ─────────────────────────────────────────────────────────

namespace dim {
enum : std::size_t {
    pooling = 0,
    freeze,
    mlp_layers,
    mlp_hidden,
    conv_enabled,
    conv_heads,
    conv_kernel,
    conv_layers,
    conv_skip,
    enc_enabled,
    enc_heads,
    enc_layers,
};
} // namespace dim

// Normalized [0, 1]^12 view of a config for the surrogate model. Inactive
// dimensions hold 0.5 with active = false.
struct ConfigVector {
    std::array<double, space::kDims> values{};
    std::array<bool, space::kDims> active{};

    bool operator==(const ConfigVector&) const = default;
};

namespace detail {
inline double encode_int(int v, int lo, int hi) {
    return static_cast<double>(v - lo) / (hi - lo);
}
inline int decode_int(double x, int lo, int hi) {
    const auto v = static_cast<int>(std::lround(lo + std::clamp(x, 0.0, 1.0) * (hi - lo)));
    return std::clamp(v, lo, hi);
}
inline double encode_bool(bool b) {
    return b ? 0.75 : 0.25;
}
inline bool decode_bool(double x) {
    return x >= 0.5;
}
// Nearest odd kernel in {3..11} to 3 + 8x; an exact tie goes to the smaller kernel.
inline int decode_kernel(double x) {
    const double k = 3.0 + 8.0 * std::clamp(x, 0.0, 1.0);
    const int odd = 2 * static_cast<int>(std::ceil((k - 1.0) / 2.0 - 0.5)) + 1;
    return std::clamp(odd, 3, 11);
}
} // namespace detail

inline ConfigVector encode(const HeadConfig& c) {
    ConfigVector v;
    v.values.fill(0.5);
    v.active.fill(false);
    auto set = [&v](std::size_t i, double x) {
        v.values[i] = x;
        v.active[i] = true;
    };
    set(dim::pooling, (static_cast<int>(c.pooling) + 0.5) / 3.0);
    set(dim::freeze, detail::encode_bool(c.freeze_base));
    set(dim::mlp_layers, detail::encode_int(c.mlp.layers, space::kMinLayers, space::kMaxLayers));
    if (c.mlp.layers > 1 && c.mlp.hidden) {
        set(dim::mlp_hidden, detail::encode_int(*c.mlp.hidden, space::kMinWidth, space::kMaxWidth));
    }
    set(dim::conv_enabled, detail::encode_bool(c.conv.enabled));
    if (c.conv.enabled) {
        set(dim::conv_heads,
            detail::encode_int(c.conv.heads.value_or(space::kMinWidth), space::kMinWidth, space::kMaxWidth));
        set(dim::conv_kernel, detail::encode_int(c.conv.kernel.value_or(3), 3, 11));
        set(dim::conv_layers, detail::encode_int(c.conv.layers.value_or(1), space::kMinLayers, space::kMaxLayers));
        set(dim::conv_skip, detail::encode_bool(c.conv.skip.value_or(false)));
    }
    set(dim::enc_enabled, detail::encode_bool(c.encoder.enabled));
    if (c.encoder.enabled) {
        set(dim::enc_heads,
            detail::encode_int(c.encoder.heads.value_or(1), space::kMinAttentionHeads, space::kMaxAttentionHeads));
        set(dim::enc_layers, detail::encode_int(c.encoder.layers.value_or(1), space::kMinLayers, space::kMaxLayers));
    }
    return v;
}

// Inverse of encode on active dims; activity is re-derived from the decoded
// parent flags, so the `active` mask of the input is not consulted.
inline HeadConfig decode(const ConfigVector& v) {
    HeadConfig c;
    const auto pool_idx = std::min(2, static_cast<int>(std::clamp(v.values[dim::pooling], 0.0, 1.0) * 3.0));
    c.pooling = kAllPoolings[static_cast<std::size_t>(pool_idx)];
    c.freeze_base = detail::decode_bool(v.values[dim::freeze]);
    c.mlp.layers = detail::decode_int(v.values[dim::mlp_layers], space::kMinLayers, space::kMaxLayers);
    if (c.mlp.layers > 1) {
        c.mlp.hidden = detail::decode_int(v.values[dim::mlp_hidden], space::kMinWidth, space::kMaxWidth);
    }
    c.conv.enabled = detail::decode_bool(v.values[dim::conv_enabled]);
    if (c.conv.enabled) {
        c.conv.heads = detail::decode_int(v.values[dim::conv_heads], space::kMinWidth, space::kMaxWidth);
        c.conv.kernel = detail::decode_kernel(v.values[dim::conv_kernel]);
        c.conv.layers = detail::decode_int(v.values[dim::conv_layers], space::kMinLayers, space::kMaxLayers);
        c.conv.skip = detail::decode_bool(v.values[dim::conv_skip]);
    }
    c.encoder.enabled = detail::decode_bool(v.values[dim::enc_enabled]);
    if (c.encoder.enabled) {
        c.encoder.heads =
            detail::decode_int(v.values[dim::enc_heads], space::kMinAttentionHeads, space::kMaxAttentionHeads);
        c.encoder.layers = detail::decode_int(v.values[dim::enc_layers], space::kMinLayers, space::kMaxLayers);
    }
    return c;
}

// Activity pattern implied by the three parent flags of a vector.
inline std::array<bool, space::kDims> active_mask(const ConfigVector& v) {
    return encode(decode(v)).active;
}

// ─── Counting ────────────────────────────────────────────────────────────────

// Option counts of a discretized space. Widths (MLP hidden, conv heads) are
// counted in kWidthBins bins; MLP hidden is counted for every layer count.
struct SpaceCounts {
    std::int64_t poolings = 3;
    std::int64_t freeze = 2;
    std::int64_t mlp_layers = 5;
    std::int64_t mlp_widths = space::kWidthBins;
    bool conv_optional = true;
    std::int64_t conv_widths = space::kWidthBins;
    std::int64_t conv_kernels = 5;
    std::int64_t conv_layers = 5;
    std::int64_t conv_skip = 2;
    bool encoder_optional = true;
    std::int64_t encoder_heads = 16;
    std::int64_t encoder_layers = 5;
};

inline std::int64_t cardinality(const SpaceCounts& s = {}) {
    const std::int64_t conv = (s.conv_optional ? 1 : 0) + s.conv_widths * s.conv_kernels * s.conv_layers * s.conv_skip;
    const std::int64_t encoder = (s.encoder_optional ? 1 : 0) + s.encoder_heads * s.encoder_layers;
    return s.poolings * s.freeze * s.mlp_layers * s.mlp_widths * conv * encoder;
}

// ─── JSON ────────────────────────────────────────────────────────────────────

inline nlohmann::json to_json(const HeadConfig& c) {
    using nlohmann::json;
    json mlp{{"layers", c.mlp.layers}};
    if (c.mlp.hidden) {
        mlp["hidden"] = *c.mlp.hidden;
    }
    json conv{{"enabled", c.conv.enabled}};
    if (c.conv.heads) {
        conv["heads"] = *c.conv.heads;
    }
    if (c.conv.kernel) {
        conv["kernel"] = *c.conv.kernel;
    }
    if (c.conv.layers) {
        conv["layers"] = *c.conv.layers;
    }
    if (c.conv.skip) {
        conv["skip"] = *c.conv.skip;
    }
    json enc{{"enabled", c.encoder.enabled}};
    if (c.encoder.heads) {
        enc["heads"] = *c.encoder.heads;
    }
    if (c.encoder.layers) {
        enc["layers"] = *c.encoder.layers;
    }
    return json{{"pooling", std::string(to_string(c.pooling))},
                {"freeze_base", c.freeze_base},
                {"mlp", mlp},
                {"conv", conv},
                {"encoder", enc}};
}

namespace detail {
template <class T> std::optional<T> opt_field(const nlohmann::json& obj, const char* key, const std::string& path) {
    if (!obj.contains(key)) {
        return std::nullopt;
    }
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError(path + "." + key + ": wrong type");
    }
}

template <class T> T req_field(const nlohmann::json& obj, const char* key, const std::string& path) {
    auto v = opt_field<T>(obj, key, path);
    if (!v) {
        throw ValidationError(path + "." + key + ": missing");
    }
    return *v;
}

inline const nlohmann::json& req_object(const nlohmann::json& obj, const char* key) {
    if (!obj.contains(key) || !obj.at(key).is_object()) {
        throw ValidationError(std::string(key) + ": missing or not an object");
    }
    return obj.at(key);
}

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> keys,
                           const std::string& path) {
    for (const auto& [k, _] : obj.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&k](const char* known) { return k == known; })) {
            throw ValidationError(path + ": unknown key \"" + k + "\"");
        }
    }
}
} // namespace detail

// Structural parse only; range checks belong to validate().
inline HeadConfig head_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ValidationError("head config: expected a JSON object");
    }
    detail::reject_unknown(j, {"pooling", "freeze_base", "mlp", "conv", "encoder"}, "config");
    HeadConfig c;
    const auto pooling = detail::req_field<std::string>(j, "pooling", "config");
    const auto kind = parse_pooling(pooling);
    if (!kind) {
        throw ValidationError("config.pooling: unknown value \"" + pooling + "\"");
    }
    c.pooling = *kind;
    c.freeze_base = detail::req_field<bool>(j, "freeze_base", "config");

    const auto& mlp = detail::req_object(j, "mlp");
    detail::reject_unknown(mlp, {"layers", "hidden"}, "mlp");
    c.mlp.layers = detail::req_field<int>(mlp, "layers", "mlp");
    c.mlp.hidden = detail::opt_field<int>(mlp, "hidden", "mlp");

    const auto& conv = detail::req_object(j, "conv");
    detail::reject_unknown(conv, {"enabled", "heads", "kernel", "layers", "skip"}, "conv");
    c.conv.enabled = detail::req_field<bool>(conv, "enabled", "conv");
    c.conv.heads = detail::opt_field<int>(conv, "heads", "conv");
    c.conv.kernel = detail::opt_field<int>(conv, "kernel", "conv");
    c.conv.layers = detail::opt_field<int>(conv, "layers", "conv");
    c.conv.skip = detail::opt_field<bool>(conv, "skip", "conv");

    const auto& enc = detail::req_object(j, "encoder");
    detail::reject_unknown(enc, {"enabled", "heads", "layers"}, "encoder");
    c.encoder.enabled = detail::req_field<bool>(enc, "enabled", "encoder");
    c.encoder.heads = detail::opt_field<int>(enc, "heads", "encoder");
    c.encoder.layers = detail::opt_field<int>(enc, "layers", "encoder");
    return c;
}

} // namespace headsearch
