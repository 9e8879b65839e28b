#include <cmath>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "headsearch/head.hpp"

using namespace headsearch;
using headsearch::nn::Tensor;

namespace {

constexpr double kTol = 1e-5;

HeadConfig full_config() {
    HeadConfig c;
    c.pooling = PoolingKind::mean;
    c.mlp.layers = 2;
    c.mlp.hidden = 6;
    c.conv.enabled = true;
    c.conv.layers = 2;
    c.conv.heads = 8;
    c.conv.kernel = 3;
    c.conv.skip = true;
    c.encoder.enabled = true;
    c.encoder.layers = 1;
    c.encoder.heads = 2;
    return c;
}

std::size_t linear_count(std::size_t in, std::size_t out) {
    return in * out + out;
}

// Closed-form count of a transformer block at width d with a 2d feed-forward.
std::size_t block_count(std::size_t d) {
    return 2 * d + 4 * linear_count(d, d) + 2 * d + linear_count(d, 2 * d) + linear_count(2 * d, d);
}

std::vector<double> flat_values(const HeadModel& h) {
    std::vector<double> out;
    for (const auto& p : h.params()) {
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return out;
}

} // namespace

TEST(Head, BaselineIsSingleLinear) {
    Rng rng(1);
    const HeadModel h = build_head(baseline_config(), 32, 2, rng);
    EXPECT_TRUE(h.conv_layers().empty());
    EXPECT_TRUE(h.encoder_blocks().empty());
    ASSERT_EQ(h.mlp_layers().size(), 1u);
    EXPECT_EQ(h.mlp_layers()[0].w.shape(), (nn::Shape{32, 2}));
    EXPECT_EQ(h.config().pooling, PoolingKind::cls);
    EXPECT_EQ(h.param_count(), 66u);
}

TEST(Head, BaselineLogitsAreAffineInClsRow) {
    Rng rng(2);
    const HeadModel h = build_head(baseline_config(), 32, 2, rng);
    Tensor w = h.mlp_layers()[0].w;
    Tensor b = h.mlp_layers()[0].b;
    b.mutable_data()[0] = 0.25; // zero-initialized; make the bias visible
    b.mutable_data()[1] = -0.5;
    const Tensor x = gradcheck::random_tensor({7, 32}, rng, false);
    const Tensor logits = h.forward(x);
    ASSERT_EQ(logits.shape(), (nn::Shape{1, 2}));
    for (std::size_t c = 0; c < 2; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 32; ++i) {
            acc = x.data()[i] * w.data()[i * 2 + c] + acc;
        }
        EXPECT_DOUBLE_EQ(logits.data()[c], acc + b.data()[c]);
    }
}

TEST(Head, MlpParamCount) {
    HeadConfig c;
    c.mlp.layers = 3;
    c.mlp.hidden = 50;
    Rng rng(0);
    EXPECT_EQ(build_head(c, 32, 2, rng).param_count(), 4302u);
}

TEST(Head, FullConfigParamCountMatchesEnumeration) {
    Rng rng(0);
    const HeadModel h = build_head(full_config(), 32, 2, rng);
    const std::size_t conv1 = 8 * 32 * 3 + 8 + 32 * 8; // kernels, bias, 32->8 skip projection
    const std::size_t conv2 = 8 * 8 * 3 + 8;
    const std::size_t expected = conv1 + conv2 + block_count(8) + linear_count(8, 6) + linear_count(6, 2);
    EXPECT_EQ(h.param_count(), expected);
    std::size_t brute = 0;
    for (const auto& p : h.params()) {
        brute += p.size();
    }
    EXPECT_EQ(h.param_count(), brute);
}

TEST(Head, Sst2Column) {
    HeadConfig c;
    c.pooling = PoolingKind::mean;
    c.mlp.layers = 5;
    c.mlp.hidden = 50;
    c.encoder.enabled = true;
    c.encoder.layers = 1;
    c.encoder.heads = 4;
    Rng rng(0);
    const HeadModel h = build_head(c, 32, 2, rng);
    ASSERT_EQ(h.encoder_blocks().size(), 1u);
    EXPECT_EQ(h.encoder_blocks()[0].heads, 4u);
    EXPECT_EQ(h.encoder_blocks()[0].ln1_g.size(), 32u);
    ASSERT_EQ(h.mlp_layers().size(), 5u);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(h.mlp_layers()[static_cast<std::size_t>(i)].w.dim(1), 50u);
    }
    EXPECT_EQ(h.mlp_layers()[4].w.shape(), (nn::Shape{50, 2}));
}

TEST(Head, SkipProjectionOnlyWhenWidthsDiffer) {
    HeadConfig c = baseline_config();
    c.conv.enabled = true;
    c.conv.layers = 1;
    c.conv.heads = 8;
    c.conv.kernel = 3;
    c.conv.skip = true;
    Rng rng(0);
    const HeadModel narrow = build_head(c, 32, 2, rng);
    ASSERT_TRUE(narrow.conv_layers()[0].skip_proj.defined());
    EXPECT_EQ(narrow.conv_layers()[0].skip_proj.shape(), (nn::Shape{32, 8}));
    c.conv.heads = 32;
    const HeadModel same = build_head(c, 32, 2, rng);
    EXPECT_FALSE(same.conv_layers()[0].skip_proj.defined());
}

TEST(Head, StructuralDeterminism) {
    Rng a(5), b(5), c(6);
    const HeadModel ha = build_head(full_config(), 32, 3, a);
    const HeadModel hb = build_head(full_config(), 32, 3, b);
    const HeadModel hc = build_head(full_config(), 32, 3, c);
    ASSERT_EQ(ha.params().size(), hb.params().size());
    for (std::size_t i = 0; i < ha.params().size(); ++i) {
        EXPECT_EQ(ha.params()[i].shape(), hb.params()[i].shape());
    }
    EXPECT_EQ(flat_values(ha), flat_values(hb));
    EXPECT_NE(flat_values(ha), flat_values(hc));
}

TEST(Head, DisabledBlocksEqualBaseline) {
    HeadConfig c;
    c.pooling = PoolingKind::cls;
    c.mlp.layers = 1;
    c.conv.enabled = false;
    c.encoder.enabled = false;
    Rng a(9), b(9);
    const HeadModel tuned = build_head(c, 32, 2, a);
    const HeadModel base = build_head(baseline_config(), 32, 2, b);
    EXPECT_EQ(flat_values(tuned), flat_values(base));
    Rng xr(1);
    const Tensor x = gradcheck::random_tensor({6, 32}, xr, false);
    EXPECT_EQ(tuned.forward(x).data()[0], base.forward(x).data()[0]);
    EXPECT_EQ(tuned.forward(x).data()[1], base.forward(x).data()[1]);
}

TEST(Head, MeanPoolingIgnoresTokenOrder) {
    HeadConfig c;
    c.pooling = PoolingKind::mean;
    c.mlp.layers = 2;
    c.mlp.hidden = 10;
    Rng rng(3);
    const HeadModel h = build_head(c, 32, 2, rng);
    const Tensor x = gradcheck::random_tensor({6, 32}, rng, false);
    std::vector<double> permuted(x.data().begin(), x.data().end());
    // swap rows 1 and 4, rotate 2 -> 3 -> 5 -> 2; row 0 ([CLS]) stays
    auto row = [&](std::size_t r) {
        return std::vector<double>(x.data().begin() + r * 32, x.data().begin() + (r + 1) * 32);
    };
    const std::vector<std::size_t> src{0, 4, 5, 2, 1, 3};
    for (std::size_t r = 0; r < 6; ++r) {
        const auto v = row(src[r]);
        std::copy(v.begin(), v.end(), permuted.begin() + static_cast<std::ptrdiff_t>(r * 32));
    }
    const Tensor y = Tensor({6, 32}, permuted);
    const Tensor a = h.forward(x), b = h.forward(y);
    EXPECT_NEAR(a.data()[0], b.data()[0], 1e-12);
    EXPECT_NEAR(a.data()[1], b.data()[1], 1e-12);
}

TEST(Head, PaddedBatchMatchesSingleSequences) {
    Rng rng(4);
    const HeadModel h = build_head(full_config(), 32, 2, rng);
    // sequence 0 has 5 real rows, sequence 1 has 3 real rows + 2 PAD rows
    const Tensor x = gradcheck::random_tensor({10, 32}, rng, false);
    const nn::RowMask mask{1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    const Tensor batched = h.forward(x, 5, mask);
    const Tensor first({5, 32}, std::vector<double>(x.data().begin(), x.data().begin() + 5 * 32));
    const Tensor second({3, 32}, std::vector<double>(x.data().begin() + 5 * 32, x.data().begin() + 8 * 32));
    const Tensor a = h.forward(first), b = h.forward(second);
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_NEAR(batched.data()[c], a.data()[c], 1e-12);
        EXPECT_NEAR(batched.data()[2 + c], b.data()[c], 1e-12);
    }
}

TEST(Head, Errors) {
    Rng rng(0);
    HeadConfig bad = full_config();
    bad.encoder.heads = 3; // does not divide 8
    EXPECT_THROW(build_head(bad, 32, 2, rng), ValidationError);
    EXPECT_THROW(build_head(baseline_config(), 32, 1, rng), PreconditionError);
    const HeadModel h = build_head(baseline_config(), 32, 2, rng);
    EXPECT_THROW(h.forward(gradcheck::random_tensor({4, 16}, rng, false)), DimensionError);
}

TEST(Head, FullHeadGradientCheck) {
    for (PoolingKind pooling : kAllPoolings) {
        Rng rng(21);
        HeadConfig c = full_config();
        c.pooling = pooling;
        const HeadModel h = build_head(c, 32, 3, rng);
        Tensor x = gradcheck::random_tensor({10, 32}, rng);
        const nn::RowMask mask{1, 1, 1, 1, 1, 1, 1, 1, 1, 0};
        std::vector<Tensor> inputs = h.params();
        inputs.push_back(x);
        const auto r = gradcheck::check([&] { return gradcheck::weighted_sum(h.forward(x, 5, mask)); }, inputs);
        EXPECT_LT(r.worst, kTol) << to_string(pooling) << ": " << r.where;
    }
}

TEST(Head, BudgetRatioUsesIndependentCount) {
    Rng rng(0);
    const EncoderWeights base = EncoderWeights::random({}, rng);
    const std::size_t e = 32;
    const std::size_t body = 256 * e + 32 * e + 2 * block_count(e) + 2 * e;
    EXPECT_EQ(base.body_param_count(), body);
    const HeadModel h = build_head(baseline_config(), 32, 2, rng);
    EXPECT_DOUBLE_EQ(budget_ratio(h, base), 66.0 / static_cast<double>(body));
}
