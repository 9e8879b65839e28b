#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "headsearch/trainer.hpp"
#include "shared_weights.hpp"

using namespace headsearch;

namespace {

const TaskDataset& keyword() {
    static const TaskDataset t = generate(TaskKind::keyword, 0);
    return t;
}

const TaskDataset& keyword_small() {
    static const TaskDataset t = [] {
        Rng rng(0);
        return make_small(keyword(), 500, rng);
    }();
    return t;
}

Trial without_time(Trial t) {
    t.wall_ms = 0;
    return t;
}

// Keeps the first `n` test rows and sets their labels.
TaskDataset relabeled(std::size_t n, const std::vector<int>& labels) {
    TaskDataset t = keyword();
    t.test.ids.resize(n * t.seq_len);
    t.test.labels = labels;
    return t;
}

ClassifierModel baseline_model(Rng& rng) {
    const auto& base = fixtures::pretrained_base();
    return {base.clone(), build_head(baseline_config(), static_cast<int>(base.dims.dim), 2, rng)};
}

void zero_head(ClassifierModel& m) {
    for (auto& p : m.head.params()) {
        std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0);
    }
}

} // namespace

TEST(Trainer, BaselineLearnsKeyword) {
    const Trial t = fine_tune(baseline_config(), keyword(), 5, 0, {}, fixtures::pretrained_base());
    RecordProperty("keyword_baseline_val", std::to_string(t.val_acc));
    EXPECT_GT(t.val_acc, 0.9);
    EXPECT_GT(t.test_acc, 0.9);
}

TEST(Trainer, SameSeedSameTrial) {
    HeadConfig c;
    c.pooling = PoolingKind::max;
    c.mlp.layers = 2;
    c.mlp.hidden = 16;
    const auto& base = fixtures::pretrained_base();
    const Trial a = fine_tune(c, keyword_small(), 1, 4, {}, base);
    const Trial b = fine_tune(c, keyword_small(), 1, 4, {}, base);
    EXPECT_EQ(without_time(a), without_time(b));
}

TEST(Trainer, StepCountIsEpochsTimesBatches) {
    const auto& base = fixtures::pretrained_base();
    EXPECT_EQ(fine_tune(baseline_config(), keyword_small(), 2, 0, {}, base).train_steps, 2 * 16); // ceil(500/32)
    TrainSettings s;
    s.batch_size = 100;
    EXPECT_EQ(fine_tune(baseline_config(), keyword_small(), 3, 0, s, base).train_steps, 3 * 5);
}

TEST(Trainer, RejectsBadArguments) {
    const auto& base = fixtures::pretrained_base();
    EXPECT_THROW(fine_tune(baseline_config(), keyword_small(), 0, 0, {}, base), PreconditionError);
    TrainSettings s;
    s.batch_size = 0;
    EXPECT_THROW(fine_tune(baseline_config(), keyword_small(), 1, 0, s, base), PreconditionError);
    TaskDataset empty = keyword_small();
    empty.val = {};
    EXPECT_THROW(fine_tune(baseline_config(), empty, 1, 0, {}, base), DataError);
}

TEST(Trainer, FrozenBaseIsBitwiseUnchanged) {
    const auto& base = fixtures::pretrained_base();
    HeadConfig c = baseline_config();
    c.freeze_base = true;
    const auto frozen = fine_tune_model(c, keyword_small(), 1, 0, {}, base);
    const auto a = frozen.model.base.body_params(), b = base.body_params();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin())) << "param " << i;
    }
    c.freeze_base = false;
    const auto tuned = fine_tune_model(c, keyword_small(), 1, 0, {}, base);
    const auto u = tuned.model.base.body_params();
    bool moved = false;
    for (std::size_t i = 0; i < u.size(); ++i) {
        moved = moved || !std::equal(u[i].data().begin(), u[i].data().end(), b[i].data().begin());
    }
    EXPECT_TRUE(moved);
}

TEST(Evaluate, ArgmaxTiesGoToLowestClass) {
    EXPECT_EQ(argmax_row(std::vector<double>{0.5, 0.5}), 0);
    EXPECT_EQ(argmax_row(std::vector<double>{0.1, 0.7, 0.7}), 1);
    EXPECT_EQ(argmax_row(std::vector<double>{-1.0, -2.0}), 0);
}

// A zeroed head gives equal logits, so every prediction is class 0.
TEST(Evaluate, ConstantPredictorScoresClassShare) {
    Rng rng(0);
    ClassifierModel m = baseline_model(rng);
    zero_head(m);
    std::vector<int> labels(20);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = i % 4 == 0 ? 1 : 0; // 5 ones, 15 zeros
    }
    const TaskDataset t = relabeled(20, labels);
    EXPECT_DOUBLE_EQ(evaluate(m, t, t.test), 15.0 / 20.0);
    EXPECT_DOUBLE_EQ(evaluate(m, t, t.test, 3), 15.0 / 20.0); // batch size does not matter
    const TaskDataset balanced = relabeled(20, [] {
        std::vector<int> v(20);
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<int>(i % 2);
        }
        return v;
    }());
    EXPECT_DOUBLE_EQ(evaluate(m, balanced, balanced.test), 0.5);
}

TEST(Evaluate, BiasOnlyHeadIsPerfectOnItsClass) {
    Rng rng(0);
    ClassifierModel m = baseline_model(rng);
    zero_head(m);
    nn::Tensor bias = m.head.mlp_layers()[0].b; // handle shares storage
    bias.mutable_data()[1] = 1.0;
    const TaskDataset t = relabeled(20, std::vector<int>(20, 1));
    EXPECT_DOUBLE_EQ(evaluate(m, t, t.test), 1.0);
}

TEST(Evaluate, EmptySplitRejected) {
    Rng rng(0);
    const ClassifierModel m = baseline_model(rng);
    const TaskDataset t = keyword();
    EXPECT_THROW(evaluate(m, t, Split{}), DataError);
}

// Nine epochs should beat one on average; five seeds smooth out noise.
TEST(Trainer, LongerBudgetHelpsOnAverage) {
    const auto& base = fixtures::pretrained_base();
    double short_sum = 0.0, long_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        short_sum += fine_tune(baseline_config(), keyword_small(), 1, seed, {}, base).val_acc;
        long_sum += fine_tune(baseline_config(), keyword_small(), 9, seed, {}, base).val_acc;
    }
    RecordProperty("mean_val_budget1", std::to_string(short_sum / 5));
    RecordProperty("mean_val_budget9", std::to_string(long_sum / 5));
    EXPECT_GT(long_sum, short_sum);
}
