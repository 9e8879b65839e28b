#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "headsearch/base_encoder.hpp"
#include "headsearch/head.hpp"
#include "headsearch/optim.hpp"
#include "headsearch/tasks.hpp"

namespace headsearch {

struct TrainSettings {
    int batch_size = 32;
    // Desk-scale default. Large pretrained encoders are usually fine-tuned at 2e-5.
    double base_lr = 1e-3;
    double warmup_frac = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int eval_batch_size = 128;
};

// One (config, budget, seed) evaluation.
struct Trial {
    std::int64_t trial_id = 0;
    HeadConfig config;
    int budget_epochs = 1;
    std::uint64_t seed = 0;
    double val_acc = 0.0;
    double test_acc = 0.0;
    std::int64_t train_steps = 0;
    std::int64_t wall_ms = 0;
    int bracket = -1;
    int rung = -1;

    bool operator==(const Trial&) const = default;
};

// Pretrained base copy plus head: the fine-tuned classifier.
struct ClassifierModel {
    EncoderWeights base;
    HeadModel head;

    nn::Tensor logits(const TokenBatch& batch) const {
        return head.forward(encode_batch(base, batch), batch.seq_len, batch.mask());
    }

    std::vector<nn::Tensor> trainable_params() const {
        std::vector<nn::Tensor> out;
        if (!base.frozen()) {
            out = base.body_params();
        }
        for (auto& p : head.params()) {
            out.push_back(p);
        }
        return out;
    }
};

// Index of the largest logit, lowest index on ties.
inline int argmax_row(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
        if (row[j] > row[best]) {
            best = j;
        }
    }
    return static_cast<int>(best);
}

inline double evaluate(const ClassifierModel& model, const TaskDataset& task, const Split& split,
                       int eval_batch_size = 128) {
    if (split.size() == 0) {
        throw DataError("evaluate: empty split");
    }
    nn::NoGradGuard no_grad;
    std::size_t correct = 0;
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < split.size(); start += static_cast<std::size_t>(eval_batch_size)) {
        const std::size_t end = std::min(split.size(), start + static_cast<std::size_t>(eval_batch_size));
        rows.resize(end - start);
        std::iota(rows.begin(), rows.end(), start);
        const nn::Tensor logits = model.logits(task.batch(split, rows));
        const std::size_t c = logits.cols();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const int pred = argmax_row(logits.data().subspan(i * c, c));
            correct += pred == split.labels[rows[i]] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

struct FineTuneResult {
    Trial trial;
    ClassifierModel model;
};

// Fresh copy of the pretrained base plus a freshly built head, trained for
// budget_epochs with Adam under a warmup + cosine schedule. Accuracies are
// measured at the final step.
inline FineTuneResult fine_tune_model(const HeadConfig& config, const TaskDataset& task, int budget_epochs,
                                      std::uint64_t seed, const TrainSettings& settings,
                                      const EncoderWeights& pretrained) {
    if (budget_epochs < 1) {
        throw PreconditionError("fine_tune: budget_epochs must be >= 1");
    }
    if (settings.batch_size < 1 || settings.warmup_frac < 0.0 || settings.warmup_frac >= 1.0) {
        throw PreconditionError("fine_tune: invalid train settings");
    }
    if (task.train.size() == 0 || task.val.size() == 0 || task.test.size() == 0) {
        throw DataError("fine_tune: task " + task.name + " has an empty split");
    }
    const auto start_time = std::chrono::steady_clock::now();
    Rng rng(seed);
    Rng init_rng = rng.fork(1);
    Rng shuffle_rng = rng.fork(2);

    FineTuneResult out{{},
                       {pretrained.clone(),
                        HeadModel::build(config, static_cast<int>(pretrained.dims.dim), task.num_classes, init_rng)}};
    ClassifierModel& model = out.model;
    model.base.set_frozen(config.freeze_base);
    auto params = model.trainable_params();

    const std::size_t n = task.train.size();
    const auto batch = static_cast<std::size_t>(settings.batch_size);
    const std::size_t steps_per_epoch = (n + batch - 1) / batch;
    const auto total_steps = static_cast<std::int64_t>(steps_per_epoch) * budget_epochs;
    const nn::ScheduleSpec schedule{settings.base_lr, total_steps,
                                    static_cast<std::int64_t>(settings.warmup_frac * static_cast<double>(total_steps))};
    nn::AdamState adam;
    adam.beta1 = settings.beta1;
    adam.beta2 = settings.beta2;
    adam.epsilon = settings.epsilon;

    std::vector<std::size_t> order(n);
    std::int64_t step = 0;
    for (int epoch = 0; epoch < budget_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng epoch_rng = shuffle_rng.fork(static_cast<std::uint64_t>(epoch));
        epoch_rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < n; start += batch) {
            const std::span<const std::size_t> rows(order.data() + start, std::min(batch, n - start));
            std::vector<int> labels;
            labels.reserve(rows.size());
            for (std::size_t r : rows) {
                labels.push_back(task.train.labels[r]);
            }
            for (auto& p : params) {
                p.zero_grad();
            }
            nn::Tensor loss = nn::softmax_cross_entropy(model.logits(task.batch(task.train, rows)), labels);
            loss.backward();
            nn::adam_step(params, adam, nn::lr_at(step, schedule));
            ++step;
        }
    }
    for (auto& p : params) {
        p.zero_grad();
    }

    Trial& t = out.trial;
    t.config = config;
    t.budget_epochs = budget_epochs;
    t.seed = seed;
    t.train_steps = step;
    t.val_acc = evaluate(model, task, task.val, settings.eval_batch_size);
    t.test_acc = evaluate(model, task, task.test, settings.eval_batch_size);
    t.wall_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start_time).count();
    return out;
}

inline Trial fine_tune(const HeadConfig& config, const TaskDataset& task, int budget_epochs, std::uint64_t seed,
                       const TrainSettings& settings, const EncoderWeights& pretrained) {
    return fine_tune_model(config, task, budget_epochs, seed, settings, pretrained).trial;
}

} // namespace headsearch
