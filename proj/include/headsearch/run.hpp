#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "headsearch/base_encoder.hpp"
#include "headsearch/bohb.hpp"
#include "headsearch/hyperband.hpp"
#include "headsearch/searchspace.hpp"
#include "headsearch/tasks.hpp"
#include "headsearch/trainer.hpp"

namespace headsearch {

using ordered_json = nlohmann::ordered_json;

// Activations are a few hundred KB each, above glibc's mmap threshold, so every
// training step would map, fault in and unmap them again. Keep them on the heap.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// ─── Trial records ───────────────────────────────────────────────────────────

inline ordered_json trial_to_json(const Trial& t) {
    ordered_json j;
    j["trial_id"] = t.trial_id;
    j["config"] = ordered_json::parse(to_json(t.config).dump());
    j["budget_epochs"] = t.budget_epochs;
    j["seed"] = t.seed;
    j["val_acc"] = t.val_acc;
    j["test_acc"] = t.test_acc;
    j["train_steps"] = t.train_steps;
    j["wall_ms"] = t.wall_ms;
    j["bracket"] = t.bracket;
    j["rung"] = t.rung;
    return j;
}

inline Trial trial_from_json(const nlohmann::json& j) {
    try {
        Trial t;
        t.trial_id = j.at("trial_id").get<std::int64_t>();
        t.config = head_config_from_json(j.at("config"));
        t.budget_epochs = j.at("budget_epochs").get<int>();
        t.seed = j.at("seed").get<std::uint64_t>();
        t.val_acc = j.at("val_acc").get<double>();
        t.test_acc = j.at("test_acc").get<double>();
        t.train_steps = j.at("train_steps").get<std::int64_t>();
        t.wall_ms = j.at("wall_ms").get<std::int64_t>();
        t.bracket = j.at("bracket").get<int>();
        t.rung = j.at("rung").get<int>();
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("trial record: ") + e.what());
    }
}

inline std::string trial_line(const Trial& t) {
    return trial_to_json(t).dump();
}

inline std::vector<Trial> read_trials(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::vector<Trial> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(trial_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << text;
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

// ─── Tasks by name ───────────────────────────────────────────────────────────

struct TaskSource {
    std::string spec = "keyword"; // synthetic task name or tsv:<path>
    bool small = false;
    std::uint64_t data_seed = 0;
    std::string text_column = "sentence";
    std::string label_column = "label";
    std::size_t small_size = 500;
};

inline TaskDataset load_task(const TaskSource& src) {
    TaskDataset task;
    if (src.spec.rfind("tsv:", 0) == 0) {
        task = load_tsv(src.spec.substr(4), src.text_column, src.label_column, src.data_seed);
    } else if (const auto kind = parse_task(src.spec)) {
        task = generate(*kind, src.data_seed);
    } else {
        throw PreconditionError("unknown task \"" + src.spec +
                                "\" (expected keyword, majority, order, trigram, "
                                "parity or tsv:<path>)");
    }
    if (src.small) {
        Rng rng(Rng::mix(src.data_seed, src.small_size));
        task = make_small(task, src.small_size, rng);
    }
    return task;
}

// ─── Search ──────────────────────────────────────────────────────────────────

struct SearchOptions {
    TaskSource task;
    int budget_max = 9;
    int eta = 3;
    std::uint64_t seed = 0;
    int parallel = 1;
    // Off by default so reruns are byte-identical; wall_ms is then written as 0.
    bool timing = false;
    TrainSettings train;
    SamplerParams sampler;

    // Epochs for the final baseline and tuned runs: 5 full, 10 small.
    int final_budget() const { return task.small ? 10 : 5; }
    // Training seed shared by the final baseline and tuned runs.
    std::uint64_t final_seed() const { return Rng::mix(seed, 0xF1A1); }
};

inline ordered_json settings_json(const SearchOptions& o, const EncoderDims& dims) {
    ordered_json j;
    j["task"] = o.task.spec;
    j["small"] = o.task.small;
    j["data_seed"] = o.task.data_seed;
    if (o.task.spec.rfind("tsv:", 0) == 0) {
        j["text_column"] = o.task.text_column;
        j["label_column"] = o.task.label_column;
    }
    j["budget_max"] = o.budget_max;
    j["eta"] = o.eta;
    j["seed"] = o.seed;
    j["parallel"] = o.parallel;
    j["timing"] = o.timing;
    j["final_budget"] = o.final_budget();
    j["train"] = {
        {"batch_size", o.train.batch_size}, {"base_lr", o.train.base_lr}, {"warmup_frac", o.train.warmup_frac},
        {"beta1", o.train.beta1},           {"beta2", o.train.beta2},     {"epsilon", o.train.epsilon}};
    j["sampler"] = {{"gamma", o.sampler.gamma},
                    {"min_points", o.sampler.min_points},
                    {"n_candidates", o.sampler.n_candidates},
                    {"random_fraction", o.sampler.random_fraction},
                    {"bandwidth_floor", o.sampler.bandwidth_floor}};
    j["base"] = {{"vocab", dims.vocab},
                 {"dim", dims.dim},
                 {"max_len", dims.max_len},
                 {"blocks", dims.blocks},
                 {"heads", dims.heads}};
    return j;
}

struct SearchResult {
    std::vector<Trial> trials;
    Trial best;  // incumbent at the largest budget
    Trial tuned; // best config retrained at the final budget
};

namespace detail {
inline TrialTrainer make_trainer(const TaskDataset& task, const TrainSettings& settings,
                                 const EncoderWeights& pretrained, bool timing) {
    return [&task, settings, &pretrained, timing](const HeadConfig& c, int budget, std::uint64_t seed) {
        Trial t = fine_tune(c, task, budget, seed, settings, pretrained);
        if (!timing) {
            t.wall_ms = 0;
        }
        return t;
    };
}
} // namespace detail

// Full Hyperband + BOHB search. With a non-empty out_dir, writes
// trials.jsonl (one line per trial as it finishes), best_config.json,
// tuned.json and settings.json there.
inline SearchResult run_search(const SearchOptions& o, const TaskDataset& task, const EncoderWeights& pretrained,
                               const std::string& out_dir = {}) {
    const HyperbandPlan p = plan(o.budget_max, o.eta);
    BohbSampler sampler(o.sampler, static_cast<int>(pretrained.dims.dim));
    std::ofstream jsonl;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_text(out_dir + "/settings.json", settings_json(o, pretrained.dims).dump(2) + "\n");
        jsonl.open(out_dir + "/trials.jsonl", std::ios::binary | std::ios::trunc);
        if (!jsonl) {
            throw IoError("cannot write " + out_dir + "/trials.jsonl");
        }
    }
    BracketOptions opts;
    opts.parallel = o.parallel;
    opts.on_trial = [&](const Trial& t) {
        sampler.observe(t);
        if (jsonl.is_open()) {
            jsonl << trial_line(t) << '\n';
            jsonl.flush();
        }
    };
    Rng rng(o.seed);
    const ConfigSampler sample = [&sampler](Rng& r) { return sampler.propose(r); };
    SearchResult result;
    result.trials = run_hyperband(p, sample, detail::make_trainer(task, o.train, pretrained, o.timing), rng, opts);
    result.best = best_trial(result.trials);
    result.tuned =
        detail::make_trainer(task, o.train, pretrained, o.timing)(result.best.config, o.final_budget(), o.final_seed());
    result.tuned.trial_id = -1;
    if (!out_dir.empty()) {
        write_text(out_dir + "/best_config.json", to_json(result.best.config).dump(2) + "\n");
        write_text(out_dir + "/tuned.json", trial_to_json(result.tuned).dump(2) + "\n");
    }
    return result;
}

// Baseline head at the final budget with the same training seed as the tuned
// run. Writes baseline.json when out_dir is given.
inline Trial run_baseline(const SearchOptions& o, const TaskDataset& task, const EncoderWeights& pretrained,
                          const std::string& out_dir = {}, const HeadConfig& config = baseline_config()) {
    Trial t = detail::make_trainer(task, o.train, pretrained, o.timing)(config, o.final_budget(), o.final_seed());
    t.trial_id = -1;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_text(out_dir + "/baseline.json", trial_to_json(t).dump(2) + "\n");
    }
    return t;
}

} // namespace headsearch
