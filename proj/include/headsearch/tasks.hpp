#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "headsearch/errors.hpp"
#include "headsearch/rng.hpp"
#include "headsearch/tokenizer.hpp"

namespace headsearch {

// Sequences of one split, flattened [n * seq_len].
struct Split {
    std::vector<int> ids;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }

    bool operator==(const Split&) const = default;
};

struct TaskDataset {
    std::string name;
    int num_classes = 2;
    std::size_t seq_len = 32;
    Split train, val, test;

    std::span<const int> sequence(const Split& split, std::size_t i) const {
        return std::span<const int>(split.ids).subspan(i * seq_len, seq_len);
    }

    TokenBatch batch(const Split& split, std::span<const std::size_t> rows) const {
        TokenBatch b;
        b.batch = rows.size();
        b.seq_len = seq_len;
        b.ids.reserve(rows.size() * seq_len);
        for (std::size_t r : rows) {
            const auto seq = sequence(split, r);
            b.ids.insert(b.ids.end(), seq.begin(), seq.end());
        }
        return b;
    }
};

// ─── Synthetic tasks ─────────────────────────────────────────────────────────

enum class TaskKind { keyword, majority, order, trigram, parity };

inline constexpr std::array<TaskKind, 5> kAllTasks{TaskKind::keyword, TaskKind::majority, TaskKind::order,
                                                   TaskKind::trigram, TaskKind::parity};

constexpr std::string_view to_string(TaskKind k) {
    switch (k) {
    case TaskKind::keyword:
        return "keyword";
    case TaskKind::majority:
        return "majority";
    case TaskKind::order:
        return "order";
    case TaskKind::trigram:
        return "trigram";
    case TaskKind::parity:
        return "parity";
    }
    return "?";
}

inline std::optional<TaskKind> parse_task(std::string_view s) {
    for (auto k : kAllTasks) {
        if (to_string(k) == s) {
            return k;
        }
    }
    return std::nullopt;
}

// Content ids are [3, 67); the task-defining tokens live inside that range
// and are excluded from the background draw of the tasks that use them.
namespace task_tokens {
inline constexpr int kContentVocab = 64;
inline constexpr int kContentLength = 30;
inline constexpr int kKeyword = 30;
inline constexpr int kA = 10;
inline constexpr int kB = 20;
inline constexpr std::array<int, 3> kTrigram{40, 41, 42};
} // namespace task_tokens

// Label of a content sequence (no CLS/PAD) under each task's rule.
inline int task_label(TaskKind kind, std::span<const int> content) {
    using namespace task_tokens;
    auto count = [&](int tok) { return std::count(content.begin(), content.end(), tok); };
    switch (kind) {
    case TaskKind::keyword:
        return count(kKeyword) > 0 ? 1 : 0;
    case TaskKind::majority:
        return count(kA) > count(kB) ? 1 : 0;
    case TaskKind::order: {
        const auto a = std::find(content.begin(), content.end(), kA);
        const auto b = std::find(content.begin(), content.end(), kB);
        return a < b ? 1 : 0;
    }
    case TaskKind::trigram:
        return std::search(content.begin(), content.end(), kTrigram.begin(), kTrigram.end()) != content.end() ? 1 : 0;
    case TaskKind::parity:
        return static_cast<int>(count(kKeyword) % 2);
    }
    return 0;
}

namespace detail {

inline std::vector<int> background(Rng& rng, std::initializer_list<int> excluded) {
    using namespace task_tokens;
    std::vector<int> seq(kContentLength);
    for (int& tok : seq) {
        do {
            tok = kFirstContentId + static_cast<int>(rng.index(kContentVocab));
        } while (std::find(excluded.begin(), excluded.end(), tok) != excluded.end());
    }
    return seq;
}

// `count` distinct positions in [0, kContentLength).
inline std::vector<std::size_t> positions(Rng& rng, std::size_t count) {
    std::vector<std::size_t> all(task_tokens::kContentLength);
    std::iota(all.begin(), all.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(all));
    all.resize(count);
    return all;
}

// One content sequence drawn for the requested label (before the rejection
// check in generate()).
inline std::vector<int> draw_content(TaskKind kind, int label, Rng& rng) {
    using namespace task_tokens;
    switch (kind) {
    case TaskKind::keyword: {
        auto seq = background(rng, {kKeyword});
        if (label == 1) {
            for (auto p : positions(rng, static_cast<std::size_t>(rng.uniform_int(1, 3)))) {
                seq[p] = kKeyword;
            }
        }
        return seq;
    }
    case TaskKind::majority: {
        auto seq = background(rng, {kA, kB});
        const auto fewer = static_cast<std::size_t>(rng.uniform_int(1, 5));
        const auto more = fewer + static_cast<std::size_t>(rng.uniform_int(1, 3));
        const auto pos = positions(rng, fewer + more);
        const int major = label == 1 ? kA : kB;
        const int minor = label == 1 ? kB : kA;
        for (std::size_t i = 0; i < pos.size(); ++i) {
            seq[pos[i]] = i < more ? major : minor;
        }
        return seq;
    }
    case TaskKind::order: {
        auto seq = background(rng, {kA, kB});
        const auto na = static_cast<std::size_t>(rng.uniform_int(1, 3));
        const auto nb = static_cast<std::size_t>(rng.uniform_int(1, 3));
        const auto pos = positions(rng, na + nb);
        for (std::size_t i = 0; i < pos.size(); ++i) {
            seq[pos[i]] = i < na ? kA : kB;
        }
        if (task_label(kind, seq) != label) {
            for (int& tok : seq) {
                tok = tok == kA ? kB : (tok == kB ? kA : tok);
            }
        }
        return seq;
    }
    case TaskKind::trigram: {
        const auto [x, y, z] = kTrigram;
        auto seq = background(rng, {x, y, z});
        // near-miss fragments in both classes so token counts alone do not decide
        const std::array<std::array<int, 2>, 3> fragments{{{x, y}, {y, z}, {x, z}}};
        for (int i = 0; i < 2; ++i) {
            const auto& f = fragments[rng.index(fragments.size())];
            const auto start = rng.index(kContentLength - 1);
            seq[start] = f[0];
            seq[start + 1] = f[1];
        }
        if (label == 1) {
            const auto start = rng.index(kContentLength - 2);
            seq[start] = x;
            seq[start + 1] = y;
            seq[start + 2] = z;
        }
        return seq;
    }
    case TaskKind::parity: {
        auto seq = background(rng, {kKeyword});
        const int count = 2 * static_cast<int>(rng.uniform_int(0, 2)) + (label == 1 ? 1 : 2);
        for (auto p : positions(rng, static_cast<std::size_t>(count))) {
            seq[p] = kKeyword;
        }
        return seq;
    }
    }
    return {};
}

} // namespace detail

struct TaskSizes {
    std::size_t train = 2000;
    std::size_t val = 500;
    std::size_t test = 500;
};

// Deterministic in (kind, seed). Labels alternate within each split before a
// seeded shuffle, so binary classes are balanced exactly (odd sizes within
// one example). No sequence appears twice across all splits.
inline TaskDataset generate(TaskKind kind, std::uint64_t seed, const TaskSizes& sizes = {}) {
    TaskDataset task;
    task.name = std::string(to_string(kind));
    task.num_classes = 2;
    task.seq_len = static_cast<std::size_t>(task_tokens::kContentLength) + 2; // CLS + content + PAD
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(kind)));
    std::set<std::vector<int>> seen;
    auto fill = [&](Split& split, std::size_t n) {
        std::vector<std::vector<int>> rows;
        for (std::size_t i = 0; i < n; ++i) {
            const int label = static_cast<int>(i % 2);
            std::vector<int> content;
            do {
                content = detail::draw_content(kind, label, rng);
            } while (task_label(kind, content) != label || !seen.insert(content).second);
            rows.push_back(std::move(content));
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t i : order) {
            split.ids.push_back(kClsId);
            split.ids.insert(split.ids.end(), rows[i].begin(), rows[i].end());
            split.ids.push_back(kPadId);
            split.labels.push_back(static_cast<int>(i % 2));
        }
    };
    fill(task.train, sizes.train);
    fill(task.val, sizes.val);
    fill(task.test, sizes.test);
    return task;
}

// Training split replaced by n examples drawn without replacement; evaluation
// splits are copied unchanged.
inline TaskDataset make_small(const TaskDataset& task, std::size_t n, Rng& rng) {
    if (n > task.train.size()) {
        throw PreconditionError("make_small: n = " + std::to_string(n) + " exceeds train size " +
                                std::to_string(task.train.size()));
    }
    std::vector<std::size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    TaskDataset out = task;
    out.name = task.name + "_small";
    out.train = {};
    for (std::size_t i = 0; i < n; ++i) {
        const auto seq = task.sequence(task.train, order[i]);
        out.train.ids.insert(out.train.ids.end(), seq.begin(), seq.end());
        out.train.labels.push_back(task.train.labels[order[i]]);
    }
    return out;
}

// ─── TSV ingestion ───────────────────────────────────────────────────────────

namespace detail {
inline std::vector<std::string> split_tabs(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) {
            break;
        }
        start = tab + 1;
    }
    return out;
}
} // namespace detail

// Header row required; columns addressed by name. Labels become contiguous
// ids by first appearance. Rows are shuffled with `seed`, then split
// floor(70%) / floor(15%) / rest.
inline TaskDataset load_tsv(const std::string& path, const std::string& text_column, const std::string& label_column,
                            std::uint64_t seed = 0, const Tokenizer& tokenizer = {}) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open TSV file: " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(path + ": empty file");
    }
    auto strip_cr = [](std::string& s) {
        if (!s.empty() && s.back() == '\r') {
            s.pop_back();
        }
    };
    strip_cr(line);
    const auto header = detail::split_tabs(line);
    auto column = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw DataError(path + ": missing column \"" + name + "\"");
        }
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t text_idx = column(text_column);
    const std::size_t label_idx = column(label_column);

    std::vector<std::vector<int>> sequences;
    std::vector<int> labels;
    std::map<std::string, int> label_ids;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) {
            continue;
        }
        const auto cells = detail::split_tabs(line);
        if (cells.size() <= std::max(text_idx, label_idx)) {
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " columns, got " + std::to_string(cells.size()));
        }
        const std::string& label = cells[label_idx];
        if (label.empty()) {
            throw DataError(path + ":" + std::to_string(line_no) + ": empty label cell");
        }
        const auto [it, inserted] = label_ids.emplace(label, static_cast<int>(label_ids.size()));
        labels.push_back(it->second);
        sequences.push_back(tokenizer.encode(cells[text_idx]));
    }
    if (sequences.empty()) {
        throw DataError(path + ": no data rows");
    }

    TaskDataset task;
    task.name = path;
    task.num_classes = static_cast<int>(label_ids.size());
    task.seq_len = static_cast<std::size_t>(tokenizer.max_len);
    std::vector<std::size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t n = order.size();
    const std::size_t n_train = n * 70 / 100;
    const std::size_t n_val = n * 15 / 100;
    for (std::size_t i = 0; i < n; ++i) {
        Split& split = i < n_train ? task.train : (i < n_train + n_val ? task.val : task.test);
        split.ids.insert(split.ids.end(), sequences[order[i]].begin(), sequences[order[i]].end());
        split.labels.push_back(labels[order[i]]);
    }
    return task;
}

} // namespace headsearch
