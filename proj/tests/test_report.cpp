#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <gtest/gtest.h>

#include "headsearch/report.hpp"
#include "headsearch/run.hpp"
#include "reported_configs.hpp"
#include "shared_weights.hpp"

using namespace headsearch;

namespace {

AccuracyTable published() {
    AccuracyTable t;
    t.tasks = {"sst2", "cola", "mrpc", "mnli", "rte", "qqp"};
    t.base = {0.925, 0.831, 0.821, 0.829, 0.700, 0.899};
    t.tuned = {0.930, 0.831, 0.860, 0.835, 0.700, 0.900};
    return t;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) {
        out.push_back(l);
    }
    return out;
}

std::size_t count(const std::string& text, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + needle.size())) {
        ++n;
    }
    return n;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / ("headsearch_" + std::to_string(::getpid()) + "_" + name);
    std::filesystem::remove_all(d);
    return d;
}

} // namespace

TEST(Rounding, HalfEven) {
    EXPECT_DOUBLE_EQ(round_half_even(0.8425), 0.842);
    EXPECT_DOUBLE_EQ(round_half_even(0.8435), 0.844);
    EXPECT_DOUBLE_EQ(round_half_even(0.83417), 0.834);
    EXPECT_DOUBLE_EQ(round_half_even(0.84267), 0.843);
    EXPECT_EQ(fixed3(0.7), "0.700");
}

TEST(AccuracyReport, PublishedValuesVerbatimWithFourBoldCells) {
    const std::string md = accuracy_markdown(published());
    const auto rows = lines(md);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0], "| method | sst2 | cola | mrpc | mnli | rte | qqp | average |");
    EXPECT_EQ(rows[2], "| base | 0.925 | 0.831 | 0.821 | 0.829 | 0.700 | 0.899 | 0.834 |");
    EXPECT_EQ(rows[3], "| tuned | **0.930** | 0.831 | **0.860** | **0.835** | 0.700 | **0.900** | 0.843 |");
    EXPECT_EQ(count(md, "**") / 2, 4u);
}

TEST(AccuracyReport, CsvImprovedColumnAndRoundtrip) {
    const std::string csv = accuracy_csv(published());
    const auto rows = lines(csv);
    ASSERT_EQ(rows.size(), 8u);
    EXPECT_EQ(rows[0], "task,base,tuned,improved");
    EXPECT_EQ(rows[2], "cola,0.831,0.831,false");
    EXPECT_EQ(rows[3], "mrpc,0.821,0.860,true");
    EXPECT_EQ(rows[7], "average,0.834,0.843,true");
    EXPECT_EQ(count(csv, ",true"), 5u); // four tasks plus the average row
    const AccuracyTable back = parse_accuracy_csv(csv);
    EXPECT_EQ(back.tasks, published().tasks);
    EXPECT_EQ(back.base, published().base);
    EXPECT_EQ(back.tuned, published().tuned);
    EXPECT_EQ(accuracy_csv(back), csv);
}

TEST(AccuracyReport, EqualCellIsNotBold) {
    AccuracyTable t{{"a", "b"}, {0.5, 0.6}, {0.5, 0.6004}}; // 0.6004 prints as 0.600
    const std::string md = accuracy_markdown(t);
    EXPECT_EQ(md.find("**"), std::string::npos);
    EXPECT_FALSE(improved(0.6, 0.6004));
    EXPECT_TRUE(improved(0.6, 0.601));
}

TEST(AccuracyReport, SingleTaskAverageIsThatTask) {
    const AccuracyTable t{{"keyword"}, {0.912}, {0.951}};
    EXPECT_EQ(lines(accuracy_markdown(t))[3], "| tuned | **0.951** | 0.951 |");
    EXPECT_EQ(lines(accuracy_csv(t))[2], "average,0.912,0.951,true");
}

TEST(AccuracyReport, Errors) {
    EXPECT_THROW(accuracy_markdown(AccuracyTable{}), PreconditionError);
    EXPECT_THROW(accuracy_markdown(AccuracyTable{{"a"}, {0.5}, {}}), PreconditionError);
    EXPECT_THROW(parse_accuracy_csv("nope\n"), DataError);
    EXPECT_THROW(parse_accuracy_csv("task,base,tuned\na,x,0.5\n"), DataError);
    EXPECT_THROW(parse_accuracy_csv("task,base,tuned\na,0.5\n"), DataError);
}

TEST(ArchitectureReport, PublishedFullColumns) {
    std::vector<std::string> tasks;
    std::vector<HeadConfig> configs;
    for (const auto& [name, col] : fixtures::full_columns()) {
        tasks.push_back(name);
        configs.push_back(fixtures::make(col));
    }
    const auto rows = lines(architecture_markdown(tasks, configs));
    ASSERT_EQ(rows.size(), 2 + architecture_rows().size());
    EXPECT_EQ(rows[2], "| pooling | mean | [CLS] | [CLS] | max | [CLS] | max |");
    EXPECT_EQ(rows[3], "| number linear layers | 5 | 1 | 4 | 3 | 1 | 1 |");
    EXPECT_EQ(rows[4], "| hidden dim linear layers | 50 | - | 74 | 117 | - | - |");
    EXPECT_EQ(rows[5], "| number conv layers | 0 | 0 | 4 | 3 | 0 | 2 |");
    EXPECT_EQ(rows[8], "| skip connection | - | - | True | True | - | True |");
    EXPECT_EQ(rows[10], "| number attention heads | 4 | - | 16 | - | - | - |");
    const auto csv = lines(architecture_csv(tasks, configs));
    EXPECT_EQ(csv[0], "row,sst2,cola,mrpc,mnli,rte,qqp");
    EXPECT_EQ(csv[6], "kernel size,-,-,7,11,-,7");
    EXPECT_THROW(architecture_markdown(tasks, {}), PreconditionError);
}

TEST(TrialRecords, JsonRoundtrip) {
    Trial t;
    t.trial_id = 17;
    t.config = fixtures::make(fixtures::full_columns()[2].second);
    t.budget_epochs = 9;
    t.seed = 18446744073709551557ull; // above 2^63
    t.val_acc = 0.8125;
    t.test_acc = 1.0 / 3.0;
    t.train_steps = 567;
    t.bracket = 1;
    t.rung = 1;
    const Trial back = trial_from_json(nlohmann::json::parse(trial_line(t)));
    EXPECT_EQ(back, t);
    EXPECT_EQ(trial_line(back), trial_line(t));
}

TEST(TrialRecords, ReadTrialsReportsLine) {
    const auto dir = scratch_dir("records");
    std::filesystem::create_directories(dir);
    Trial t;
    std::ofstream(dir / "ok.jsonl") << trial_line(t) << "\n\n" << trial_line(t) << "\n";
    EXPECT_EQ(read_trials((dir / "ok.jsonl").string()).size(), 2u);
    std::ofstream(dir / "bad.jsonl") << trial_line(t) << "\n{\"trial_id\": 1}\n";
    try {
        read_trials((dir / "bad.jsonl").string());
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
    EXPECT_THROW(read_trials((dir / "missing.jsonl").string()), IoError);
    std::filesystem::remove_all(dir);
}

// Tiny search on a 64-example subset: the whole output directory must be
// byte-identical across reruns.
TEST(SearchOutput, RerunIsByteIdentical) {
    const auto& base = fixtures::pretrained_base();
    Rng rng(0);
    const TaskDataset task = make_small(generate(TaskKind::trigram, 0), 64, rng);
    SearchOptions o;
    o.budget_max = 3;
    o.seed = 5;
    const auto a = scratch_dir("search_a"), b = scratch_dir("search_b");
    const auto ra = run_search(o, task, base, a.string());
    run_search(o, task, base, b.string());
    EXPECT_EQ(ra.trials.size(), static_cast<std::size_t>(plan(3, 3).trial_count()));
    for (const char* f : {"trials.jsonl", "settings.json", "best_config.json", "tuned.json"}) {
        const std::string x = slurp(a / f);
        EXPECT_FALSE(x.empty()) << f;
        EXPECT_EQ(x, slurp(b / f)) << f;
    }
    const auto records = read_trials((a / "trials.jsonl").string());
    ASSERT_EQ(records.size(), ra.trials.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        EXPECT_EQ(records[i], ra.trials[i]);
        EXPECT_EQ(records[i].wall_ms, 0);
    }
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}
