// Acceptance checks, one PASS/FAIL line per criterion. Criteria backed by
// unit-test oracles rerun those binaries; the search comparison trains real
// runs and caches them under HEADSEARCH_ACCEPTANCE_RUNS (first run takes hours
// on one core, later runs only reread the files).
//
//   acceptance            all criteria
//   acceptance 4 6        selected criteria

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "headsearch/report.hpp"
#include "headsearch/run.hpp"
#include "shared_weights.hpp"

#ifndef HEADSEARCH_TEST_BIN_DIR
#define HEADSEARCH_TEST_BIN_DIR "tests"
#endif
#ifndef HEADSEARCH_CLI
#define HEADSEARCH_CLI "headsearch"
#endif
#ifndef HEADSEARCH_ACCEPTANCE_RUNS
#define HEADSEARCH_ACCEPTANCE_RUNS "acceptance_runs"
#endif

using namespace headsearch;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::array<std::uint64_t, 3> kSeeds{0, 1, 2};

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

struct Command {
    int status = -1;
    std::string output;
    double seconds = 0.0;
};

Command run_command(const std::string& cmd) {
    Command c;
    const auto t0 = Clock::now();
    FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
    if (!p) {
        return c;
    }
    std::array<char, 4096> buf;
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), p)) {
        c.output += buf.data();
    }
    const int raw = ::pclose(p);
    c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    c.seconds = seconds_since(t0);
    return c;
}

// Runs a unit-test binary with a gtest filter; passes when every selected
// test passes within the time limit.
Outcome gtest(const std::string& binary, const std::string& filter, double limit_s) {
    const Command c =
        run_command(std::string(HEADSEARCH_TEST_BIN_DIR) + "/" + binary + " --gtest_filter='" + filter + "'");
    std::size_t ran = 0;
    if (const auto pos = c.output.rfind("[==========] "); pos != std::string::npos) {
        ran = std::stoul(c.output.substr(pos + 13));
    }
    Outcome o;
    o.pass = c.status == 0 && ran > 0 && c.seconds < limit_s;
    o.detail = binary + " " + filter + ": " + std::to_string(ran) + " tests, " + fmt("%.1f s", c.seconds);
    if (c.status != 0) {
        o.detail += ", exit " + std::to_string(c.status);
        std::cerr << c.output;
    }
    return o;
}

Outcome all_of(std::initializer_list<Outcome> parts) {
    Outcome o{true, ""};
    for (const auto& p : parts) {
        o.pass = o.pass && p.pass;
        o.detail += (o.detail.empty() ? "" : "; ") + p.detail;
    }
    return o;
}

// ─── Cached search runs ──────────────────────────────────────────────────────

struct RunRecord {
    std::string task;
    bool small = false;
    std::uint64_t seed = 0;
    fs::path dir;
    Trial baseline, tuned;
    std::size_t trials = 0;
    double seconds = 0.0; // search + final runs + baseline
};

fs::path run_dir(const std::string& task, bool small, std::uint64_t seed) {
    return fs::path(HEADSEARCH_ACCEPTANCE_RUNS) / (task + (small ? "_small" : "")) / ("seed" + std::to_string(seed));
}

SearchOptions run_options(const std::string& task, bool small, std::uint64_t seed) {
    SearchOptions o;
    o.task.spec = task;
    o.task.small = small;
    o.seed = seed;
    o.budget_max = 9;
    o.eta = 3;
    return o;
}

RunRecord load_or_run(const std::string& task, bool small, std::uint64_t seed) {
    RunRecord r;
    r.task = task;
    r.small = small;
    r.seed = seed;
    r.dir = run_dir(task, small, seed);
    const fs::path done = r.dir / "elapsed.json";
    if (!fs::exists(done)) {
        std::cerr << "training " << r.dir.string() << '\n';
        const auto o = run_options(task, small, seed);
        const auto t0 = Clock::now();
        const TaskDataset data = load_task(o.task);
        run_search(o, data, fixtures::pretrained_base(), r.dir.string());
        run_baseline(o, data, fixtures::pretrained_base(), r.dir.string());
        write_text(done.string(), nlohmann::json{{"seconds", seconds_since(t0)}}.dump() + "\n");
    }
    r.baseline = trial_from_json(read_json((r.dir / "baseline.json").string()));
    r.tuned = trial_from_json(read_json((r.dir / "tuned.json").string()));
    r.trials = read_trials((r.dir / "trials.jsonl").string()).size();
    r.seconds = read_json(done.string()).at("seconds").get<double>();
    return r;
}

std::vector<RunRecord> all_runs(bool small) {
    std::vector<RunRecord> out;
    for (TaskKind kind : kAllTasks) {
        for (std::uint64_t seed : kSeeds) {
            out.push_back(load_or_run(std::string(to_string(kind)), small, seed));
        }
    }
    return out;
}

struct Comparison {
    int wins = 0;           // tasks where mean tuned >= mean baseline
    double mean_gain = 0.0; // accuracy points
    std::string per_task;
};

Comparison compare(const std::vector<RunRecord>& runs) {
    Comparison c;
    for (TaskKind kind : kAllTasks) {
        double base = 0.0, tuned = 0.0;
        int n = 0;
        for (const auto& r : runs) {
            if (r.task == to_string(kind)) {
                base += r.baseline.test_acc;
                tuned += r.tuned.test_acc;
                ++n;
            }
        }
        base /= n;
        tuned /= n;
        c.wins += tuned >= base - 1e-9 ? 1 : 0; // accuracies are multiples of 1/500; ignore summation order
        c.mean_gain += 100.0 * (tuned - base) / static_cast<double>(kAllTasks.size());
        c.per_task += std::string(c.per_task.empty() ? "" : " ") + std::string(to_string(kind)) + " " + fixed3(base) +
                      "->" + fixed3(tuned);
    }
    return c;
}

// ─── Criteria ────────────────────────────────────────────────────────────────

Outcome gradients() {
    return all_of({gtest("test_nn", "GradCheck.*", 60.0), gtest("test_head", "Head.FullHeadGradientCheck", 60.0)});
}

Outcome hyperband_oracle() {
    return gtest("test_hyperband",
                 "Plan.MatchesReferenceRecurrence:Plan.NineThree:Hyperband.FullSearchRecordsTwentyTwoTrials", 600.0);
}

Outcome search_space() {
    return gtest("test_searchspace", "Decode.RoundTripOverSamples:Cardinality.MatchesEnumeration:Reported.*", 600.0);
}

Outcome headline() {
    const auto full = all_runs(false), small = all_runs(true);
    double seconds = 0.0;
    bool counts_ok = true;
    for (const auto* runs : {&full, &small}) {
        for (const auto& r : *runs) {
            seconds += r.seconds;
            counts_ok = counts_ok && r.trials == 22;
        }
    }
    const Comparison f = compare(full), s = compare(small);
    const bool accuracy = f.wins >= 4 && f.mean_gain >= 1.0 && s.mean_gain >= 2.0;
    const bool runtime = seconds < 30 * 60;
    Outcome o;
    o.pass = accuracy && runtime && counts_ok;
    o.detail = "full: " + std::to_string(f.wins) + "/5 tasks tuned>=base, mean gain " + fmt("%+.2f", f.mean_gain) +
               " pts [" + f.per_task + "]; small: " + std::to_string(s.wins) + "/5, mean gain " +
               fmt("%+.2f", s.mean_gain) + " pts [" + s.per_task + "]; accuracy " + (accuracy ? "ok" : "short") +
               "; runtime " + fmt("%.1f", seconds / 60.0) + " min for 30 runs (limit 30)" +
               (counts_ok ? "" : "; a run did not record 22 trials");
    return o;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Reruns the quickest cached search through the CLI and compares bytes.
Outcome determinism() {
    std::vector<RunRecord> runs = all_runs(true);
    const RunRecord& r =
        *std::min_element(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.seconds < b.seconds; });
    const fs::path out = fs::path(HEADSEARCH_ACCEPTANCE_RUNS) / "rerun";
    fs::remove_all(out);
    const Command c = run_command(std::string(HEADSEARCH_CLI) + " search --task " + r.task + " --small --seed " +
                                  std::to_string(r.seed) + " --parallel 1 --weights " + HEADSEARCH_TEST_WEIGHTS +
                                  " --out " + out.string());
    Outcome o;
    if (c.status != 0) {
        o.detail = "rerun failed: " + c.output;
        return o;
    }
    const std::string a = slurp(r.dir / "trials.jsonl"), b = slurp(out / "trials.jsonl");
    o.pass = !a.empty() && a == b;
    o.detail = r.task + "_small seed " + std::to_string(r.seed) + ": " + std::to_string(a.size()) + " bytes, " +
               (o.pass ? "identical" : "different") + fmt(" (rerun %.0f s)", c.seconds);
    fs::remove_all(out);
    return o;
}

Outcome freeze() {
    const EncoderWeights& base = fixtures::pretrained_base();
    bool bitwise = true;
    int unfrozen_wins = 0;
    std::string per_task;
    for (TaskKind kind : kAllTasks) {
        const std::string name(to_string(kind));
        const RunRecord unfrozen = load_or_run(name, false, 0);
        const auto o = run_options(name, false, 0);
        HeadConfig c = baseline_config();
        c.freeze_base = true;
        const auto frozen = fine_tune_model(c, load_task(o.task), o.final_budget(), o.final_seed(), o.train, base);
        const auto after = frozen.model.base.body_params(), before = base.body_params();
        for (std::size_t i = 0; i < after.size(); ++i) {
            bitwise = bitwise && std::equal(after[i].data().begin(), after[i].data().end(), before[i].data().begin());
        }
        unfrozen_wins += unfrozen.baseline.test_acc > frozen.trial.test_acc ? 1 : 0;
        per_task += (per_task.empty() ? "" : " ") + name + " " + fixed3(frozen.trial.test_acc) + "/" +
                    fixed3(unfrozen.baseline.test_acc);
    }
    Outcome o;
    o.pass = bitwise && unfrozen_wins >= 3;
    o.detail = std::string("frozen base ") + (bitwise ? "bitwise unchanged" : "CHANGED") +
               "; unfrozen beats frozen on " + std::to_string(unfrozen_wins) + "/5 [frozen/unfrozen: " + per_task + "]";
    return o;
}

Outcome report_fidelity() {
    const fs::path dir = fs::path(HEADSEARCH_ACCEPTANCE_RUNS) / "report";
    fs::create_directories(dir);
    const std::vector<std::string> tasks{"sst2", "cola", "mrpc", "mnli", "rte", "qqp"};
    const std::vector<std::string> base{"0.925", "0.831", "0.821", "0.829", "0.700", "0.899"};
    const std::vector<std::string> tuned{"0.930", "0.831", "0.860", "0.835", "0.700", "0.900"};
    std::string csv = "task,base,tuned\n";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        csv += tasks[i] + "," + base[i] + "," + tuned[i] + "\n";
    }
    write_text((dir / "published.csv").string(), csv);
    const Command c = run_command(std::string(HEADSEARCH_CLI) + " report --accuracies " +
                                  (dir / "published.csv").string() + " --out " + (dir / "published").string());
    Outcome o;
    if (c.status != 0) {
        o.detail = "report failed: " + c.output;
        return o;
    }
    const std::string md = slurp(dir / "published_accuracy.md");
    std::vector<std::string> rows;
    std::istringstream in(md);
    for (std::string l; std::getline(in, l);) {
        rows.push_back(l);
    }
    // Cells between pipes for the base and tuned rows.
    auto cells = [](const std::string& row) {
        std::vector<std::string> out;
        std::stringstream ss(row);
        std::string cell;
        while (std::getline(ss, cell, '|')) {
            const auto b = cell.find_first_not_of(' '), e = cell.find_last_not_of(' ');
            if (b != std::string::npos) {
                out.push_back(cell.substr(b, e - b + 1));
            }
        }
        return out;
    };
    bool verbatim = rows.size() == 4;
    int bold = 0;
    std::set<std::string> bold_tasks;
    if (verbatim) {
        const auto b = cells(rows[2]), t = cells(rows[3]);
        verbatim = b.size() == tasks.size() + 2 && t.size() == tasks.size() + 2;
        for (std::size_t i = 0; verbatim && i < tasks.size(); ++i) {
            std::string cell = t[i + 1];
            if (cell.size() > 4 && cell.starts_with("**") && cell.ends_with("**")) {
                cell = cell.substr(2, cell.size() - 4);
                ++bold;
                bold_tasks.insert(tasks[i]);
            }
            verbatim = verbatim && b[i + 1] == base[i] && cell == tuned[i];
        }
        bold += static_cast<int>(t.back().find("**") != std::string::npos);
    }
    const std::set<std::string> expected{"sst2", "mrpc", "mnli", "qqp"};
    o.pass = verbatim && bold == 4 && bold_tasks == expected;
    o.detail = std::string("task cells ") + (verbatim ? "verbatim" : "DIFFER") + ", " + std::to_string(bold) +
               " bold cells (sst2 mrpc mnli qqp expected)";
    return o;
}

} // namespace

int main(int argc, char** argv) {
    tune_allocator();
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> check;
    };
    const std::vector<Criterion> criteria{
        {1, "gradient checks", gradients},
        {2, "hyperband schedule", hyperband_oracle},
        {3, "search space", search_space},
        {4, "tuned vs baseline", headline},
        {5, "sampler concentration", [] { return gtest("test_bohb", "Propose.ConcentratesOnPlantedRegion", 60.0); }},
        {6, "determinism", determinism},
        {7, "freeze", freeze},
        {8, "report tables", report_fidelity},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        selected.insert(std::atoi(argv[i]));
    }
    int failures = 0;
    for (const auto& [id, name, check] : criteria) {
        if (!selected.empty() && !selected.count(id)) {
            continue;
        }
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o.detail = std::string("error: ") + e.what();
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << ' ' << id << ' ' << name << ": " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
