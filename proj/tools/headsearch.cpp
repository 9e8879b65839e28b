// headsearch: pretrain the base encoder, search heads, train baselines,
// render report tables, inspect the search space.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "headsearch/base_encoder.hpp"
#include "headsearch/report.hpp"
#include "headsearch/run.hpp"
#include "headsearch/searchspace.hpp"

namespace fs = std::filesystem;
using namespace headsearch;

namespace {

struct Common {
    SearchOptions opts;
    std::string weights;
    std::string out;
};

void add_task_flags(CLI::App* cmd, Common& c) {
    cmd->add_option("--task", c.opts.task.spec, "keyword|majority|order|trigram|parity or tsv:<path>")->required();
    cmd->add_flag("--small", c.opts.task.small, "500-sample train split, 10-epoch final budget");
    cmd->add_option("--seed", c.opts.seed, "search and training seed");
    cmd->add_option("--data-seed", c.opts.task.data_seed, "dataset generation / split seed");
    cmd->add_option("--text-col", c.opts.task.text_column, "TSV text column");
    cmd->add_option("--label-col", c.opts.task.label_column, "TSV label column");
    cmd->add_option("--weights", c.weights, "HSW1 weights file (default: $HEADSEARCH_WEIGHTS or weights/base.hsw)");
    cmd->add_option("--lr", c.opts.train.base_lr, "fine-tuning learning rate");
    cmd->add_flag("--timing", c.opts.timing, "record wall_ms (breaks byte-identical reruns)");
}

EncoderWeights load_base(const std::string& flag) {
    return load_weights(flag.empty() ? default_weights_path() : flag);
}

void print_trial(const std::string& label, const Trial& t) {
    std::cout << label << ": val_acc " << fixed3(t.val_acc) << "  test_acc " << fixed3(t.test_acc) << "  ("
              << t.budget_epochs << " epochs, " << t.train_steps << " steps)\n";
}

// Run directory -> (task label, baseline, tuned, best config).
struct RunDir {
    std::string task;
    Trial baseline, tuned;
    HeadConfig best;
};

RunDir read_run(const std::string& dir) {
    RunDir r;
    const auto settings = read_json(dir + "/settings.json");
    r.task = settings.at("task").get<std::string>();
    if (settings.value("small", false)) {
        r.task += "_small";
    }
    r.tuned = trial_from_json(read_json(dir + "/tuned.json"));
    r.baseline = trial_from_json(read_json(dir + "/baseline.json"));
    r.best = head_config_from_json(read_json(dir + "/best_config.json"));
    return r;
}

} // namespace

int main(int argc, char** argv) {
    headsearch::tune_allocator();
    CLI::App app{"Classification-head architecture search over a small pretrained encoder"};
    app.require_subcommand(1);

    // pretrain
    int steps = 2000;
    std::uint64_t pretrain_seed = 0;
    std::string pretrain_out;
    auto* pre = app.add_subcommand("pretrain", "pretrain the base encoder and write an HSW1 file");
    pre->add_option("--steps", steps, "optimizer steps");
    pre->add_option("--seed", pretrain_seed, "rng seed");
    pre->add_option("--out", pretrain_out, "weights path (default: $HEADSEARCH_WEIGHTS or weights/base.hsw)");

    // search
    Common search;
    search.out = "runs/search";
    auto* sea = app.add_subcommand("search", "Hyperband + BOHB head search on one task");
    add_task_flags(sea, search);
    sea->add_option("--budget-max", search.opts.budget_max, "largest budget R in epochs");
    sea->add_option("--eta", search.opts.eta, "halving rate");
    sea->add_option("--parallel", search.opts.parallel, "concurrent trials within a round");
    sea->add_option("--out", search.out, "run directory");

    // baseline
    Common base;
    base.out = "runs/search";
    auto* bas = app.add_subcommand("baseline", "train the single-linear-layer [CLS] baseline");
    add_task_flags(bas, base);
    bas->add_option("--out", base.out, "run directory (baseline.json is written here)");

    // report
    std::vector<std::string> run_dirs;
    std::string accuracies_csv;
    std::string report_out = "report";
    auto* rep = app.add_subcommand("report", "accuracy and architecture tables from run directories");
    rep->add_option("--runs", run_dirs, "run directories holding settings/baseline/tuned/best_config");
    rep->add_option("--accuracies", accuracies_csv, "task,base,tuned CSV instead of run directories");
    rep->add_option("--out", report_out, "output prefix");

    // space
    bool cardinality = false;
    std::string validate_path;
    int base_dim = 32;
    auto* spc = app.add_subcommand("space", "search-space utilities");
    spc->add_flag("--cardinality", cardinality, "print the size of the discretized space");
    spc->add_option("--validate", validate_path, "validate a HeadConfig JSON file");
    spc->add_option("--base-dim", base_dim, "encoder width used for divisibility checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*pre) {
            const std::string path = pretrain_out.empty() ? default_weights_path() : pretrain_out;
            Rng rng(pretrain_seed);
            const MarkovCorpus corpus;
            const auto result = pretrain(corpus, steps, rng);
            if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
                fs::create_directories(parent);
            }
            save_weights(path, result.weights);
            std::cout << "pretrain: " << steps << " steps, mlm loss " << result.first_step.masked_token << " -> "
                      << result.last_step.masked_token << ", sequence loss " << result.first_step.sequence << " -> "
                      << result.last_step.sequence << "\nwrote " << path << '\n';
        } else if (*sea) {
            const auto weights = load_base(search.weights);
            const auto task = load_task(search.opts.task);
            const auto result = run_search(search.opts, task, weights, search.out);
            std::cout << result.trials.size() << " trials -> " << search.out << "/trials.jsonl\n";
            print_trial("best (search budget)", result.best);
            print_trial("tuned (final budget)", result.tuned);
            std::cout << to_json(result.best.config).dump() << '\n';
        } else if (*bas) {
            const auto weights = load_base(base.weights);
            const auto task = load_task(base.opts.task);
            print_trial("baseline", run_baseline(base.opts, task, weights, base.out));
        } else if (*rep) {
            AccuracyTable acc;
            std::vector<std::string> arch_tasks;
            std::vector<HeadConfig> arch;
            if (!accuracies_csv.empty()) {
                std::ifstream in(accuracies_csv);
                if (!in) {
                    throw IoError("cannot open " + accuracies_csv);
                }
                std::ostringstream ss;
                ss << in.rdbuf();
                acc = parse_accuracy_csv(ss.str());
            } else {
                if (run_dirs.empty()) {
                    throw PreconditionError("report: give --runs or --accuracies");
                }
                std::vector<std::string> missing;
                for (const auto& dir : run_dirs) {
                    for (const char* f : {"settings.json", "baseline.json", "tuned.json", "best_config.json"}) {
                        if (!fs::exists(fs::path(dir) / f)) {
                            missing.push_back(dir + "/" + f);
                        }
                    }
                }
                if (!missing.empty()) {
                    std::string msg = "report: missing run files:";
                    for (const auto& m : missing) {
                        msg += "\n  " + m;
                    }
                    throw DataError(msg);
                }
                for (const auto& dir : run_dirs) {
                    const RunDir r = read_run(dir);
                    acc.tasks.push_back(r.task);
                    acc.base.push_back(r.baseline.test_acc);
                    acc.tuned.push_back(r.tuned.test_acc);
                    arch_tasks.push_back(r.task);
                    arch.push_back(r.best);
                }
            }
            if (const auto parent = fs::path(report_out).parent_path(); !parent.empty()) {
                fs::create_directories(parent);
            }
            const std::string md = accuracy_markdown(acc);
            write_text(report_out + "_accuracy.md", md);
            write_text(report_out + "_accuracy.csv", accuracy_csv(acc));
            std::cout << md;
            if (!arch.empty()) {
                const std::string amd = architecture_markdown(arch_tasks, arch);
                write_text(report_out + "_architecture.md", amd);
                write_text(report_out + "_architecture.csv", architecture_csv(arch_tasks, arch));
                std::cout << '\n' << amd;
            }
        } else if (*spc) {
            if (!cardinality && validate_path.empty()) {
                throw PreconditionError("space: give --cardinality or --validate <file>");
            }
            if (cardinality) {
                std::cout << headsearch::cardinality() << '\n';
            }
            if (!validate_path.empty()) {
                const auto config = head_config_from_json(read_json(validate_path));
                const auto violations = validate(config, base_dim);
                if (!violations.empty()) {
                    std::cout << describe(violations) << '\n';
                    return 1;
                }
                std::cout << "ok\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
