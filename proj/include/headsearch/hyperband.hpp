#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <thread>
#include <vector>

#include "headsearch/errors.hpp"
#include "headsearch/rng.hpp"
#include "headsearch/searchspace.hpp"
#include "headsearch/trainer.hpp"

namespace headsearch {

struct Round {
    int n = 0; // configs evaluated
    int r = 0; // epochs each

    bool operator==(const Round&) const = default;
};

struct Bracket {
    int s = 0;
    std::vector<Round> rounds;

    int trial_count() const {
        return std::accumulate(rounds.begin(), rounds.end(), 0, [](int acc, const Round& x) { return acc + x.n; });
    }
    bool operator==(const Bracket&) const = default;
};

struct HyperbandPlan {
    int R = 1;
    int eta = 3;
    std::vector<Bracket> brackets; // s_max first

    int s_max() const { return brackets.empty() ? 0 : brackets.front().s; }
    int trial_count() const {
        int total = 0;
        for (const auto& b : brackets) {
            total += b.trial_count();
        }
        return total;
    }
};

namespace detail {
inline std::int64_t ipow(std::int64_t base, int exp) {
    std::int64_t out = 1;
    while (exp-- > 0) {
        out *= base;
    }
    return out;
}
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
    return (a + b - 1) / b;
}
} // namespace detail

// Integer arithmetic throughout. Budgets are ceil(R / eta^(s-i)), at least 1,
// so r_{i+1} = eta * r_i holds exactly whenever R is a power of eta.
inline HyperbandPlan plan(int R, int eta) {
    if (R < 1 || eta < 2) {
        throw PreconditionError("plan: need R >= 1 and eta >= 2");
    }
    HyperbandPlan p;
    p.R = R;
    p.eta = eta;
    int s_max = 0;
    while (detail::ipow(eta, s_max + 1) <= R) {
        ++s_max;
    }
    for (int s = s_max; s >= 0; --s) {
        Bracket b;
        b.s = s;
        auto n = detail::ceil_div(static_cast<std::int64_t>(s_max + 1) * detail::ipow(eta, s), s + 1);
        for (int i = 0; i <= s; ++i) {
            const auto r = std::max<std::int64_t>(1, detail::ceil_div(R, detail::ipow(eta, s - i)));
            b.rounds.push_back({static_cast<int>(n), static_cast<int>(r)});
            n /= eta;
        }
        p.brackets.push_back(std::move(b));
    }
    return p;
}

// Draws one config; called single-threaded, in trial order.
using ConfigSampler = std::function<HeadConfig(Rng&)>;
// Trains one config; may be called concurrently from several threads.
using TrialTrainer = std::function<Trial(const HeadConfig&, int budget_epochs, std::uint64_t seed)>;
// Sees every finished trial at the round barrier, in trial_id order.
using TrialObserver = std::function<void(const Trial&)>;

struct BracketOptions {
    int parallel = 1;
    TrialObserver on_trial;
};

// Indices of the k best trials by val_acc; ties go to the earlier trial_id.
inline std::vector<std::size_t> top_k(const std::vector<Trial>& trials, std::size_t k) {
    std::vector<std::size_t> idx(trials.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (trials[a].val_acc != trials[b].val_acc) {
            return trials[a].val_acc > trials[b].val_acc;
        }
        return trials[a].trial_id < trials[b].trial_id;
    });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

namespace detail {

struct Job {
    HeadConfig config;
    std::uint64_t seed = 0;
};

inline Trial run_one(const TrialTrainer& train, const Job& job, int budget) {
    try {
        return train(job.config, budget, job.seed);
    } catch (const std::exception&) {
        Trial failed;
        failed.config = job.config;
        failed.budget_epochs = budget;
        failed.seed = job.seed;
        return failed;
    }
}

// Result order never depends on scheduling: slot i holds job i.
inline std::vector<Trial> run_round(const TrialTrainer& train, const std::vector<Job>& jobs, int budget, int parallel) {
    std::vector<Trial> out(jobs.size());
    const auto workers = static_cast<std::size_t>(std::clamp<std::size_t>(
        static_cast<std::size_t>(std::max(parallel, 1)), 1, std::max<std::size_t>(jobs.size(), 1)));
    if (workers == 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            out[i] = run_one(train, jobs[i], budget);
        }
        return out;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < jobs.size(); i += workers) {
                out[i] = run_one(train, jobs[i], budget);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    return out;
}

} // namespace detail

// Successive halving over one bracket. Round 0 draws n_0 configs; each later
// round retrains the top n_{i+1} from scratch at r_{i+1} with the seed they
// were first trained with. next_id is advanced once per recorded trial.
inline std::vector<Trial> run_bracket(const Bracket& bracket, const ConfigSampler& sample, const TrialTrainer& train,
                                      Rng& rng, std::int64_t& next_id, const BracketOptions& opts = {}) {
    if (bracket.rounds.empty()) {
        throw PreconditionError("run_bracket: empty bracket");
    }
    std::vector<detail::Job> jobs;
    for (int i = 0; i < bracket.rounds.front().n; ++i) {
        detail::Job job;
        job.config = sample(rng);
        job.seed = rng.next_u64();
        jobs.push_back(std::move(job));
    }
    std::vector<Trial> all;
    for (std::size_t rung = 0; rung < bracket.rounds.size(); ++rung) {
        const Round& round = bracket.rounds[rung];
        std::vector<Trial> results = detail::run_round(train, jobs, round.r, opts.parallel);
        for (auto& t : results) {
            t.trial_id = next_id++;
            t.bracket = bracket.s;
            t.rung = static_cast<int>(rung);
            if (opts.on_trial) {
                opts.on_trial(t);
            }
            all.push_back(t);
        }
        if (rung + 1 < bracket.rounds.size()) {
            const auto keep = top_k(results, static_cast<std::size_t>(bracket.rounds[rung + 1].n));
            std::vector<detail::Job> next;
            for (std::size_t i : keep) {
                next.push_back(jobs[i]);
            }
            jobs = std::move(next);
        }
    }
    return all;
}

// Every bracket of the plan, s_max first. Trial ids start at 0.
inline std::vector<Trial> run_hyperband(const HyperbandPlan& p, const ConfigSampler& sample, const TrialTrainer& train,
                                        Rng& rng, const BracketOptions& opts = {}) {
    std::vector<Trial> all;
    std::int64_t next_id = 0;
    for (const auto& b : p.brackets) {
        auto trials = run_bracket(b, sample, train, rng, next_id, opts);
        all.insert(all.end(), trials.begin(), trials.end());
    }
    return all;
}

// Incumbent: best val_acc among trials at the largest budget reached, ties
// to the earlier trial_id.
inline const Trial& best_trial(const std::vector<Trial>& trials) {
    if (trials.empty()) {
        throw PreconditionError("best_trial: no trials");
    }
    int top_budget = 0;
    for (const auto& t : trials) {
        top_budget = std::max(top_budget, t.budget_epochs);
    }
    const Trial* best = nullptr;
    for (const auto& t : trials) {
        if (t.budget_epochs != top_budget) {
            continue;
        }
        if (best == nullptr || t.val_acc > best->val_acc ||
            (t.val_acc == best->val_acc && t.trial_id < best->trial_id)) {
            best = &t;
        }
    }
    return *best;
}

} // namespace headsearch
