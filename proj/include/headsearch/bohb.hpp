#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <vector>

#include "headsearch/errors.hpp"
#include "headsearch/rng.hpp"
#include "headsearch/searchspace.hpp"
#include "headsearch/trainer.hpp"

namespace headsearch {

struct SamplerParams {
    double gamma = 0.15;
    int min_points = static_cast<int>(space::kDims) + 1;
    int n_candidates = 64;
    double random_fraction = 1.0 / 3.0;
    double bandwidth_floor = 1e-3;
};

inline void check(const SamplerParams& p) {
    if (!(p.gamma > 0.0 && p.gamma < 1.0) || p.n_candidates < 1 || p.min_points < 2 ||
        !(p.random_fraction >= 0.0 && p.random_fraction <= 1.0) || !(p.bandwidth_floor > 0.0)) {
        throw PreconditionError("sampler params out of range");
    }
}

struct Observation {
    ConfigVector x;
    double val_acc = 0.0;
};

// Append-only; observations are grouped by budget in arrival order.
class ObservationStore {
  public:
    void add(int budget, const ConfigVector& x, double val_acc) { by_budget_[budget].push_back({x, val_acc}); }
    void observe(const Trial& t) { add(t.budget_epochs, encode(t.config), t.val_acc); }

    const std::vector<Observation>& at(int budget) const {
        static const std::vector<Observation> none;
        auto it = by_budget_.find(budget);
        return it == by_budget_.end() ? none : it->second;
    }
    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& [b, obs] : by_budget_) {
            n += obs.size();
        }
        return n;
    }
    // Largest budget holding at least min_points observations, or -1.
    int largest_budget_with(std::size_t min_points) const {
        for (auto it = by_budget_.rbegin(); it != by_budget_.rend(); ++it) {
            if (it->second.size() >= min_points) {
                return it->first;
            }
        }
        return -1;
    }

  private:
    std::map<int, std::vector<Observation>> by_budget_;
};

// Dimension kinds: categories > 0 means a categorical dim with that many
// values plus one extra "inactive" category; 0 means continuous on [0, 1].
using KdeLayout = std::vector<int>;

namespace detail {
inline double normal_cdf(double z) {
    return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}
inline double normal_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}
} // namespace detail

// Product-kernel density: truncated Gaussians on continuous dims (Scott's
// rule bandwidth with a floor), add-one frequency tables on categorical dims.
class Kde {
  public:
    Kde() = default;

    Kde(KdeLayout layout, std::vector<std::vector<double>> points, std::vector<std::vector<bool>> active,
        double bandwidth_floor)
        : layout_(std::move(layout)), points_(std::move(points)) {
        if (points_.empty()) {
            throw PreconditionError("kde: no points");
        }
        const std::size_t d = layout_.size();
        std::size_t d_cont = 0;
        for (int k : layout_) {
            d_cont += k == 0 ? 1 : 0;
        }
        const auto n = static_cast<double>(points_.size());
        const double scott = std::pow(n, -1.0 / (static_cast<double>(d_cont) + 4.0));
        bandwidth_.assign(d, 0.0);
        tables_.assign(d, {});
        for (std::size_t j = 0; j < d; ++j) {
            if (layout_[j] == 0) {
                double mean = 0.0;
                for (const auto& p : points_) {
                    mean += p[j];
                }
                mean /= n;
                double var = 0.0;
                for (const auto& p : points_) {
                    var += (p[j] - mean) * (p[j] - mean);
                }
                const double sd = points_.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
                bandwidth_[j] = std::max(bandwidth_floor, sd * scott);
            } else {
                const auto k = static_cast<std::size_t>(layout_[j]);
                std::vector<double> counts(k + 1, 1.0);
                for (std::size_t i = 0; i < points_.size(); ++i) {
                    counts[category(j, points_[i][j], active.empty() || active[i][j])] += 1.0;
                }
                const double total = n + static_cast<double>(k + 1);
                for (auto& c : counts) {
                    c /= total;
                }
                tables_[j] = std::move(counts);
            }
        }
    }

    std::size_t dims() const { return layout_.size(); }
    std::size_t size() const { return points_.size(); }
    double bandwidth(std::size_t j) const { return bandwidth_.at(j); }
    const std::vector<double>& table(std::size_t j) const { return tables_.at(j); }

    // Category index of a value; the extra last slot stands for "inactive".
    std::size_t category(std::size_t j, double x, bool is_active) const {
        const auto k = static_cast<std::size_t>(layout_[j]);
        if (!is_active) {
            return k;
        }
        return std::min(k - 1, static_cast<std::size_t>(std::clamp(x, 0.0, 1.0) * static_cast<double>(k)));
    }

    double pdf(const std::vector<double>& x, const std::vector<bool>& active = {}) const {
        double cat = 1.0;
        for (std::size_t j = 0; j < dims(); ++j) {
            if (layout_[j] != 0) {
                cat *= tables_[j][category(j, x[j], active.empty() || active[j])];
            }
        }
        double mix = 0.0;
        for (const auto& p : points_) {
            double term = 1.0;
            for (std::size_t j = 0; j < dims() && term > 0.0; ++j) {
                if (layout_[j] != 0) {
                    continue;
                }
                const double h = bandwidth_[j];
                const double mass = detail::normal_cdf((1.0 - p[j]) / h) - detail::normal_cdf(-p[j] / h);
                term *= detail::normal_pdf((x[j] - p[j]) / h) / (h * mass);
            }
            mix += term;
        }
        return cat * mix / static_cast<double>(points_.size());
    }

    // One draw: continuous dims from the kernel of a uniformly chosen point,
    // categorical dims from their tables restricted to real (non-inactive)
    // values and placed at the bin centre.
    std::vector<double> sample(Rng& rng) const {
        const auto& p = points_[rng.index(points_.size())];
        std::vector<double> x(dims(), 0.5);
        for (std::size_t j = 0; j < dims(); ++j) {
            if (layout_[j] == 0) {
                x[j] = truncated_normal(rng, p[j], bandwidth_[j]);
            } else {
                const auto k = static_cast<std::size_t>(layout_[j]);
                double total = 0.0;
                for (std::size_t c = 0; c < k; ++c) {
                    total += tables_[j][c];
                }
                double u = rng.uniform() * total;
                std::size_t pick = k - 1;
                for (std::size_t c = 0; c < k; ++c) {
                    if (u < tables_[j][c]) {
                        pick = c;
                        break;
                    }
                    u -= tables_[j][c];
                }
                x[j] = (static_cast<double>(pick) + 0.5) / static_cast<double>(k);
            }
        }
        return x;
    }

  private:
    static double truncated_normal(Rng& rng, double mu, double h) {
        for (int tries = 0; tries < 100; ++tries) {
            const double v = mu + h * rng.normal();
            if (v >= 0.0 && v <= 1.0) {
                return v;
            }
        }
        return std::clamp(mu, 0.0, 1.0);
    }

    KdeLayout layout_;
    std::vector<std::vector<double>> points_;
    std::vector<double> bandwidth_;
    std::vector<std::vector<double>> tables_;
};

// Layout of the 12-dim config vector: pooling has 3 values, the four flags 2.
inline KdeLayout config_layout() {
    KdeLayout layout(space::kDims, 0);
    layout[dim::pooling] = 3;
    layout[dim::freeze] = 2;
    layout[dim::conv_enabled] = 2;
    layout[dim::conv_skip] = 2;
    layout[dim::enc_enabled] = 2;
    return layout;
}

struct KdePair {
    Kde good;
    Kde bad;
};

// Midpoint imputation: inactive dims of the decoded config are reset to 0.5.
inline ConfigVector impute(const std::vector<double>& raw) {
    ConfigVector v;
    std::copy(raw.begin(), raw.end(), v.values.begin());
    v.active = active_mask(v);
    for (std::size_t j = 0; j < space::kDims; ++j) {
        if (!v.active[j]) {
            v.values[j] = 0.5;
        }
    }
    return v;
}

namespace detail {
inline std::vector<double> as_vec(const ConfigVector& v) {
    return std::vector<double>(v.values.begin(), v.values.end());
}
inline std::vector<bool> as_mask(const ConfigVector& v) {
    return std::vector<bool>(v.active.begin(), v.active.end());
}
} // namespace detail

// Size of the good set for N observations.
inline std::size_t good_count(std::size_t n, double gamma) {
    return static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n) - 1e-12));
}

inline KdePair fit_kdes(const std::vector<Observation>& obs, const SamplerParams& params = {}) {
    check(params);
    if (obs.size() < static_cast<std::size_t>(params.min_points)) {
        throw DataError("fit_kdes: " + std::to_string(obs.size()) + " observations, need " +
                        std::to_string(params.min_points));
    }
    std::vector<std::size_t> order(obs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return obs[a].val_acc > obs[b].val_acc; });
    const std::size_t n_good = std::max<std::size_t>(1, good_count(obs.size(), params.gamma));
    if (n_good >= obs.size()) {
        throw DataError("fit_kdes: bad set would be empty");
    }
    std::vector<std::vector<double>> gp, bp;
    std::vector<std::vector<bool>> ga, ba;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& o = obs[order[i]];
        (i < n_good ? gp : bp).push_back(detail::as_vec(o.x));
        (i < n_good ? ga : ba).push_back(detail::as_mask(o.x));
    }
    const auto layout = config_layout();
    return {Kde(layout, std::move(gp), std::move(ga), params.bandwidth_floor),
            Kde(layout, std::move(bp), std::move(ba), params.bandwidth_floor)};
}

// Density-ratio proposals over the store, with a uniform fallback.
class BohbSampler {
  public:
    explicit BohbSampler(SamplerParams params = {}, int base_dim = 32) : params_(params), base_dim_(base_dim) {
        check(params_);
    }

    void observe(const Trial& t) { store_.observe(t); }
    ObservationStore& store() { return store_; }
    const ObservationStore& store() const { return store_; }
    const SamplerParams& params() const { return params_; }

    HeadConfig propose(Rng& rng) const {
        const bool random = rng.uniform() < params_.random_fraction;
        const int budget = store_.largest_budget_with(static_cast<std::size_t>(params_.min_points));
        if (random || budget < 0) {
            return sample_uniform(rng, base_dim_);
        }
        const KdePair kdes = fit_kdes(store_.at(budget), params_);
        ConfigVector best;
        double best_score = -1.0;
        for (int i = 0; i < params_.n_candidates; ++i) {
            const ConfigVector cand = impute(kdes.good.sample(rng));
            const auto x = detail::as_vec(cand);
            const auto mask = detail::as_mask(cand);
            const double g = kdes.good.pdf(x, mask);
            const double b = std::max(kdes.bad.pdf(x, mask), 1e-300);
            const double score = g / b;
            if (score > best_score) {
                best_score = score;
                best = cand;
            }
        }
        return repair_heads(decode(best), base_dim_);
    }

  private:
    SamplerParams params_;
    int base_dim_;
    ObservationStore store_;
};

} // namespace headsearch
