#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "headsearch/errors.hpp"
#include "headsearch/tensor.hpp"

namespace headsearch::nn {

// Adam with bias correction. m and v hold one buffer per registered parameter.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// One update over `params` using their accumulated gradients. Parameters with
// no accumulated gradient are treated as having a zero gradient.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0);
            state.v.emplace_back(p.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                             std::to_string(params.size()));
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(state.beta1, t);
    const double correction2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.size()) {
            throw DimensionError("adam_step: parameter " + std::to_string(i) + " changed shape");
        }
        const auto grad = p.grad();
        auto value = p.mutable_data();
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double g = grad.empty() ? 0.0 : grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[j] / correction1;
            const double v_hat = v[j] / correction2;
            value[j] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

struct ScheduleSpec {
    double base_lr = 3e-4;
    std::int64_t total_steps = 1;
    std::int64_t warmup_steps = 0;
};

// Linear warmup to base_lr, then cosine decay to zero at total_steps.
inline double lr_at(std::int64_t step, const ScheduleSpec& s) {
    if (s.total_steps < 1 || s.warmup_steps < 0 || s.warmup_steps >= s.total_steps || s.base_lr <= 0.0) {
        throw PreconditionError("lr_at: need 0 <= warmup < total and base_lr > 0");
    }
    if (step < 0 || step > s.total_steps) {
        throw PreconditionError("lr_at: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(s.total_steps) + "]");
    }
    if (step < s.warmup_steps) {
        return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    const double progress =
        static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
    return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

} // namespace headsearch::nn
