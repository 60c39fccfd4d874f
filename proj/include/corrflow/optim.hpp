#pragma once

#include <functional>
#include <map>
#include <random>

#include "corrflow/tensor.hpp"

namespace corrflow {

/// Per-parameter Adam moments keyed by parameter name, plus the step counter.
template <typename R>
struct AdamState {
    std::map<std::string, std::vector<R>> m;
    std::map<std::string, std::vector<R>> v;
    std::int64_t step = 0;
};

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update over the named parameters. Parameters
/// without a populated gradient are treated as zero-gradient (unchanged by
/// the moment decay except through existing momentum).
template <typename R>
void adam_step(std::vector<std::pair<std::string, Tensor<R>>>& params, AdamState<R>& state,
               const AdamConfig& cfg) {
    if (cfg.lr <= 0) throw std::invalid_argument("adam_step: lr must be positive");
    ++state.step;
    const R b1 = R(cfg.beta1), b2 = R(cfg.beta2);
    const R corr1 = R(1) - std::pow(b1, R(static_cast<double>(state.step)));
    const R corr2 = R(1) - std::pow(b2, R(static_cast<double>(state.step)));
    for (auto& [name, t] : params) {
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(static_cast<size_t>(t.numel()), R(0));
        if (v.empty()) v.assign(static_cast<size_t>(t.numel()), R(0));
        if (static_cast<std::int64_t>(m.size()) != t.numel())
            throw std::invalid_argument("adam_step: moment shape mismatch for " + name);
        const std::vector<R>* g = t.has_grad() ? &t.grad() : nullptr;
        auto& x = t.data();
        for (size_t i = 0; i < x.size(); ++i) {
            const R gi = g ? (*g)[i] : R(0);
            m[i] = b1 * m[i] + (R(1) - b1) * gi;
            v[i] = b2 * v[i] + (R(1) - b2) * gi * gi;
            const R mhat = m[i] / corr1;
            const R vhat = v[i] / corr2;
            x[i] -= R(cfg.lr) * mhat / (std::sqrt(vhat) + R(cfg.eps));
        }
    }
}

/// Central finite-difference verification of analytic gradients.
///
/// loss_fn must re-evaluate the full loss from the current parameter values.
/// Returns the max over sampled coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename R>
double finite_diff_check(const std::function<R()>& loss_fn,
                         std::vector<std::pair<std::string, Tensor<R>>>& params,
                         const std::map<std::string, std::vector<R>>& analytic_grads,
                         double eps, int samples_per_param, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (auto& [name, t] : params) {
        auto it = analytic_grads.find(name);
        if (it == analytic_grads.end())
            throw std::invalid_argument("finite_diff_check: missing analytic grad for " + name);
        const auto& ag = it->second;
        std::uniform_int_distribution<std::int64_t> pick(0, t.numel() - 1);
        for (int s = 0; s < samples_per_param; ++s) {
            const auto i = static_cast<size_t>(pick(rng));
            const R saved = t.data()[i];
            const double h = eps * std::max(1.0, std::abs(static_cast<double>(saved)));
            t.data()[i] = saved + R(h);
            const double up = static_cast<double>(loss_fn());
            t.data()[i] = saved - R(h);
            const double down = static_cast<double>(loss_fn());
            t.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = static_cast<double>(ag[i]);
            const double rel = std::abs(analytic - numeric) /
                               std::max({1.0, std::abs(analytic), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace corrflow
