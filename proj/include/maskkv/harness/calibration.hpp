// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "maskkv/budgeting.hpp"
#include "maskkv/common.hpp"
#include "maskkv/forward.hpp"
#include "maskkv/harness/trace.hpp"
#include "maskkv/model.hpp"
#include "maskkv/scoring.hpp"
#include "maskkv/step_scores.hpp"

namespace maskkv {

namespace detail {

struct ProfileAccumulator {
    std::vector<double> importance;
    std::vector<std::vector<double>> preference;
    std::size_t samples = 0;

    void add(const std::vector<double>& imp, const std::vector<std::vector<double>>& pref) {
        if (samples == 0) {
            importance.assign(imp.size(), 0.0);
            preference.assign(pref.size(), std::vector<double>(pref.empty() ? 0 : pref.front().size(), 0.0));
        }
        if (imp.size() != importance.size() || pref.size() != preference.size()) {
            throw ConfigError("calibration samples disagree on layer count");
        }
        for (std::size_t l = 0; l < imp.size(); ++l) {
            importance[l] += imp[l];
            if (pref[l].size() != preference[l].size()) {
                throw ConfigError("calibration samples disagree on head count");
            }
            for (std::size_t h = 0; h < pref[l].size(); ++h) preference[l][h] += pref[l][h];
        }
        ++samples;
    }

    CalibrationProfile finish(std::string source) const {
        if (samples == 0) {
            throw ConfigError("calibration needs at least one sample");
        }
        CalibrationProfile p;
        const double n = static_cast<double>(samples);
        p.layer_importance = importance;
        for (double& v : p.layer_importance) v /= n;
        p.head_preference = preference;
        for (auto& row : p.head_preference) {
            for (double& v : row) v /= n;
        }
        p.samples = samples;
        p.source = std::move(source);
        p.validate();
        return p;
    }
};

}  // namespace detail

/// Per-sample signals from the first forward step of x^(T).
inline void first_step_signals(const ModelParams& params, const std::vector<TokenId>& prompt, std::size_t gen_len,
                               const RemaskPolicy& policy, std::vector<double>& importance,
                               std::vector<std::vector<double>>& preference, RunLog* log) {
    const DenoisingState state = initial_state(params.config, prompt, gen_len, policy);
    const StepOutput out = forward_step(params, state);
    importance.clear();
    for (const LayerImportance& li : layer_importance_all(out, log)) importance.push_back(li.value);
    preference.clear();
    for (const auto& row : preference_grid(out, state, log)) {
        preference.emplace_back();
        for (const HeadPreference& hp : row) preference.back().push_back(hp.value);
    }
}

/// Averages layer importance and head preference over calibration prompts.
inline CalibrationProfile calibrate(const ModelParams& params, const std::vector<std::vector<TokenId>>& prompts,
                                    std::size_t gen_len, const RemaskPolicy& policy = {}, RunLog* log = nullptr) {
    detail::ProfileAccumulator acc;
    std::vector<double> imp;
    std::vector<std::vector<double>> pref;
    for (const auto& prompt : prompts) {
        first_step_signals(params, prompt, gen_len, policy, imp, pref, log);
        acc.add(imp, pref);
    }
    return acc.finish("model seed=" + std::to_string(params.config.seed) + " prompts=" + std::to_string(prompts.size()));
}

/// Same averages computed from recorded traces.
inline CalibrationProfile calibrate(const std::vector<AttentionTrace>& traces, RunLog* log = nullptr) {
    detail::ProfileAccumulator acc;
    for (const AttentionTrace& t : traces) {
        std::vector<double> imp;
        std::vector<std::vector<double>> pref(t.dims.layers);
        for (std::size_t l = 0; l < t.dims.layers; ++l) {
            imp.push_back(layer_importance(t.input(l), t.output(l), log).value);
            for (std::size_t h = 0; h < t.dims.heads; ++h) {
                pref[l].push_back(prompt_preference(trace_mask_attention(t, l, h), log).value);
            }
        }
        acc.add(imp, pref);
    }
    return acc.finish("traces=" + std::to_string(traces.size()));
}

}  // namespace maskkv
