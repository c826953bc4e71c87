// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "maskkv/common.hpp"
#include "maskkv/scoring.hpp"

namespace maskkv {

/// Retained prompt positions of one (layer, head), strictly increasing.
using KeepSet = std::vector<std::size_t>;

/// Keep sets indexed [layer][head].
using KeepSets = std::vector<std::vector<KeepSet>>;

/// Importance vectors indexed [layer][head].
using ImportanceGrid = std::vector<std::vector<ImportanceVector>>;

/// arg-top-k of `importance`, ties toward the lower position. k >= n keeps
/// everything.
inline KeepSet select_keep_set(std::span<const double> importance, std::size_t k) {
    std::vector<std::size_t> order(importance.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (k >= order.size()) {
        return order;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

/// Observation-window importance: column sums over the prompt keys of the
/// last `window_size` rows of a prompt-query attention matrix (rows are prompt
/// queries in order; the first `prompt_keys` columns are prompt keys).
inline ImportanceVector snap_importance(const Matrix& prompt_attention, std::size_t prompt_keys,
                                        std::size_t window_size) {
    if (window_size > prompt_attention.rows()) {
        throw ConfigError("observation window larger than the prompt");
    }
    if (prompt_keys > prompt_attention.cols()) {
        throw ConfigError("prompt key count exceeds attention width");
    }
    ImportanceVector out;
    out.scores.assign(prompt_keys, 0.0);
    for (std::size_t i = prompt_attention.rows() - window_size; i < prompt_attention.rows(); ++i) {
        const auto row = prompt_attention.row(i);
        for (std::size_t j = 0; j < prompt_keys; ++j) {
            out.scores[j] += row[j];
        }
        ++out.voters;
    }
    return out;
}

inline KeepSet snap_select(const Matrix& prompt_attention, std::size_t prompt_keys, std::size_t k,
                           std::size_t window_size) {
    return select_keep_set(snap_importance(prompt_attention, prompt_keys, window_size).scores, k);
}

}  // namespace maskkv
