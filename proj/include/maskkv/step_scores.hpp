// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "maskkv/common.hpp"
#include "maskkv/keep_set.hpp"
#include "maskkv/model.hpp"
#include "maskkv/scoring.hpp"

// Bridges between a model StepOutput and the pure scoring functions.

namespace maskkv {

namespace detail {

inline std::size_t row_of(const AttentionMap& am, std::size_t pos) {
    const auto it = std::lower_bound(am.query_positions.begin(), am.query_positions.end(), pos);
    if (it == am.query_positions.end() || *it != pos) {
        throw ProtocolError("query position " + std::to_string(pos) + " was not computed this step");
    }
    return static_cast<std::size_t>(it - am.query_positions.begin());
}

}  // namespace detail

/// Mask-query rows of one head's attention map, all available key columns.
/// Prompt keys come first since key positions ascend.
inline MaskAttention head_mask_attention(const StepOutput& out, const DenoisingState& state, std::size_t layer,
                                         std::size_t head) {
    const AttentionMap& am = out.layers.at(layer).heads.at(head);
    const std::vector<std::size_t> masked = state.masked_positions();
    MaskAttention a;
    a.weights = Matrix(masked.size(), am.key_positions.size());
    for (std::size_t i = 0; i < masked.size(); ++i) {
        const auto src = am.weights.row(detail::row_of(am, masked[i]));
        std::copy(src.begin(), src.end(), a.weights.row(i).begin());
    }
    a.prompt_keys = static_cast<std::size_t>(
        std::lower_bound(am.key_positions.begin(), am.key_positions.end(), state.prompt_len) - am.key_positions.begin());
    return a;
}

namespace detail {

/// Spreads scores over present prompt keys back onto all prompt positions.
inline ImportanceVector scatter_prompt(const ImportanceVector& in, const AttentionMap& am, std::size_t prompt_len) {
    ImportanceVector out = in;
    out.scores.assign(prompt_len, 0.0);
    for (std::size_t c = 0; c < in.scores.size(); ++c) out.scores[am.key_positions[c]] = in.scores[c];
    return out;
}

}  // namespace detail

/// Mask-Voting importance for every (layer, head); length n_p each.
inline ImportanceGrid mask_voting_grid(const StepOutput& out, const DenoisingState& state,
                                       MaskSegment segment = MaskSegment::all) {
    ImportanceGrid grid(out.layers.size());
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        for (std::size_t h = 0; h < out.layers[l].heads.size(); ++h) {
            const MaskAttention a = head_mask_attention(out, state, l, h);
            grid[l].push_back(detail::scatter_prompt(mask_voting(a, segment), out.layers[l].heads[h], state.prompt_len));
        }
    }
    return grid;
}

/// Observation-window importance from the last `window` prompt queries.
inline ImportanceGrid snap_grid(const StepOutput& out, const DenoisingState& state, std::size_t window) {
    const std::size_t np = state.prompt_len;
    window = std::min(window, np);
    ImportanceGrid grid(out.layers.size());
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        for (const AttentionMap& am : out.layers[l].heads) {
            Matrix prompt_rows(np, am.key_positions.size());
            for (std::size_t p = 0; p < np; ++p) {
                const auto src = am.weights.row(detail::row_of(am, p));
                std::copy(src.begin(), src.end(), prompt_rows.row(p).begin());
            }
            const std::size_t prompt_keys = static_cast<std::size_t>(
                std::lower_bound(am.key_positions.begin(), am.key_positions.end(), np) - am.key_positions.begin());
            grid[l].push_back(detail::scatter_prompt(snap_importance(prompt_rows, prompt_keys, window), am, np));
        }
    }
    return grid;
}

/// Prompt preference per [layer][head]; decoded response keys count toward
/// neither sum.
inline std::vector<std::vector<HeadPreference>> preference_grid(const StepOutput& out, const DenoisingState& state,
                                                                RunLog* log = nullptr) {
    std::vector<std::vector<HeadPreference>> grid(out.layers.size());
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        for (std::size_t h = 0; h < out.layers[l].heads.size(); ++h) {
            const AttentionMap& am = out.layers[l].heads[h];
            std::vector<std::size_t> prompt_cols;
            std::vector<std::size_t> mask_cols;
            for (std::size_t c = 0; c < am.key_positions.size(); ++c) {
                const std::size_t pos = am.key_positions[c];
                if (state.is_prompt(pos)) {
                    prompt_cols.push_back(c);
                } else if (state.tokens[pos] == state.mask_id) {
                    mask_cols.push_back(c);
                }
            }
            grid[l].push_back(prompt_preference(head_mask_attention(out, state, l, h), prompt_cols, mask_cols, log));
        }
    }
    return grid;
}

/// Attention sub-layer importance of every layer, over all tracked positions.
inline std::vector<LayerImportance> layer_importance_all(const StepOutput& out, RunLog* log = nullptr) {
    std::vector<LayerImportance> result;
    std::vector<std::size_t> rows;
    for (std::size_t pos = 0; pos < out.tracked.size(); ++pos) {
        if (out.tracked[pos]) rows.push_back(pos);
    }
    for (const LayerTrace& lt : out.layers) {
        Matrix in(rows.size(), lt.attn_input.cols());
        Matrix outm(rows.size(), lt.attn_output.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto a = lt.attn_input.row(rows[i]);
            const auto b = lt.attn_output.row(rows[i]);
            std::copy(a.begin(), a.end(), in.row(i).begin());
            std::copy(b.begin(), b.end(), outm.row(i).begin());
        }
        result.push_back(layer_importance(in, outm, log));
    }
    return result;
}

}  // namespace maskkv
