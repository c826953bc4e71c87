// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "maskkv/common.hpp"

namespace maskkv {

/// Row-softmaxed attention from mask queries to every key. The first
/// `prompt_keys` columns are prompt keys.
struct MaskAttention {
    Matrix weights;  // n_m x n
    std::size_t prompt_keys = 0;

    std::size_t mask_rows() const noexcept { return weights.rows(); }
    std::size_t keys() const noexcept { return weights.cols(); }
};

/// Which mask query rows vote. Segments split the rows into three equal
/// contiguous thirds: row i of n_m belongs to third floor(3 i / n_m).
enum class MaskSegment { all, front, middle, back };

inline std::string_view to_string(MaskSegment s) {
    switch (s) {
        case MaskSegment::all: return "all";
        case MaskSegment::front: return "front";
        case MaskSegment::middle: return "middle";
        case MaskSegment::back: return "back";
    }
    return "all";
}

inline MaskSegment parse_mask_segment(std::string_view s) {
    if (s == "all") return MaskSegment::all;
    if (s == "front") return MaskSegment::front;
    if (s == "middle") return MaskSegment::middle;
    if (s == "back") return MaskSegment::back;
    throw ConfigError("unknown mask segment '" + std::string(s) + "'");
}

inline bool row_in_segment(std::size_t row, std::size_t rows, MaskSegment seg) {
    if (seg == MaskSegment::all) {
        return true;
    }
    const std::size_t third = (3 * row) / rows;
    return third == static_cast<std::size_t>(seg) - 1;
}

/// Per-prompt-token scores. `voters` is the number of mask rows that
/// contributed, so consumers can normalize if they wish.
struct ImportanceVector {
    std::vector<double> scores;
    std::size_t voters = 0;
    MaskSegment segment = MaskSegment::all;
};

struct LayerImportance {
    double value = 0.0;
    std::size_t samples = 0;
};

struct HeadPreference {
    double value = 0.0;
    double mask_to_prompt = 0.0;
    double mask_to_mask = 0.0;
};

/// A = softmax_row(Q_mask K_full^T / sqrt(d_k)).
inline MaskAttention mask_attention(const Matrix& q_mask, const Matrix& k_full, std::size_t prompt_keys) {
    if (q_mask.rows() == 0 || k_full.rows() == 0) {
        throw ConfigError("mask_attention needs at least one query and one key");
    }
    if (q_mask.cols() != k_full.cols()) {
        throw ConfigError("query and key widths differ");
    }
    if (prompt_keys > k_full.rows()) {
        throw ConfigError("prompt key count exceeds key count");
    }
    for (double x : q_mask.data()) {
        if (!std::isfinite(x)) throw NumericError("non-finite value in Q_mask");
    }
    for (double x : k_full.data()) {
        if (!std::isfinite(x)) throw NumericError("non-finite value in K_full");
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q_mask.cols()));
    MaskAttention out{Matrix(q_mask.rows(), k_full.rows()), prompt_keys};
    for (std::size_t i = 0; i < q_mask.rows(); ++i) {
        auto row = out.weights.row(i);
        for (std::size_t j = 0; j < k_full.rows(); ++j) {
            row[j] = dot(q_mask.row(i), k_full.row(j)) * inv_sqrt;
        }
        softmax_inplace(row);
    }
    return out;
}

/// Mask-Voting: I_j = sum over voting mask rows of A_ij, for prompt keys j.
inline ImportanceVector mask_voting(const MaskAttention& a, MaskSegment segment = MaskSegment::all) {
    ImportanceVector out;
    out.segment = segment;
    out.scores.assign(a.prompt_keys, 0.0);
    const std::size_t rows = a.mask_rows();
    for (std::size_t i = 0; i < rows; ++i) {
        if (!row_in_segment(i, rows, segment)) {
            continue;
        }
        ++out.voters;
        const auto row = a.weights.row(i);
        for (std::size_t j = 0; j < a.prompt_keys; ++j) {
            out.scores[j] += row[j];
        }
    }
    if (out.voters == 0) {
        throw ConfigError("mask segment '" + std::string(to_string(segment)) + "' is empty for " +
                          std::to_string(rows) + " mask rows");
    }
    return out;
}

/// 1 - mean cosine(h_in_i, h_out_i). Zero-norm rows count as cosine 1.
inline LayerImportance layer_importance(const Matrix& h_in, const Matrix& h_out, RunLog* log = nullptr) {
    if (h_in.rows() == 0) {
        throw ConfigError("layer_importance needs at least one row");
    }
    if (h_in.rows() != h_out.rows() || h_in.cols() != h_out.cols()) {
        throw ConfigError("h_in and h_out shapes differ");
    }
    double sum = 0.0;
    std::size_t degenerate_rows = 0;
    for (std::size_t i = 0; i < h_in.rows(); ++i) {
        bool degenerate = false;
        sum += cosine_or(h_in.row(i), h_out.row(i), 1.0, &degenerate);
        degenerate_rows += degenerate ? 1 : 0;
    }
    if (degenerate_rows > 0) {
        log_note(log, "layer_importance: " + std::to_string(degenerate_rows) + " zero-norm row(s) treated as cosine 1");
    }
    const auto n = static_cast<double>(h_in.rows());
    double value = 1.0 - sum / n;
    // Rounding can leave the mean a hair outside [-1, 1].
    value = value < 0.0 ? 0.0 : (value > 2.0 ? 2.0 : value);
    return {value, h_in.rows()};
}

/// P = S_{m->p} / (S_{m->p} + S_{m->m}); columns outside both sets (decoded
/// response keys) count toward neither.
inline HeadPreference prompt_preference(const MaskAttention& a, const std::vector<std::size_t>& prompt_cols,
                                        const std::vector<std::size_t>& mask_cols, RunLog* log = nullptr) {
    std::vector<char> seen(a.keys(), 0);
    for (const auto* cols : {&prompt_cols, &mask_cols}) {
        for (std::size_t c : *cols) {
            if (c >= a.keys()) {
                throw ConfigError("column " + std::to_string(c) + " outside attention matrix");
            }
            if (seen[c] != 0) {
                throw ConfigError("prompt and mask column sets overlap at " + std::to_string(c));
            }
            seen[c] = 1;
        }
    }
    HeadPreference out;
    for (std::size_t i = 0; i < a.mask_rows(); ++i) {
        const auto row = a.weights.row(i);
        for (std::size_t c : prompt_cols) out.mask_to_prompt += row[c];
        for (std::size_t c : mask_cols) out.mask_to_mask += row[c];
    }
    const double denom = out.mask_to_prompt + out.mask_to_mask;
    if (denom > 0.0) {
        out.value = out.mask_to_prompt / denom;
    } else {
        log_note(log, "prompt_preference: no mass on prompt or mask keys, preference set to 0");
    }
    return out;
}

/// Convenience for the common first-step layout: prompt keys first, then mask keys.
inline HeadPreference prompt_preference(const MaskAttention& a, RunLog* log = nullptr) {
    std::vector<std::size_t> prompt_cols(a.prompt_keys);
    std::vector<std::size_t> mask_cols(a.keys() - a.prompt_keys);
    for (std::size_t j = 0; j < prompt_cols.size(); ++j) prompt_cols[j] = j;
    for (std::size_t j = 0; j < mask_cols.size(); ++j) mask_cols[j] = a.prompt_keys + j;
    return prompt_preference(a, prompt_cols, mask_cols, log);
}

}  // namespace maskkv
