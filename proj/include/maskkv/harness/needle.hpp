// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "maskkv/common.hpp"
#include "maskkv/forward.hpp"
#include "maskkv/model.hpp"

namespace maskkv {

/// Token ids a task generator must respect.
struct TaskVocab {
    std::size_t vocab_size = 0;
    TokenId mask_id = 0;
    TokenId needle = 0;
};

struct NeedleTask {
    std::vector<TokenId> prompt;
    TokenId answer = 0;
    std::size_t needle_pos = 0;
};

/// Filler ids: everything except the mask and the needle.
inline std::vector<TokenId> filler_tokens(const TaskVocab& vocab) {
    std::vector<TokenId> out;
    for (TokenId t = 0; t < vocab.vocab_size; ++t) {
        if (t != vocab.mask_id && t != vocab.needle) out.push_back(t);
    }
    if (out.empty()) {
        throw ConfigError("vocabulary has no filler tokens");
    }
    return out;
}

/// Seeded filler prompt with no needle.
inline std::vector<TokenId> random_prompt(std::uint64_t seed, std::size_t prompt_len, const TaskVocab& vocab) {
    const std::vector<TokenId> filler = filler_tokens(vocab);
    std::mt19937_64 gen(seed);
    std::vector<TokenId> prompt(prompt_len);
    for (TokenId& t : prompt) t = filler[gen() % filler.size()];
    return prompt;
}

/// Filler prompt with the needle planted at floor(depth * prompt_len),
/// clamped to the last prompt position.
inline NeedleTask needle_task(std::uint64_t seed, std::size_t prompt_len, double depth, const TaskVocab& vocab) {
    if (prompt_len == 0) {
        throw ConfigError("needle task needs a nonempty prompt");
    }
    if (!(depth >= 0.0 && depth <= 1.0)) {
        throw ConfigError("needle depth must lie in [0, 1]");
    }
    NeedleTask task;
    task.prompt = random_prompt(seed, prompt_len, vocab);
    task.needle_pos = std::min(static_cast<std::size_t>(std::floor(depth * static_cast<double>(prompt_len))), prompt_len - 1);
    task.prompt[task.needle_pos] = vocab.needle;
    task.answer = vocab.needle;
    return task;
}

inline bool contains_token(const std::vector<TokenId>& response, TokenId token) {
    return std::find(response.begin(), response.end(), token) != response.end();
}

/// Non-mask token whose layer-0 key best matches the mask query, summed over
/// heads and ignoring position. Ties go to the lower id.
inline TokenId salient_token(const ModelParams& params) {
    const ModelConfig& cfg = params.config;
    const std::size_t d = cfg.model_dim;
    std::vector<double> x(d);
    std::vector<double> q(d);
    std::vector<double> k(d);
    detail::rms_norm(params.embedding.row(cfg.mask_id()), x);
    detail::mat_vec(x, params.layers.front().wq, q);
    TokenId best = cfg.mask_id() == 0 ? 1 : 0;
    double best_score = -INFINITY;
    for (TokenId t = 0; t < cfg.vocab_size; ++t) {
        if (t == cfg.mask_id()) continue;
        detail::rms_norm(params.embedding.row(t), x);
        detail::mat_vec(x, params.layers.front().wk, k);
        const double s = dot(q, k);
        if (s > best_score) {
            best_score = s;
            best = t;
        }
    }
    return best;
}

inline TaskVocab task_vocab(const ModelParams& params) {
    return {params.config.vocab_size, params.config.mask_id(), salient_token(params)};
}

}  // namespace maskkv
